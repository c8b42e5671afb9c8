"""Image handling: loading, blank canvases, and mask fills.

Images are float64 arrays of shape (H, W, 3) with values in [0, 1].
The color prototypes below are the toy object palette shared by the stub
model and the stub segmenter: a pixel belongs to a prototype when every
channel is within COLOR_TOL of it.  Both fill colors (dataset mean and
black) sit outside every prototype, so filled pixels never read as
object evidence.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from quadcd_adapter.config import AdapterError

COLOR_PROTOTYPES = {
    "blue": (0.0, 0.0, 1.0),
    "green": (0.0, 1.0, 0.0),
    "red": (1.0, 0.0, 0.0),
    "yellow": (1.0, 1.0, 0.0),
}
# max per-channel distance for a prototype hit; 0.25 keeps prototypes,
# mean gray (0.5, 0.5, 0.5) and black mutually exclusive
COLOR_TOL = 0.25


def _validate(image: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise AdapterError(f"{what}: expected shape (H, W, 3), got {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise AdapterError(f"{what}: non-finite pixel values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise AdapterError(f"{what}: pixel values outside [0, 1]")
    return arr


def blank_canvas(height: int, width: int, color) -> np.ndarray:
    """A featureless image of one color."""
    canvas = np.empty((height, width, 3), dtype=np.float64)
    canvas[:] = np.asarray(color, dtype=np.float64)
    return _validate(canvas, "blank canvas")


def load_image(path) -> np.ndarray:
    """Load an image file as float64 RGB in [0, 1].

    .npy files hold an (H, W, 3) array, float in [0, 1] or uint8;
    anything else goes through Pillow.
    """
    path = Path(path)
    if not path.is_file():
        raise AdapterError(f"cannot load image {path}: no such file")
    if path.suffix == ".npy":
        try:
            arr = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise AdapterError(f"cannot load image {path}: {exc}") from None
        return _validate(arr, str(path))
    try:
        from PIL import Image
    except ImportError:
        raise AdapterError(
            f"cannot load image {path}: Pillow is required for non-.npy files"
        ) from None
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"))
    except OSError as exc:
        raise AdapterError(f"cannot load image {path}: {exc}") from None
    return _validate(arr, str(path))


def apply_mask(image: np.ndarray, visible: np.ndarray, fill_color) -> np.ndarray:
    """Copy of image with every pixel outside `visible` set to fill_color."""
    if visible.shape != image.shape[:2] or visible.dtype != bool:
        raise AdapterError(
            f"visibility mask must be bool of shape {image.shape[:2]}, "
            f"got {visible.dtype} {visible.shape}"
        )
    out = image.copy()
    out[~visible] = np.asarray(fill_color, dtype=np.float64)
    return out


def color_coverage(image: np.ndarray, prototype) -> float:
    """Fraction of pixels within COLOR_TOL of a prototype color."""
    dist = np.abs(image - np.asarray(prototype, dtype=np.float64)).max(axis=2)
    return float(np.count_nonzero(dist < COLOR_TOL)) / float(dist.size)


def color_mask(image: np.ndarray, prototype) -> np.ndarray:
    """Boolean mask of pixels within COLOR_TOL of a prototype color."""
    dist = np.abs(image - np.asarray(prototype, dtype=np.float64)).max(axis=2)
    return dist < COLOR_TOL
