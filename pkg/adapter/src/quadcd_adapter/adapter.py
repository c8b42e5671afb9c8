"""The adapter backend: model plus segmenter behind the wire protocol.

A session resolves its image from the request's segmentation_ref (a path
relative to the configured image root; absent means a blank canvas),
segments it exactly once, and precomputes the four conditioning
contexts: the original image, the dual exposure showing only the top-M
masks by area, the complementary residual exposure, and the image-free
non-visual context.  Hidden pixels are filled with the dataset-mean
color, or black under the "black" fill rule.  Every step request is
answered with four logit vectors over the model's tokenizer vocabulary;
per-request failures surface as protocol errors so the serve loop turns
them into error frames instead of dying.
"""

from __future__ import annotations

import math
import sys
import threading
from pathlib import Path

import numpy as np

from quadcd.backends import Backend, Session, SessionRequest
from quadcd.distcore import LogitVector
from quadcd.engine import CHANNELS, ChannelLogits
from quadcd.errors import ProtocolError
from quadcd.wire import serve_stdio, serve_tcp

from quadcd_adapter.config import FILL_RULES, AdapterConfig, AdapterError, parse_listen
from quadcd_adapter.images import apply_mask, blank_canvas, load_image
from quadcd_adapter.models import VisionLanguageModel, load_model
from quadcd_adapter.segmenters import Segmenter, load_segmenter

# fallback when the request carries no top_m, mirroring the engine's
# default top-M fraction over the mask count
DEFAULT_TOP_M_FRACTION = 0.05


def default_top_m(n_masks: int) -> int:
    return max(1, math.floor(DEFAULT_TOP_M_FRACTION * n_masks + 0.5))


class AdapterSession(Session):
    """One decode session: image resolved and segmented at open."""

    def __init__(self, backend: "AdapterBackend", request: SessionRequest):
        super().__init__(backend, request)
        try:
            image = backend.resolve_image(request.segmentation_ref)
        except AdapterError as exc:
            raise ProtocolError(str(exc)) from None
        masks = backend.segmenter.segment(image)
        for seg in masks:
            if seg.mask.shape != image.shape[:2]:
                raise ProtocolError(
                    f"segmenter mask {seg.id!r} has shape {seg.mask.shape}, "
                    f"image is {image.shape[:2]}"
                )
        ranked = sorted(masks, key=lambda seg: (-seg.area, seg.id))
        top_m = request.top_m if request.top_m is not None else default_top_m(len(ranked))
        top_m = min(top_m, len(ranked))
        dual_visible = np.zeros(image.shape[:2], dtype=bool)
        for seg in ranked[:top_m]:
            dual_visible |= seg.mask
        fill = backend.fill_color
        self.dual_visible = dual_visible
        self.channel_images = {
            "original": image,
            "dual": apply_mask(image, dual_visible, fill),
            "residual": apply_mask(image, ~dual_visible, fill),
            "non_visual": None,
        }

    def _compute(self, prefix: tuple[int, ...]) -> ChannelLogits:
        tokens = self.request.prompt_tokens + prefix
        contexts = [(self.channel_images[name], tokens) for name in CHANNELS]
        with self.backend.device_lock:
            try:
                rows = self.backend.model.logits_batch(contexts)
            except Exception as exc:
                # arbitrary model-runtime failures become error frames
                raise ProtocolError(f"model forward failed: {exc}") from None
        vectors = {}
        for name, row in zip(CHANNELS, rows):
            arr = np.asarray(row, dtype=np.float64)
            if arr.shape != (len(self.vocab),):
                raise ProtocolError(
                    f"model returned {arr.shape} for channel {name}, "
                    f"expected ({len(self.vocab)},)"
                )
            if not np.all(np.isfinite(arr)):
                raise ProtocolError(f"model returned non-finite logits for channel {name}")
            vectors[name] = LogitVector(arr)
        return ChannelLogits(**vectors)


class AdapterBackend(Backend):
    """Serves a model's tokenizer vocabulary; sessions own channel images."""

    name = "adapter"

    def __init__(
        self,
        model: VisionLanguageModel,
        segmenter: Segmenter,
        *,
        fill: str = "mean",
        image_root: str = ".",
        canvas: tuple[int, int] = (32, 32),
    ):
        if fill not in FILL_RULES:
            raise AdapterError(f"fill must be one of {', '.join(FILL_RULES)}, got {fill!r}")
        # the served vocabulary is the tokenizer's, verbatim
        vocab = tuple(model.vocab)
        if not vocab:
            raise AdapterError("model has an empty tokenizer vocabulary")
        if any(not isinstance(tok, str) for tok in vocab):
            raise AdapterError("model tokenizer vocabulary must be all strings")
        super().__init__(vocab)
        self.model = model
        self.segmenter = segmenter
        self.fill = fill
        self.image_root = image_root
        self.canvas = tuple(canvas)
        # one in-flight forward at a time: sessions queue onto the device
        self.device_lock = threading.Lock()

    @property
    def fill_color(self) -> tuple[float, float, float]:
        if self.fill == "black":
            return (0.0, 0.0, 0.0)
        return tuple(float(c) for c in self.model.dataset_mean)

    def resolve_image(self, ref) -> np.ndarray:
        if ref is None:
            height, width = self.canvas
            return blank_canvas(height, width, self.fill_color)
        if not isinstance(ref, str):
            raise ProtocolError(
                "adapter sessions resolve segmentation_ref as an image path; "
                "inline segmentations are not supported"
            )
        path = Path(ref)
        if not path.is_absolute():
            path = Path(self.image_root) / path
        return load_image(path)

    def _make_session(self, request: SessionRequest) -> AdapterSession:
        return AdapterSession(self, request)


def build_backend(config: AdapterConfig) -> AdapterBackend:
    """Load model and segmenter per config; raises ModelLoadError at startup."""
    model = load_model(config.model, config.device)
    segmenter = load_segmenter(config.segmenter, config.device)
    return AdapterBackend(
        model,
        segmenter,
        fill=config.fill,
        image_root=config.image_root,
        canvas=config.canvas,
    )


def serve(config: AdapterConfig, rstream=None, wstream=None) -> int:
    """Serve the configured adapter until the peer disconnects (stdio)
    or the process is interrupted (tcp)."""
    backend = build_backend(config)
    mode, address = parse_listen(config.listen)
    if mode == "stdio":
        serve_stdio(backend, rstream or sys.stdin.buffer, wstream or sys.stdout.buffer)
        return 0
    host, port = address
    server = serve_tcp(backend, host, port)
    bound_host, bound_port = server.server_address[:2]
    print(f"listening on {bound_host}:{bound_port}", file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0
