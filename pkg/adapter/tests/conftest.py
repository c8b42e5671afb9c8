"""Shared fixtures for the adapter test suite.

The sys.path fallback lets the suite run straight from a checkout; the
PYTHONPATH prepend does the same for subprocess spawn tests.
"""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

_HERE = Path(__file__).resolve().parent
_SRC = _HERE.parents[0] / "src"
for entry in (str(_SRC), str(_HERE)):
    if entry not in sys.path:
        sys.path.insert(0, entry)
_existing = os.environ.get("PYTHONPATH")
if str(_SRC) not in (_existing or "").split(os.pathsep):
    os.environ["PYTHONPATH"] = (
        str(_SRC) if not _existing else str(_SRC) + os.pathsep + _existing
    )

from helpers_adapter import make_image, paint  # noqa: E402


@pytest.fixture
def red_square_image():
    """8x8 mean-gray canvas with a 3x3 red square (9/64 coverage)."""
    return paint(make_image(), (1, 4), (1, 4), (1.0, 0.0, 0.0))


@pytest.fixture
def three_object_image():
    """16x16 canvas: 6x6 red, 4x4 green, 2x2 blue - distinct areas."""
    img = make_image(16, 16)
    paint(img, (0, 6), (0, 6), (1.0, 0.0, 0.0))
    paint(img, (8, 12), (8, 12), (0.0, 1.0, 0.0))
    paint(img, (14, 16), (0, 2), (0.0, 0.0, 1.0))
    return img


@pytest.fixture
def image_file(tmp_path, red_square_image):
    path = tmp_path / "scene.npy"
    np.save(path, red_square_image)
    return path
