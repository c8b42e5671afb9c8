"""Image loading, canvases, masking fills, and the color palette."""

import numpy as np
import pytest

from quadcd_adapter.config import AdapterError
from quadcd_adapter.images import (
    COLOR_PROTOTYPES,
    COLOR_TOL,
    apply_mask,
    blank_canvas,
    color_coverage,
    color_mask,
    load_image,
)

from helpers_adapter import make_image, paint


class TestLoadImage:
    def test_npy_float(self, tmp_path, red_square_image):
        path = tmp_path / "img.npy"
        np.save(path, red_square_image)
        loaded = load_image(path)
        assert loaded.dtype == np.float64
        np.testing.assert_array_equal(loaded, red_square_image)

    def test_npy_uint8_scaled(self, tmp_path):
        path = tmp_path / "img.npy"
        np.save(path, np.full((4, 4, 3), 255, dtype=np.uint8))
        loaded = load_image(path)
        assert loaded.max() == 1.0 and loaded.min() == 1.0

    def test_missing_file(self, tmp_path):
        with pytest.raises(AdapterError, match="no such file"):
            load_image(tmp_path / "absent.npy")

    def test_wrong_shape(self, tmp_path):
        path = tmp_path / "gray.npy"
        np.save(path, np.zeros((4, 4)))
        with pytest.raises(AdapterError, match=r"expected shape \(H, W, 3\)"):
            load_image(path)

    def test_out_of_range(self, tmp_path):
        path = tmp_path / "hot.npy"
        np.save(path, np.full((2, 2, 3), 2.0))
        with pytest.raises(AdapterError, match=r"outside \[0, 1\]"):
            load_image(path)

    def test_pillow_round_trip(self, tmp_path):
        PIL = pytest.importorskip("PIL.Image")
        arr = np.zeros((4, 4, 3), dtype=np.uint8)
        arr[:2] = (255, 0, 0)
        path = tmp_path / "img.png"
        PIL.fromarray(arr).save(path)
        loaded = load_image(path)
        np.testing.assert_allclose(loaded[0, 0], (1.0, 0.0, 0.0))
        np.testing.assert_allclose(loaded[3, 3], (0.0, 0.0, 0.0))


class TestBlankCanvas:
    def test_shape_and_color(self):
        canvas = blank_canvas(3, 5, (0.5, 0.5, 0.5))
        assert canvas.shape == (3, 5, 3)
        assert np.all(canvas == 0.5)


class TestApplyMask:
    def test_fills_hidden_pixels_only(self, red_square_image):
        visible = np.zeros((8, 8), dtype=bool)
        visible[1:4, 1:4] = True
        out = apply_mask(red_square_image, visible, (0.0, 0.0, 0.0))
        assert np.all(out[1:4, 1:4] == (1.0, 0.0, 0.0))
        assert np.all(out[0, :] == 0.0)
        # input untouched
        assert np.all(red_square_image[0, 0] == 0.5)

    def test_rejects_bad_mask(self, red_square_image):
        with pytest.raises(AdapterError, match="visibility mask"):
            apply_mask(red_square_image, np.zeros((4, 4), dtype=bool), (0, 0, 0))


class TestPalette:
    def test_fill_colors_match_no_prototype(self):
        # both fill rules must be invisible to the palette
        for fill in [(0.5, 0.5, 0.5), (0.0, 0.0, 0.0)]:
            pixel = np.asarray(fill, dtype=np.float64)
            for proto in COLOR_PROTOTYPES.values():
                dist = np.abs(pixel - np.asarray(proto)).max()
                assert dist >= COLOR_TOL

    def test_prototypes_mutually_exclusive(self):
        names = sorted(COLOR_PROTOTYPES)
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                pa = np.asarray(COLOR_PROTOTYPES[a])
                pb = np.asarray(COLOR_PROTOTYPES[b])
                # tol 0.25 per side cannot bridge a full-channel gap
                assert np.abs(pa - pb).max() >= 2 * COLOR_TOL

    def test_coverage_counts_fraction(self, red_square_image):
        assert color_coverage(red_square_image, (1.0, 0.0, 0.0)) == 9 / 64
        assert color_coverage(red_square_image, (0.0, 1.0, 0.0)) == 0.0

    def test_mask_matches_painted_region(self):
        img = paint(make_image(), (2, 5), (0, 4), (0.0, 0.0, 1.0))
        mask = color_mask(img, (0.0, 0.0, 1.0))
        expect = np.zeros((8, 8), dtype=bool)
        expect[2:5, 0:4] = True
        np.testing.assert_array_equal(mask, expect)
