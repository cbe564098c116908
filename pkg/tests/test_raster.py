import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays
from PIL import Image

from hdix.errors import FixtureError, ImageLoadError
from hdix.raster import (BinaryImage, GrayImage, binarize, load_image, make_fixture,
                         otsu_threshold, save_pgm)


def _between_class_variance(data, t):
    """Direct two-class split: black = values < t."""
    lo = data[data < t].astype(float)
    hi = data[data >= t].astype(float)
    if not len(lo) or not len(hi):
        return -1.0
    w0, w1 = len(lo) / data.size, len(hi) / data.size
    return w0 * w1 * (lo.mean() - hi.mean()) ** 2


class TestLoad:
    def test_pgm_all_black(self, tmp_path):
        p = tmp_path / "black.pgm"
        p.write_bytes(b"P5\n3 3\n255\n" + bytes(9))
        img = load_image(p)
        assert (img.width, img.height) == (3, 3)
        assert not img.data.any()

    def test_rgb_png_luma(self, tmp_path):
        rgb = np.zeros((2, 3, 3), dtype=np.uint8)
        rgb[0, 0] = (255, 255, 255)
        rgb[0, 1] = (255, 0, 0)
        rgb[0, 2] = (0, 255, 0)
        rgb[1, 0] = (0, 0, 255)
        p = tmp_path / "c.png"
        Image.fromarray(rgb, "RGB").save(p)
        img = load_image(p)
        assert img.data[0, 0] == 255
        assert img.data[0, 1] == round(0.299 * 255)  # 76
        assert img.data[0, 2] == round(0.587 * 255)
        assert img.data[1, 0] == round(0.114 * 255)

    def test_gray_png(self, tmp_path):
        arr = np.arange(16, dtype=np.uint8).reshape(4, 4) * 10
        p = tmp_path / "g.png"
        Image.fromarray(arr, "L").save(p)
        assert np.array_equal(load_image(p).data, arr)

    def test_pgm_roundtrip(self, tmp_path):
        img = make_fixture("random_text_like", 64, seed=3)
        save_pgm(img, tmp_path / "t.pgm")
        assert load_image(tmp_path / "t.pgm") == img

    def test_missing_file(self, tmp_path):
        with pytest.raises(ImageLoadError):
            load_image(tmp_path / "nope.pgm")

    def test_unsupported_format(self, tmp_path):
        p = tmp_path / "x.bmp"
        Image.fromarray(np.zeros((4, 4), np.uint8)).save(p)
        with pytest.raises(ImageLoadError, match="unsupported"):
            load_image(p)

    def test_ascii_pgm_rejected(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
        with pytest.raises(ImageLoadError):
            load_image(p)

    def test_garbage(self, tmp_path):
        p = tmp_path / "g.png"
        p.write_bytes(b"not an image")
        with pytest.raises(ImageLoadError):
            load_image(p)

    def test_images_are_immutable(self):
        img = make_fixture("point", 16)
        with pytest.raises(ValueError):
            img.data[0, 0] = 1


class TestBinarize:
    def test_fixed_extremes(self):
        black = GrayImage(np.zeros((8, 8), np.uint8))
        white = GrayImage(np.full((8, 8), 255, np.uint8))
        assert binarize(black, 128).black_count == 64
        assert binarize(white, "fixed:128").black_count == 0

    def test_otsu_bimodal_against_sweep(self):
        arr = np.full((20, 20), 40, np.uint8)
        arr[:, 10:] = 200
        img = GrayImage(arr)
        t = otsu_threshold(img)
        scores = [_between_class_variance(arr, s) for s in range(257)]
        assert scores[t] == pytest.approx(max(scores))
        assert 40 < t < 200
        assert binarize(img).black_count == 200

    def test_otsu_matches_sweep_on_random_image(self):
        rng = np.random.default_rng(7)
        arr = np.concatenate([rng.normal(60, 15, 500), rng.normal(180, 20, 700)])
        arr = np.clip(arr, 0, 255).astype(np.uint8).reshape(30, 40)
        t = otsu_threshold(GrayImage(arr))
        scores = [_between_class_variance(arr, s) for s in range(257)]
        assert scores[t] == pytest.approx(max(scores), rel=1e-9)

    def test_otsu_constant_is_all_white(self):
        img = GrayImage(np.full((6, 6), 90, np.uint8))
        assert otsu_threshold(img) == 90
        assert binarize(img).black_count == 0

    def test_bad_method(self):
        with pytest.raises(ValueError):
            binarize(make_fixture("point", 8), "sauvola")
        with pytest.raises(ValueError):
            binarize(make_fixture("point", 8), 300)

    def test_rebinarize_is_identity(self):
        img = make_fixture("random_text_like", 64, seed=2)
        first = binarize(img, 128)
        as_gray = GrayImage(np.where(first.data, 0, 255).astype(np.uint8))
        assert binarize(as_gray, 128) == first

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.uint8, (12, 9)))
    def test_black_count_monotone_in_threshold(self, arr):
        img = GrayImage(arr)
        counts = [binarize(img, t).black_count for t in (0, 64, 128, 192, 256)]
        assert counts == sorted(counts)
        assert counts[0] == 0 and counts[-1] == arr.size


class TestFixtures:
    def test_filled_square(self):
        assert binarize(make_fixture("filled_square", 81), 128).black_count == 81 * 81

    def test_carpet_depth2(self):
        assert binarize(make_fixture("sierpinski_carpet", 9, depth=2), 128).black_count == 64

    @pytest.mark.parametrize("depth,side", [(1, 9), (3, 27), (3, 54)])
    def test_carpet_counts(self, depth, side):
        scale = side // 3**depth
        assert binarize(make_fixture("sierpinski_carpet", side, depth=depth), 128).black_count \
            == 8**depth * scale * scale

    def test_triangle_counts(self):
        assert binarize(make_fixture("sierpinski_triangle", 32, depth=5), 128).black_count == 3**5

    def test_hline(self):
        b = binarize(make_fixture("hline", 64), 128)
        assert b.black_count == 64
        assert b.data[32].all()

    def test_point(self):
        b = binarize(make_fixture("point", 64), 128)
        assert b.black_count == 1 and b.data[32, 32]

    def test_blob_darkest_at_center(self):
        img = make_fixture("gaussian_blob", 64, sigma=5)
        assert np.unravel_index(np.argmin(img.data), img.data.shape) == (32, 32)

    @pytest.mark.parametrize("kind,kw", [("random_text_like", {"seed": 4}),
                                         ("sierpinski_carpet", {"depth": 3}),
                                         ("gaussian_blob", {"sigma": 3.0})])
    def test_reproducible(self, kind, kw):
        assert make_fixture(kind, 81, **kw) == make_fixture(kind, 81, **kw)

    def test_text_seeds_differ(self):
        assert make_fixture("random_text_like", 128, seed=1) != make_fixture("random_text_like", 128, seed=2)

    @pytest.mark.parametrize("kind,side,kw", [("sierpinski_carpet", 10, {"depth": 2}),
                                              ("point", 4, {}),
                                              ("gaussian_blob", 16, {}),
                                              ("nonsense", 16, {})])
    def test_bad_arguments(self, kind, side, kw):
        with pytest.raises(FixtureError):
            make_fixture(kind, side, **kw)


def test_binary_image_rejects_non_2d():
    with pytest.raises(ValueError):
        BinaryImage(np.zeros(5, bool))


def test_gray_image_minimum_size():
    with pytest.raises(ValueError):
        GrayImage(np.zeros((1, 5), np.uint8))
