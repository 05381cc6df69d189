import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image as PILImage

from uflmatch.formats import FormatError
from uflmatch.preprocess import (
    WhiteningTransform,
    apply_whitening,
    extract_random_patches,
    fit_whitening,
    load_image,
    normalize_patches,
)

REG = 10.0 / 255.0**2


def write_pnm(path, magic, width, height, raster):
    path.write_bytes(b"%s\n%d %d\n255\n" % (magic, width, height) + bytes(raster))
    return path


class TestLoadImage:
    def test_white_pgm(self, tmp_path):
        img = load_image(write_pnm(tmp_path / "a.pgm", b"P5", 2, 2, [255] * 4))
        np.testing.assert_array_equal(img, np.ones((2, 2)))

    def test_black_pixel(self, tmp_path):
        img = load_image(write_pnm(tmp_path / "a.pgm", b"P5", 1, 1, [0]))
        assert img.shape == (1, 1) and img[0, 0] == 0.0

    def test_rgb_luminance(self, tmp_path):
        raster = [255, 0, 0, 0, 255, 0, 0, 0, 255]
        img = load_image(write_pnm(tmp_path / "a.ppm", b"P6", 3, 1, raster))
        np.testing.assert_allclose(img[0], [0.299, 0.587, 0.114], atol=1e-12)

    def test_header_comment(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 51]))
        np.testing.assert_allclose(load_image(path)[0], [0.0, 0.2])

    def test_png_gray_and_rgb(self, tmp_path):
        gray = np.array([[0, 128], [255, 64]], dtype=np.uint8)
        PILImage.fromarray(gray).save(tmp_path / "g.png")
        np.testing.assert_allclose(load_image(tmp_path / "g.png"), gray / 255.0)
        rgb = np.zeros((1, 2, 3), dtype=np.uint8)
        rgb[0, 0] = [255, 0, 0]
        rgb[0, 1] = [0, 0, 255]
        PILImage.fromarray(rgb).save(tmp_path / "c.png")
        np.testing.assert_allclose(load_image(tmp_path / "c.png")[0], [0.299, 0.114])

    def test_errors(self, tmp_path):
        with pytest.raises(FormatError):
            load_image(tmp_path / "missing.pgm")
        (tmp_path / "x.txt").write_text("hello")
        with pytest.raises(FormatError, match="unsupported"):
            load_image(tmp_path / "x.txt")
        with pytest.raises(FormatError, match="truncated"):
            load_image(write_pnm(tmp_path / "t.pgm", b"P5", 4, 4, [1, 2, 3]))
        with pytest.raises(FormatError, match="zero-dimension"):
            load_image(write_pnm(tmp_path / "z.pgm", b"P5", 0, 3, []))
        (tmp_path / "m.pgm").write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(FormatError, match="maxval"):
            load_image(tmp_path / "m.pgm")


class TestExtractPatches:
    def test_single_position(self, rng):
        img = rng.random((11, 11))
        batch = extract_random_patches([img], 1, 11, seed=0)
        np.testing.assert_array_equal(batch[0], img.ravel())

    def test_two_positions(self, rng):
        img = rng.random((11, 12))
        batch = extract_random_patches([img], 50, 11, seed=3)
        options = [img[:, :11].ravel(), img[:, 1:].ravel()]
        for row in batch:
            assert any(np.array_equal(row, o) for o in options)
        # both positions reachable
        assert len({row.tobytes() for row in batch}) == 2

    def test_deterministic(self, rng):
        imgs = [rng.random((64, 64)) for _ in range(3)]
        a = extract_random_patches(imgs, 1000, 11, seed=7)
        b = extract_random_patches(imgs, 1000, 11, seed=7)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, extract_random_patches(imgs, 1000, 11, seed=8))

    def test_image_choice_proportional_to_positions(self):
        small = np.zeros((12, 12))  # 4 positions
        large = np.ones((21, 21))  # 121 positions
        batch = extract_random_patches([small, large], 20_000, 11, seed=0)
        frac_small = np.mean(batch[:, 0] == 0.0)
        assert abs(frac_small - 4 / 125) < 0.006

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            extract_random_patches([rng.random((10, 20))], 5, 11, seed=0)
        with pytest.raises(ValueError):
            extract_random_patches([rng.random((20, 20))], 0, 11, seed=0)

    @settings(max_examples=40, deadline=None)
    @given(
        h=st.integers(5, 20),
        w=st.integers(5, 20),
        pw=st.sampled_from([1, 3, 5]),
        seed=st.integers(0, 2**31),
    )
    def test_patches_are_in_bounds_windows(self, h, w, pw, seed):
        img = np.random.default_rng(seed).random((h, w))
        batch = extract_random_patches([img], 30, pw, seed)
        windows = sliding_window_view(img, (pw, pw)).reshape(-1, pw * pw)
        for row in batch:
            assert np.any(np.all(windows == row, axis=1))


class TestNormalize:
    def test_constant_patch(self):
        np.testing.assert_array_equal(normalize_patches(np.full((1, 9), 0.5)), np.zeros((1, 9)))

    def test_two_values(self):
        out = normalize_patches(np.array([[0.0, 1.0]]))
        expected = np.array([-0.5, 0.5]) / np.sqrt(0.25 + REG)
        np.testing.assert_allclose(out[0], expected, rtol=1e-14)
        assert abs(out.mean()) < 1e-15

    def test_matches_direct_recomputation(self, rng):
        batch = rng.random((200, 25))
        out = normalize_patches(batch)
        for row_in, row_out in zip(batch, out):
            centred = row_in - row_in.mean()
            # variance on the 0-255 scale, +10
            expected = centred * 255.0 / np.sqrt(np.var(row_in * 255.0) + 10.0)
            np.testing.assert_allclose(row_out, expected, rtol=1e-12, atol=1e-14)
        assert np.abs(out.mean(axis=1)).max() <= 1e-9

    def test_second_application_rescales_as_predicted(self, rng):
        once = normalize_patches(rng.random((50, 16)))
        twice = normalize_patches(once)
        var1 = once.var(axis=1)
        np.testing.assert_allclose(twice, once / np.sqrt(var1 + REG)[:, None], rtol=1e-12)

    def test_input_untouched(self, rng):
        batch = rng.random((5, 4))
        keep = batch.copy()
        normalize_patches(batch)
        np.testing.assert_array_equal(batch, keep)


def _cov(x):
    c = x - x.mean(axis=0)
    return c.T @ c / x.shape[0]


class TestWhitening:
    def test_identity_covariance(self):
        n = 4
        # rows +-sqrt(n) e_i have zero mean and identity covariance
        batch = np.sqrt(n) * np.vstack([np.eye(n), -np.eye(n)])
        np.testing.assert_allclose(_cov(batch), np.eye(n), atol=1e-15)
        t = fit_whitening(batch, epsilon=0.0)
        np.testing.assert_allclose(t.matrix, np.eye(n), atol=1e-12)

    def test_diagonal_covariance(self):
        a, b = 2 * np.sqrt(2), np.sqrt(2)
        batch = np.array([[a, 0], [-a, 0], [0, b], [0, -b]])
        np.testing.assert_allclose(_cov(batch), np.diag([4.0, 1.0]), atol=1e-14)
        t = fit_whitening(batch, epsilon=0.0)
        np.testing.assert_allclose(t.matrix, np.diag([0.5, 1.0]), atol=1e-12)

    def test_regularized_eigenvalues(self, rng):
        batch = rng.standard_normal((2000, 6)) @ rng.standard_normal((6, 6))
        lam = np.linalg.eigvalsh(_cov(batch))
        t = fit_whitening(batch, epsilon=0.1)
        np.testing.assert_allclose(t.matrix, t.matrix.T, atol=0)
        got = np.linalg.eigvalsh(_cov(apply_whitening(t, batch)))
        np.testing.assert_allclose(np.sort(got), np.sort(lam / (lam + 0.1)), atol=1e-6)

    def test_unregularized_fit_decorrelates(self, rng):
        batch = rng.standard_normal((3000, 5)) @ rng.standard_normal((5, 5))
        t = fit_whitening(batch, epsilon=0.0)
        cov = _cov(apply_whitening(t, batch))
        off = cov - np.diag(np.diag(cov))
        assert np.abs(off).max() <= 1e-6
        np.testing.assert_allclose(np.diag(cov), 1.0, atol=1e-6)

    def test_apply_identity_and_mean(self, rng):
        batch = rng.random((10, 3))
        np.testing.assert_array_equal(
            apply_whitening(WhiteningTransform.identity(3), batch), batch
        )
        t = fit_whitening(rng.random((100, 3)), epsilon=0.1)
        np.testing.assert_allclose(apply_whitening(t, t.mean), 0.0, atol=0)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            apply_whitening(WhiteningTransform.identity(3), rng.random((2, 4)))

    def test_non_finite(self):
        with pytest.raises(ValueError):
            fit_whitening(np.array([[np.inf, 0.0], [1.0, 2.0], [0.0, 1.0]]))
