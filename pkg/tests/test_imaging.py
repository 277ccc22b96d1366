import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adanec.imaging import check_image, load_png, psnr, save_png, ssim


def _img(rng, h=16, w=16):
    return rng.random((h, w, 3))


class TestPsnr:
    def test_identity_hits_cap(self, rng):
        x = _img(rng)
        assert psnr(x, x) == 100.0
        assert psnr(x, _img(rng)) < 100.0

    def test_unit_mse_is_zero_db(self):
        assert psnr(np.zeros((8, 8, 3)), np.ones((8, 8, 3))) == pytest.approx(0.0)

    def test_known_mse_closed_form(self):
        # independent scalar computation: mse 0.01 -> 10*log10(1/0.01) = 20
        a = np.zeros((10, 10, 3))
        b = np.full((10, 10, 3), 0.1)
        expected = 10.0 * np.log10(1.0 / 0.01)
        assert expected == pytest.approx(20.0)
        assert psnr(a, b) == pytest.approx(expected, abs=1e-9)

    def test_symmetry(self, rng):
        for _ in range(5):
            a, b = _img(rng), _img(rng)
            assert psnr(a, b) == pytest.approx(psnr(b, a), abs=1e-12)

    def test_monotone_in_noise_scale(self, rng):
        base = _img(rng, 24, 24) * 0.5 + 0.25
        values = [psnr(base, np.clip(base + s, 0, 1))
                  for s in (0.01, 0.02, 0.05, 0.1, 0.2, 0.4)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ValueError, match="shape"):
            psnr(_img(rng, 8, 8), _img(rng, 8, 9))


class TestSsim:
    def test_identity_is_exactly_one(self, rng):
        x = _img(rng)
        assert ssim(x, x) == 1.0

    def test_equal_constants_give_one(self):
        c = np.full((16, 16, 3), 0.5)
        assert ssim(c, c.copy()) == 1.0

    def test_checkerboard_against_reference_implementation(self):
        from skimage.metrics import structural_similarity

        cells = np.indices((16, 16)).sum(axis=0) % 2
        board = np.repeat(cells[:, :, None], 3, axis=2).astype(np.float64)
        ref = structural_similarity(
            board, 1.0 - board, win_size=11, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, data_range=1.0, channel_axis=2)
        assert ssim(board, 1.0 - board) == pytest.approx(ref, abs=1e-10)

    def test_random_pair_against_reference_implementation(self, rng):
        from skimage.metrics import structural_similarity

        a = _img(rng, 24, 20)
        b = np.clip(a + rng.normal(0, 0.08, a.shape), 0, 1)
        ref = structural_similarity(
            a, b, win_size=11, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, data_range=1.0, channel_axis=2)
        assert ssim(a, b) == pytest.approx(ref, abs=1e-10)

    def test_too_small_rejected(self, rng):
        with pytest.raises(ValueError, match="11"):
            ssim(_img(rng, 8, 8), _img(rng, 8, 8))

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ValueError, match="shape"):
            ssim(_img(rng, 16, 16), _img(rng, 16, 12))


class TestPng:
    @pytest.mark.parametrize("value", [0.0, 1.0])
    def test_constant_round_trip_exact(self, tmp_path, value):
        img = np.full((8, 8, 3), value)
        p = tmp_path / "c.png"
        save_png(img, p)
        assert np.array_equal(load_png(p), img)

    def test_quantization_of_point_two(self, tmp_path):
        # round(255 * 0.2) = 51, so the loaded value is exactly 51/255
        img = np.full((8, 8, 3), 0.2)
        p = tmp_path / "q.png"
        save_png(img, p)
        loaded = load_png(p)
        assert np.allclose(loaded, 51.0 / 255.0, atol=0)
        assert abs(loaded[0, 0, 0] - 0.2) <= 1.0 / 510.0

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_round_trip_error_bound(self, tmp_path_factory, seed):
        rng = np.random.default_rng(seed)
        img = rng.random((8, 8, 3))
        p = tmp_path_factory.mktemp("png") / "r.png"
        save_png(img, p)
        assert np.max(np.abs(load_png(p) - img)) <= 1.0 / 510.0 + 1e-12

    def test_non_rgb_rejected(self, tmp_path):
        from PIL import Image as PILImage

        p = tmp_path / "gray.png"
        PILImage.fromarray(np.zeros((8, 8), dtype=np.uint8), mode="L").save(p)
        with pytest.raises(ValueError, match="RGB"):
            load_png(p)

    def test_malformed_file_rejected(self, tmp_path):
        p = tmp_path / "junk.png"
        p.write_bytes(b"this is not a png")
        with pytest.raises(Exception):
            load_png(p)

    def test_out_of_range_save_rejected(self, tmp_path):
        with pytest.raises(ValueError, match=r"\[0,1\]"):
            save_png(np.full((8, 8, 3), 1.5), tmp_path / "bad.png")


class TestCheckImage:
    def test_accepts_valid(self, rng):
        check_image(_img(rng))

    @pytest.mark.parametrize("bad", [
        np.zeros((4, 8, 3)),            # too small
        np.zeros((8, 8, 4)),            # wrong channels
        np.full((8, 8, 3), np.nan),     # non-finite
        np.full((8, 8, 3), -0.1),       # below range
    ])
    def test_rejects_invalid(self, bad):
        with pytest.raises(ValueError):
            check_image(bad)
