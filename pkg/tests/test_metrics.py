import json
import math

import numpy as np
import pytest

from conftest import smooth_image
from lapsrn.data import bicubic_resize, save_image
from lapsrn.errors import InvalidArgumentError
from lapsrn.metrics import EvalRecord, EvalResult, evaluate_dataset, gaussian_window, psnr, ssim
from lapsrn.model import LapSRNConfig, build_model, super_resolve


def ssim_by_windows(a, b):
    """Per-window loop over every fully-inside 11x11 position with an explicit 2-D Gaussian."""
    x = np.arange(11) - 5.0
    g = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2 * 1.5 ** 2))
    g /= g.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(a.shape[0] - 10):
        for j in range(a.shape[1] - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = np.sum(g * pa), np.sum(g * pb)
            va = np.sum(g * (pa - ma) ** 2)
            vb = np.sum(g * (pb - mb) ** 2)
            cov = np.sum(g * (pa - ma) * (pb - mb))
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestPSNR:
    def test_uniform_one_level(self):
        a = np.full((8, 8), 0.4)
        assert psnr(a, a + 1 / 255) == pytest.approx(20 * math.log10(255), abs=1e-9)
        assert psnr(a, a + 1 / 255) == pytest.approx(48.1308, abs=1e-3)

    def test_identical_is_inf(self, rng):
        a = rng.uniform(size=(5, 5))
        assert psnr(a, a) == math.inf

    def test_shave_ignores_border(self, rng):
        a = rng.uniform(size=(10, 10))
        b = a.copy()
        b[0, :] = 0.0
        assert psnr(a, b, shave_px=1) == math.inf
        assert psnr(a, b) < math.inf

    def test_residual_doubling(self, rng):
        a = rng.uniform(0.3, 0.7, size=(16, 16))
        b = a + rng.normal(0, 0.01, a.shape)
        assert psnr(a, a + 2 * (b - a)) - psnr(a, b) == pytest.approx(-20 * math.log10(2), abs=1e-10)

    def test_errors(self):
        with pytest.raises(InvalidArgumentError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))
        with pytest.raises(InvalidArgumentError):
            psnr(np.zeros((4, 4)), np.zeros((4, 4)), shave_px=2)
        with pytest.raises(InvalidArgumentError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)))


class TestSSIM:
    def test_matches_window_loop(self, rng):
        a = smooth_image(17, 15, seed=1)
        b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(ssim_by_windows(a, b), abs=1e-12)

    def test_matches_scikit_image(self, rng):
        metrics = pytest.importorskip("skimage.metrics")
        a = smooth_image(40, 33, seed=3)
        b = np.clip(a + rng.normal(0, 0.08, a.shape), 0, 1)
        ref = metrics.structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                            data_range=1.0)
        assert ssim(a, b) == pytest.approx(ref, abs=1e-10)

    def test_identity_symmetry_anticorrelation(self, rng):
        a = smooth_image(24, 24)
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        assert ssim(a, a) == 1.0
        assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12
        assert ssim(a, 1 - a) < 0

    @pytest.mark.parametrize("c", [0.01, 0.05, 0.1])
    def test_constant_shift_invariance(self, rng, c):
        a = smooth_image(24, 24) * 0.8
        # a checkerboard leaves every local mean in place, so only the stabilizers can move the score
        checker = 0.05 * (np.indices(a.shape).sum(axis=0) % 2 * 2 - 1)
        assert ssim(a + c, a + checker + c) == pytest.approx(ssim(a, a + checker), abs=1e-6)
        # with noise the local means differ and the luminance term shifts slightly
        b = a + rng.normal(0, 0.05, a.shape)
        assert ssim(a + c, b + c) == pytest.approx(ssim(a, b), abs=1e-3)

    def test_window(self):
        g = gaussian_window()
        assert g.size == 11 and g.sum() == pytest.approx(1.0) and g.argmax() == 5

    def test_too_small(self):
        with pytest.raises(InvalidArgumentError):
            ssim(np.zeros((10, 20)), np.zeros((10, 20)))


class TestEvalResult:
    def test_csv_and_json(self):
        res = EvalResult([EvalRecord("a", 30.0, 0.9, 1.0), EvalRecord("b", math.inf, 1.0, 3.0)], scale=2, shave=2)
        lines = res.to_csv().splitlines()
        assert lines[0] == "image,psnr_db,ssim,ms"
        assert lines[2] == "b,inf,1.000000,3.000000"
        assert lines[3] == "MEAN,inf,0.950000,2.000000"
        rows = json.loads(res.to_json())
        assert rows[-1] == {"image": "MEAN", "psnr_db": "inf", "ssim": 0.95, "ms": 2.0}
        assert res.complete


class TestEvaluateDataset:
    @pytest.fixture
    def hr_files(self, tmp_path, camera160, astronaut96):
        save_image(camera160[:75, :81], tmp_path / "cam.png")
        save_image(astronaut96, tmp_path / "astro.bmp")
        return [tmp_path / "cam.png", tmp_path / "astro.bmp"]

    def test_bicubic_protocol(self, hr_files, camera160):
        res = evaluate_dataset("bicubic", hr_files, 4)
        assert [r.image for r in res.records] == ["astro", "cam"]
        cam = camera160[:72, :80]
        expected = psnr(cam, bicubic_resize(bicubic_resize(cam, 18, 20), 72, 80), shave_px=4)
        assert res.records[1].psnr == pytest.approx(expected, abs=1e-12)
        assert res.shave == 4 and res.mean_psnr == pytest.approx((res.records[0].psnr + expected) / 2)

    def test_shave_knob(self, hr_files):
        assert evaluate_dataset("bicubic", hr_files, 2, shave_px=0).mean_psnr != \
            evaluate_dataset("bicubic", hr_files, 2).mean_psnr

    def test_identity_oracle(self, hr_files):
        from lapsrn.data import crop_to_multiple, extract_y, load_image

        truth = {p.stem: extract_y(crop_to_multiple(load_image(p), 2)) for p in hr_files}
        calls = iter(sorted(truth))
        res = evaluate_dataset(lambda lr, s: truth[next(calls)], hr_files, 2)
        assert all(r.psnr == math.inf and r.ssim == 1.0 for r in res.records)

    def test_missing_files_skipped(self, hr_files, tmp_path):
        res = evaluate_dataset("bicubic", hr_files + [tmp_path / "gone.png"], 2)
        assert len(res.records) == 2 and not res.complete

    def test_model_uses_shared_inference_path(self, hr_files):
        model = build_model(LapSRNConfig(scale=4, depth=1, channels=4), seed=2)
        seen = []

        def spy(lr, s):
            out = super_resolve(model, lr, s)[-1]
            seen.append(out)
            return out

        a = evaluate_dataset(model, hr_files[:1], 2)
        b = evaluate_dataset(spy, hr_files[:1], 2)
        assert a.records[0].psnr == b.records[0].psnr and seen[0].shape == (74, 80)
