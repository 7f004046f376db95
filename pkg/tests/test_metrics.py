import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from splatmap.errors import ConfigurationError
from splatmap.metrics import EvalReport, FrameEval, depth_rmse, psnr, ssim, ssim_with_grad


def reference_ssim(a, b):
    return structural_similarity(a, b, data_range=1.0, channel_axis=2 if a.ndim == 3 else None,
                                 gaussian_weights=True, sigma=1.5, use_sample_covariance=False)


def test_psnr_identical_sentinel():
    a = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert psnr(a, a.copy()) == 100.0


def test_psnr_analytic():
    a = np.zeros((10, 10))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_direct_formula():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, b = rng.uniform(size=(2, 12, 9, 3))
        assert psnr(a, b) == pytest.approx(-10 * math.log10(np.mean((a - b) ** 2)), abs=1e-9)


def test_psnr_decreases_with_mse():
    a = np.zeros((4, 4))
    vals = [psnr(a, a + e) for e in (0.01, 0.02, 0.1, 0.5)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_psnr_shape_mismatch():
    with pytest.raises(ConfigurationError):
        psnr(np.zeros((3, 3)), np.zeros((3, 4)))


def test_ssim_identical_is_one():
    a = np.random.default_rng(2).uniform(size=(20, 20, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_checkerboard_negative():
    a = (np.indices((16, 16)).sum(axis=0) % 2).astype(float)
    assert ssim(a, 1.0 - a) < 0


def test_ssim_matches_reference_implementation():
    rng = np.random.default_rng(3)
    for shape in ((32, 32, 3), (24, 40), (11, 11, 3)):
        a = rng.uniform(size=shape)
        b = np.clip(a + rng.normal(0, 0.1, shape), 0, 1)
        assert ssim(a, b) == pytest.approx(reference_ssim(a, b), abs=1e-6)


def test_ssim_symmetric_and_channel_permutation_invariant():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(size=(2, 20, 17, 3))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)
    perm = [2, 0, 1]
    assert ssim(a[..., perm], b[..., perm]) == pytest.approx(ssim(a, b), abs=1e-12)


def test_ssim_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    a, b = rng.uniform(size=(2, 14, 15, 3))
    _, g = ssim_with_grad(a, b)
    h = 1e-6
    for _ in range(30):
        idx = tuple(int(rng.integers(s)) for s in b.shape)
        bp, bm = b.copy(), b.copy()
        bp[idx] += h
        bm[idx] -= h
        assert g[idx] == pytest.approx((ssim(a, bp) - ssim(a, bm)) / (2 * h), rel=1e-4, abs=1e-10)


def test_ssim_too_small():
    with pytest.raises(ConfigurationError):
        ssim(np.zeros((10, 30)), np.zeros((10, 30)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ssim_bounded(seed):
    a, b = np.random.default_rng(seed).uniform(size=(2, 12, 12))
    assert -1.0 <= ssim(a, b) <= 1.0


def test_depth_rmse_examples():
    d = np.random.default_rng(6).uniform(1, 5, (6, 6))
    assert depth_rmse(d, d) == 0.0
    assert depth_rmse(d + 0.5, d) == pytest.approx(0.5, abs=1e-12)


def test_depth_rmse_direct_formula():
    rng = np.random.default_rng(7)
    r = rng.uniform(0, 5, (30, 30))
    g = rng.uniform(0, 5, (30, 30)) * (rng.uniform(size=(30, 30)) > 0.6)
    m = g > 0
    assert depth_rmse(r, g) == pytest.approx(math.sqrt(np.mean((r[m] - g[m]) ** 2)), abs=1e-12)


def test_depth_rmse_empty_mask_warns():
    with pytest.warns(RuntimeWarning):
        assert math.isnan(depth_rmse(np.ones((3, 3)), np.zeros((3, 3))))


def test_report_round_trip(tmp_path):
    rep = EvalReport()
    rep.add(FrameEval(0, 30.0, 0.9, 0.1, 10, 1.5))
    rep.add(FrameEval(1, 32.0, 0.95, float("nan"), 20, 3.0))
    rep.to_jsonl(tmp_path / "r.jsonl")
    back = EvalReport.from_jsonl(tmp_path / "r.jsonl")
    assert back.psnr == pytest.approx(31.0) and back.depth_rmse == pytest.approx(0.1)
    assert len(back) == 2 and "mean" in back.summary_table()
