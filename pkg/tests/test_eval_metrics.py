import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import cyclic_clusters
from fewshot_render.eval_metrics import (
    PSNR_CAP, aggregate, holdout_frames, keyframe_study, masked_metrics, mse, photometric,
    psnr, psnr_from_mse, ssim,
)

images = arrays(np.float64, (12, 14, 3), elements=st.floats(0, 1))


def test_identical_images():
    a = np.random.default_rng(0).uniform(size=(20, 20, 3))
    assert mse(a, a) == 0 and photometric(a, a) == 0
    assert psnr(a, a) == PSNR_CAP
    assert ssim(a, a) == 1.0


def test_half_gray():
    a, b = np.zeros((8, 8, 3)), np.full((8, 8, 3), 0.5)
    assert mse(a, b) == 0.25
    assert psnr(a, b) == pytest.approx(6.0206, abs=1e-4)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        mse(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


@settings(max_examples=50, deadline=None)
@given(images, images)
def test_symmetry_and_cross_check(a, b):
    assert mse(a, b) == mse(b, a) and photometric(a, b) == photometric(b, a)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9
    m = float(np.mean((a - b) ** 2))
    direct = PSNR_CAP if m < 1e-10 else min(PSNR_CAP, 20 * math.log10(1.0) - 10 * math.log10(m))
    assert abs(psnr(a, b) - direct) < 1e-9
    assert abs(psnr_from_mse(mse(a, b)) - psnr(a, b)) < 1e-9


def ssim_oracle(a, b):
    """Explicit 11x11 window sums over interior pixels only."""
    g = np.exp(-(np.arange(11) - 5) ** 2 / (2 * 1.5 ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    out = []
    for k in range(a.shape[2]):
        vals = []
        for r in range(5, a.shape[0] - 5):
            for c in range(5, a.shape[1] - 5):
                x = a[r - 5:r + 6, c - 5:c + 6, k]
                y = b[r - 5:r + 6, c - 5:c + 6, k]
                mx, my = (w * x).sum(), (w * y).sum()
                sxx = (w * x * x).sum() - mx * mx
                syy = (w * y * y).sum() - my * my
                sxy = (w * x * y).sum() - mx * my
                vals.append((2 * mx * my + c1) * (2 * sxy + c2) /
                            ((mx * mx + my * my + c1) * (sxx + syy + c2)))
        out.append(np.mean(vals))
    return float(np.mean(out))


def test_ssim_matches_window_oracle():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(24, 20, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-9)


def test_masked_metrics_use_bbox():
    gt = np.zeros((16, 16, 3))
    gt[4:8, 5:10] = 0.8
    mask = gt[..., 0] > 0
    pred = gt.copy()
    pred[0, 0] = 1.0  # outside the box
    assert masked_metrics(pred, gt, mask)["psnr"] == PSNR_CAP
    assert masked_metrics(pred, gt, mask, pred_mask=pred[..., 0] > 0)["psnr"] < PSNR_CAP
    with pytest.raises(ValueError):
        masked_metrics(pred, gt, np.zeros((16, 16), bool))


def test_aggregate_and_holdout():
    rows = [{"psnr": 10.0, "ssim": 0.5, "photometric": 0.1, "mse": 0.1},
            {"psnr": 20.0, "ssim": 1.0, "photometric": 0.3, "mse": 0.01}]
    assert aggregate(rows)["psnr"] == 15.0
    assert holdout_frames(6, [1, 4]) == [0, 2, 3, 5]
    assert holdout_frames(10, [0], stride=3) == [1, 4, 7]


def test_keyframe_study_fast():
    poses = cyclic_clusters(2)
    rows = keyframe_study(poses, [4, 8, 16], trials=20)
    assert len(rows) == 6
    by = {(r["k"], r["method"]): r for r in rows}
    for k in (4, 8, 16):
        assert by[k, "pose"]["coverage_mean"] <= by[k, "random"]["coverage_mean"]
    cov = [by[k, "pose"]["coverage_mean"] for k in (4, 8, 16)]
    assert cov == sorted(cov, reverse=True)
    full = keyframe_study(poses, [len(poses)], methods=("pose",))
    assert full[0]["coverage_mean"] == 0.0


def test_keyframe_study_full_mode_calls_trainer():
    poses = np.random.default_rng(3).normal(size=(10, 25, 3))
    calls = []
    rows = keyframe_study(poses, [2], methods=("pose", "random"), trials=3, mode="full",
                          train_fn=lambda idx: calls.append(idx) or len(idx))
    assert len(calls) == 4 and rows[1]["mse_mean"] == 2.0
    with pytest.raises(ValueError):
        keyframe_study(poses, [2], mode="full")
