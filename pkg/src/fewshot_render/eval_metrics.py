"""Image metrics, held-out evaluation and the key-frame strategy study."""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def photometric(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr_from_mse(m: float) -> float:
    if m < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / m))


def psnr(a, b) -> float:
    return psnr_from_mse(mse(a, b))


def _gauss(x):
    # 11-tap window: truncate at 5 pixels
    return ndimage.gaussian_filter(x, SSIM_SIGMA, mode="reflect", truncate=5.0 / SSIM_SIGMA)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5).

    Statistics are filtered with reflective borders; the mean skips the
    5-pixel border when the image is large enough to have an interior.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    pad = SSIM_WINDOW // 2
    vals = []
    for k in range(a.shape[-1]):
        x, y = a[..., k], b[..., k]
        mx, my = _gauss(x), _gauss(y)
        sxx = _gauss(x * x) - mx * mx
        syy = _gauss(y * y) - my * my
        sxy = _gauss(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        s = num / den
        if min(s.shape) > 2 * pad:
            s = s[pad:-pad, pad:-pad]
        vals.append(s.mean())
    return float(np.mean(vals))


def bbox(mask) -> Optional[tuple]:
    rows, cols = np.nonzero(np.asarray(mask))
    if len(rows) == 0:
        return None
    return slice(rows.min(), rows.max() + 1), slice(cols.min(), cols.max() + 1)


def masked_metrics(pred, gt, mask, pred_mask=None) -> dict:
    """All four metrics on the bounding box of the foreground.

    ``gt`` is compared after zeroing its background; the box is the bounding
    box of ``mask`` united with ``pred_mask`` when one is given.
    """
    pred, gt = _pair(pred, gt)
    m = np.asarray(mask, bool)
    if pred_mask is not None:
        m = m | np.asarray(pred_mask, bool)
    box = bbox(m)
    if box is None:
        raise ValueError("empty foreground")
    gt = gt * np.asarray(mask, bool)[..., None]
    a, b = pred[box], gt[box]
    e = mse(a, b)
    return {"psnr": psnr_from_mse(e), "ssim": ssim(a, b), "photometric": photometric(a, b), "mse": e}


METRICS = ("psnr", "ssim", "photometric", "mse")


def aggregate(rows: Sequence[dict]) -> dict:
    """Mean of each metric; PSNR is averaged per image like the other metrics."""
    return {k: float(np.mean([r[k] for r in rows])) for k in METRICS}


VARIANT_NAMES = {"both": "full", "graphics": "w/o neural", "neural": "w/o classic"}


def holdout_frames(n_frames: int, keyframes: Sequence[int], stride: int = 1) -> list[int]:
    keys = set(int(k) for k in keyframes)
    return [t for t in range(n_frames) if t not in keys][::max(1, stride)]


def evaluate_run(checkpoints, dataset, split: str = "holdout", stride: int = 1,
                 frames: Optional[Sequence[int]] = None, include_proxy: bool = True,
                 include_reference: bool = False) -> list[dict]:
    """One metrics row per variant over the captured views of the chosen frames.

    ``checkpoints`` is a path or a list of paths; each checkpoint's branch
    setting names its row. The ``holdout`` split uses every non-key-frame,
    ``keyframes`` the training frames. Frames are fused from their own RGBD
    views, as at test time.
    """
    import torch

    from .proxy_geometry import fuse_frame, render_textured
    from .trainer import load_checkpoint, render_full

    paths = [checkpoints] if isinstance(checkpoints, (str, bytes)) or hasattr(checkpoints, "__fspath__") \
        else list(checkpoints)
    loaded = [load_checkpoint(p) for p in paths]
    keys = loaded[0][3]["extra"].get("keyframes", []) if loaded else []
    for _, _, _, payload in loaded[1:]:
        if payload["extra"].get("keyframes", []) != keys:
            raise ValueError("checkpoints were trained on different key-frames")
    if frames is None:
        if split == "holdout":
            frames = holdout_frames(dataset.n_frames, keys, stride)
        elif split == "keyframes":
            frames = list(keys)
        else:
            raise ValueError(f"unknown split {split!r}")

    per_variant: dict[str, list] = {}
    cams = dataset.cameras
    for t in frames:
        fr = dataset.frames(t)
        cloud = fuse_frame(fr, cams)
        for nets, _, cfg, _ in loaded:
            name = VARIANT_NAMES[cfg.branches]
            with torch.no_grad():
                out = render_full(nets, cloud, cams, cfg.branches)[0]
            imgs = out.permute(0, 2, 3, 1).numpy()
            for v, f in enumerate(fr):
                per_variant.setdefault(name, []).append(masked_metrics(imgs[v], f.color, f.mask))
        for v, f in enumerate(fr):
            if include_proxy:
                tex = render_textured(cloud, cams[v])[0]
                per_variant.setdefault("proxy only", []).append(masked_metrics(tex, f.color, f.mask))
            if include_reference:
                ref = f.color * f.mask[..., None]
                per_variant.setdefault("reference", []).append(masked_metrics(ref, f.color, f.mask))
    rows = []
    for name, vals in per_variant.items():
        rows.append({"variant": name, "split": split, "frames": len(frames), "images": len(vals),
                     **aggregate(vals)})
    return rows


def keyframe_study(poses, ks: Sequence[int], methods=("pose", "random"), trials: int = 20,
                   seed: int = 0, mode: str = "fast", train_fn=None) -> list[dict]:
    """Key-frame quality against k for each selection method.

    Fast mode scores a selection by its coverage radius. Full mode calls
    ``train_fn(indices) -> mse`` for each selection (training per point).
    Random selection is averaged over ``trials`` seeds.
    """
    from .keyframes import coverage_radius, select_keyframes, select_random

    if mode not in ("fast", "full"):
        raise ValueError("mode must be fast or full")
    if mode == "full" and train_fn is None:
        raise ValueError("full mode needs a training function")
    n = len(poses)
    rows = []
    for k in ks:
        for method in methods:
            if method == "pose":
                sets = [select_keyframes(poses, k, seed)]
            elif method == "random":
                sets = [select_random(n, k, seed + i) for i in range(trials)]
            else:
                raise ValueError(f"unknown method {method!r}")
            cov = [coverage_radius(s, poses) for s in sets]
            row = {"k": int(k), "method": method, "trials": len(sets),
                   "coverage_mean": float(np.mean(cov)), "coverage_std": float(np.std(cov))}
            if mode == "full":
                errs = [float(train_fn(s.indices)) for s in sets]
                row["mse_mean"] = float(np.mean(errs))
                row["mse_std"] = float(np.std(errs))
            rows.append(row)
    return rows
