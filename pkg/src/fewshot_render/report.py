"""Delimited outputs and matplotlib figures for evaluation, studies and training logs."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# Fixed metadata keeps PNG bytes identical between runs.
PNG_META = {"Software": None}


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_csv(path, rows: Sequence[dict]) -> None:
    cols = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)


def plot_metrics(rows: Sequence[dict], path) -> None:
    """Bar chart of PSNR and SSIM per variant."""
    names = [r["variant"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for ax, key in zip(axes, ("psnr", "ssim")):
        ax.bar(range(len(rows)), [r[key] for r in rows], color="#4c72b0")
        ax.set_xticks(range(len(rows)), names, rotation=20, ha="right")
        ax.set_title(key.upper())
    fig.tight_layout()
    _save(fig, path)


def plot_study(rows: Sequence[dict], path, key: str = "coverage_mean") -> None:
    """Selection quality against k, one line per method (error bars = std over trials)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in sorted({r["method"] for r in rows}):
        sub = sorted((r for r in rows if r["method"] == method), key=lambda r: r["k"])
        std_key = key.replace("_mean", "_std")
        ax.errorbar([r["k"] for r in sub], [r[key] for r in sub],
                    yerr=[r.get(std_key, 0.0) for r in sub], marker="o", capsize=3, label=method)
    ax.set_xlabel("number of key-frames k")
    ax.set_ylabel(key.replace("_", " "))
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_losses(records: Sequence[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["step"] for r in records]
    for key in ("total", "L_rgb", "L_vgg", "L_adv_D", "L_adv_G"):
        ax.plot(steps, [r[key] for r in records], label=key, lw=1)
    ax.set_xlabel("step")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
