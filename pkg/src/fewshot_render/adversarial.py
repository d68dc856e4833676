"""Patch sampling, the multi-scale patch discriminator and the least-squares adversarial losses."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .neural_render import upsample_to

log = logging.getLogger(__name__)

PATCH = 36
MIN_FOREGROUND = 130  # strictly more than 10% of 36 * 36 = 1296 pixels
MLP_WIDTHS = (256, 128, 1)
REDUCED = 9


@dataclass
class PatchBatch:
    patches: torch.Tensor            # (B, 3, 36, 36)
    offsets: np.ndarray              # (B, 2) top-left (u, v) pixel of each patch
    origin: str = "rendered"         # "real" | "rendered"
    complete: bool = True
    foreground: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def __len__(self):
        return self.patches.shape[0]


def foreground_counts(mask: np.ndarray, size: int = PATCH) -> np.ndarray:
    """Foreground pixel count of every size x size window, indexed by top-left (v, u)."""
    m = np.asarray(mask, dtype=np.int64)
    ii = np.pad(m.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    return ii[size:, size:] - ii[:-size, size:] - ii[size:, :-size] + ii[:-size, :-size]


def is_valid_patch(mask_patch: np.ndarray, min_foreground: int = MIN_FOREGROUND) -> bool:
    return int(np.count_nonzero(mask_patch)) >= min_foreground


def sample_patches(image: torch.Tensor, mask, count: int, seed=None, origin: str = "rendered",
                   size: int = PATCH, min_foreground: int = MIN_FOREGROUND,
                   max_attempts: Optional[int] = None) -> PatchBatch:
    """Rejection-sample ``count`` valid patches at uniform offsets.

    ``image`` is (3, H, W); background is zeroed with ``mask`` before cropping,
    so gradients reach the foreground pixels of ``image`` only. When the attempt
    budget runs out the partial batch is returned with ``complete=False``.
    """
    if image.dim() != 3 or image.shape[1] < size or image.shape[2] < size:
        raise ValueError(f"image must be (3, H>={size}, W>={size}), got {tuple(image.shape)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask_np = np.asarray(mask.detach().cpu() if torch.is_tensor(mask) else mask, dtype=bool)
    H, W = mask_np.shape
    counts = foreground_counts(mask_np, size)
    max_attempts = 50 * count if max_attempts is None else max_attempts
    masked = image * torch.as_tensor(mask_np, dtype=image.dtype)[None]

    offs, fg = [], []
    if counts.max(initial=0) >= min_foreground:
        for _ in range(max_attempts):
            if len(offs) == count:
                break
            v = int(rng.integers(0, H - size + 1))
            u = int(rng.integers(0, W - size + 1))
            if counts[v, u] >= min_foreground:
                offs.append((u, v))
                fg.append(int(counts[v, u]))
    complete = len(offs) == count
    if not complete:
        log.warning("insufficient foreground: %d of %d valid patches", len(offs), count)
    if offs:
        patches = torch.stack([masked[:, v:v + size, u:u + size] for u, v in offs])
    else:
        patches = image.new_zeros((0, image.shape[0], size, size))
    return PatchBatch(patches, np.array(offs, dtype=np.int64).reshape(-1, 2), origin,
                      complete, np.array(fg, dtype=np.int64))


class Discriminator(nn.Module):
    """3-level U-Net trunk; every decoder level is reduced to 9x9 and fed to an MLP.

    Level resolutions for a 36x36 patch are 9, 18 and 36; they pass through 0,
    1 and 2 stride-2 convolutions respectively. The MLP widths are 256, 128, 1
    with ReLU between layers and no output activation.
    """

    def __init__(self, base: int = 32, reduced_channels: int = 8, patch: int = PATCH):
        super().__init__()
        act = lambda: nn.LeakyReLU(0.2)
        c1, c2, c3 = base, 2 * base, 4 * base
        self.enc1 = nn.Sequential(nn.Conv2d(3, c1, 3, 1, 1), act())
        self.enc2 = nn.Sequential(nn.Conv2d(c1, c2, 3, 2, 1), act())
        self.enc3 = nn.Sequential(nn.Conv2d(c2, c3, 3, 2, 1), act())
        self.dec2 = nn.Sequential(nn.Conv2d(c3 + c2, c2, 3, 1, 1), act())
        self.dec1 = nn.Sequential(nn.Conv2d(c2 + c1, c1, 3, 1, 1), act())
        r = reduced_channels
        self.reduce3 = nn.Sequential(nn.Conv2d(c3, r, 3, 1, 1), act())
        self.reduce2 = nn.Sequential(nn.Conv2d(c2, r, 3, 2, 1), act())
        self.reduce1 = nn.Sequential(nn.Conv2d(c1, 2 * r, 3, 2, 1), act(),
                                     nn.Conv2d(2 * r, r, 3, 2, 1), act())
        side = patch // 4
        self.mlp = nn.Sequential(nn.Linear(3 * r * side * side, MLP_WIDTHS[0]), nn.ReLU(),
                                 nn.Linear(MLP_WIDTHS[0], MLP_WIDTHS[1]), nn.ReLU(),
                                 nn.Linear(MLP_WIDTHS[1], MLP_WIDTHS[2]))
        self.last_reduced_shapes: list = []

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d2 = self.dec2(torch.cat([upsample_to(e3, e2), e2], 1))
        d1 = self.dec1(torch.cat([upsample_to(d2, e1), e1], 1))
        maps = [self.reduce3(e3), self.reduce2(d2), self.reduce1(d1)]
        self.last_reduced_shapes = [tuple(m.shape[-2:]) for m in maps]
        flat = torch.cat([m.flatten(1) for m in maps], dim=1)
        return self.mlp(flat).squeeze(1)


def discriminate(D: Discriminator, batch) -> torch.Tensor:
    x = batch.patches if isinstance(batch, PatchBatch) else batch
    if x.dim() != 4 or tuple(x.shape[1:]) != (3, PATCH, PATCH):
        raise ValueError(f"patches must be (B, 3, {PATCH}, {PATCH}), got {tuple(x.shape)}")
    return D(x)


def adv_losses(real_scores: torch.Tensor, fake_scores: torch.Tensor,
               lsgan_standard: bool = False):
    """(L_adv_D, L_adv_G) from discriminator scores.

    L_adv_D = mean (1 - D(x))^2 over real + mean D(y)^2 over rendered.
    L_adv_G = -mean D(y)^2, or mean (1 - D(y))^2 with ``lsgan_standard``.
    The caller routes gradients: L_adv_D must see detached rendered patches.
    """
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("adversarial losses need nonempty score sets")
    loss_d = ((1 - real_scores) ** 2).mean() + (fake_scores ** 2).mean()
    if lsgan_standard:
        loss_g = ((1 - fake_scores) ** 2).mean()
    else:
        loss_g = -(fake_scores ** 2).mean()
    return loss_d, loss_g


def discriminator_loss(D, real: PatchBatch, fake: PatchBatch, lsgan_standard=False):
    """L_adv_D with rendered patches detached so only ``D`` receives gradients."""
    loss_d, _ = adv_losses(discriminate(D, real), discriminate(D, fake.patches.detach()),
                           lsgan_standard)
    return loss_d


def generator_loss(D, fake: PatchBatch, lsgan_standard=False):
    """L_adv_G; the discriminator weights are frozen for this graph."""
    flags = [p.requires_grad for p in D.parameters()]
    for p in D.parameters():
        p.requires_grad_(False)
    try:
        scores = discriminate(D, fake)
    finally:
        for p, f in zip(D.parameters(), flags):
            p.requires_grad_(f)
    ones = torch.ones(1, dtype=scores.dtype)
    return adv_losses(ones, scores, lsgan_standard)[1]
