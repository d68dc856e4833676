"""Two-phase training of the renderer and the patch discriminator."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .adversarial import Discriminator, adv_losses, discriminate, sample_patches
from .dataset import Dataset
from .neural_render import NetConfig, RenderNets, render_neural_batch
from .proxy_geometry import fuse_frame, render_textured
from .scene_model import CameraView, TexturedPointCloud

log = logging.getLogger(__name__)

BRANCHES = ("both", "graphics", "neural")
VGG_CACHE = Path(torch.hub.get_dir()) / "checkpoints" / "vgg19-dcbb9e9d.pth"


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    w_adv: float = 0.3
    w_rgb: float = 5.0
    w_vgg: float = 0.7
    w_mask: float = 1.0
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    batch_size: int = 4
    patches_per_sample: int = 40
    bootstrap_epochs: int = 10
    epochs: int = 50
    max_steps: Optional[int] = None
    seed: int = 0
    translate_px: float = 8.0
    scale_range: tuple = (0.9, 1.1)
    rotate_deg: float = 10.0
    lsgan_standard: bool = False
    branches: str = "both"
    point_dropout: float = 0.2
    disc_base: int = 32
    perceptual: str = "auto"          # auto | vgg19 | random
    vgg_weights: Optional[str] = None
    perceptual_widths: tuple = (64, 128)
    checkpoint_every: int = 0         # 0: only at the end
    net: NetConfig = field(default_factory=NetConfig)

    def validate(self) -> "TrainConfig":
        if min(self.w_adv, self.w_rgb, self.w_vgg, self.w_mask) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1 or self.patches_per_sample < 1:
            raise ValueError("batch_size and patches_per_sample must be >= 1")
        if self.branches not in BRANCHES:
            raise ValueError(f"branches must be one of {BRANCHES}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        if self.translate_px < 0 or self.rotate_deg < 0:
            raise ValueError("augmentation ranges must be non-negative")
        if self.perceptual not in ("auto", "vgg19", "random"):
            raise ValueError("perceptual must be auto, vgg19 or random")
        return self

    def to_dict(self) -> dict:
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}
        d["net"] = self.net.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train settings: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k != "net"}
        net = NetConfig.from_dict(d.get("net", {}))
        return cls(**kw, net=net).validate()


# ----------------------------------------------------------------------------- losses

def loss_rgb(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error per pixel and channel against the masked target."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


class RandomPyramid(nn.Module):
    """Frozen random-weight stand-in for the first two VGG blocks."""

    def __init__(self, widths=(64, 128), seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        a, b = widths
        self.block1 = nn.Sequential(nn.Conv2d(3, a, 3, 1, 1), nn.ReLU(), nn.Conv2d(a, a, 3, 1, 1), nn.ReLU())
        self.block2 = nn.Sequential(nn.MaxPool2d(2), nn.Conv2d(a, b, 3, 1, 1), nn.ReLU(),
                                    nn.Conv2d(b, b, 3, 1, 1), nn.ReLU())
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * 9
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=g) * math.sqrt(2.0 / fan_in))
                    m.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        f1 = self.block1(x)
        return [f1, self.block2(f1)]


class VGGFeatures(nn.Module):
    """relu1_2 and relu2_2 of a pretrained VGG-19."""

    MEAN = (0.485, 0.456, 0.406)
    STD = (0.229, 0.224, 0.225)

    def __init__(self, weights_path: Optional[str] = None):
        super().__init__()
        import torchvision

        vgg = torchvision.models.vgg19(weights=None)
        path = Path(weights_path) if weights_path else VGG_CACHE
        if not path.exists():
            raise FileNotFoundError(f"no VGG-19 weights at {path}")
        vgg.load_state_dict(torch.load(path, map_location="cpu"))
        self.block1 = vgg.features[:4]
        self.block2 = vgg.features[4:9]
        self.register_buffer("mean", torch.tensor(self.MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(self.STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        f1 = self.block1((x - self.mean) / self.std)
        return [f1, self.block2(f1)]


def perceptual_extractor(cfg: TrainConfig) -> nn.Module:
    if cfg.perceptual in ("auto", "vgg19"):
        try:
            return VGGFeatures(cfg.vgg_weights)
        except Exception as exc:  # no torchvision or no weights offline
            if cfg.perceptual == "vgg19":
                raise
            log.info("pretrained VGG-19 unavailable (%s); using the random feature pyramid", exc)
    return RandomPyramid(cfg.perceptual_widths, seed=0)


def loss_vgg(pred: torch.Tensor, target: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    """Sum over the two feature layers of the mean squared feature difference."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    fp = extractor(pred)
    with torch.no_grad():
        ft = extractor(target)
    return sum(((a - b) ** 2).mean() for a, b in zip(fp, ft))


def total_loss(parts: dict, cfg: TrainConfig = TrainConfig()):
    """w_adv * (L_adv_D + L_adv_G) + w_rgb * L_rgb + w_vgg * L_vgg (+ w_mask * L_mask if given)."""
    adv = parts.get("L_adv_D", 0.0) + parts.get("L_adv_G", 0.0)
    out = cfg.w_adv * adv + cfg.w_rgb * parts.get("L_rgb", 0.0) + cfg.w_vgg * parts.get("L_vgg", 0.0)
    if "L_mask" in parts:
        out = out + cfg.w_mask * parts["L_mask"]
    return out


# ----------------------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class Similarity:
    """u' = s * Rot(theta) (u - c) + c + t, with c the principal point."""
    shift: tuple = (0.0, 0.0)
    scale: float = 1.0
    angle: float = 0.0  # radians

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, uv, center) -> np.ndarray:
        uv = np.asarray(uv, float)
        return (uv - center) @ self.matrix().T + center + np.asarray(self.shift)

    @property
    def is_identity(self) -> bool:
        return self.shift == (0.0, 0.0) and self.scale == 1.0 and self.angle == 0.0


def draw_similarity(cfg: TrainConfig, rng: np.random.Generator) -> Similarity:
    t = rng.uniform(-cfg.translate_px, cfg.translate_px, 2)
    s = rng.uniform(*cfg.scale_range)
    a = math.radians(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg))
    return Similarity((float(t[0]), float(t[1])), float(s), a)


def transform_camera(camera: CameraView, sim: Similarity) -> CameraView:
    """Camera whose projections equal the transformed projections of ``camera``.

    Rotation becomes an in-plane rotation of the camera frame (fx == fy is
    required), scale multiplies the focal lengths and translation shifts the
    principal point.
    """
    if sim.angle != 0.0 and not math.isclose(camera.fx, camera.fy, rel_tol=1e-12):
        raise ValueError("in-plane rotation needs square pixels (fx == fy)")
    c, s = math.cos(sim.angle), math.sin(sim.angle)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return camera.replace(R=Rz @ camera.R, t=Rz @ camera.t,
                          fx=camera.fx * sim.scale, fy=camera.fy * sim.scale,
                          cx=camera.cx + sim.shift[0], cy=camera.cy + sim.shift[1])


def warp_image(image: np.ndarray, sim: Similarity, center, order: int = 1) -> np.ndarray:
    """Resample ``image`` (H, W[, C]) so content at pixel u moves to sim(u)."""
    if sim.is_identity:
        return image.copy()
    H, W = image.shape[:2]
    vv, uu = np.mgrid[0:H, 0:W].astype(float)
    out_uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    inv = np.linalg.inv(sim.matrix())
    src = (out_uv - center - np.asarray(sim.shift)) @ inv.T + center
    coords = [src[:, 1].reshape(H, W), src[:, 0].reshape(H, W)]
    if image.ndim == 2:
        return ndimage.map_coordinates(image, coords, order=order, mode="constant", cval=0)
    return np.stack([ndimage.map_coordinates(image[..., k], coords, order=order,
                                             mode="constant", cval=0)
                     for k in range(image.shape[2])], axis=-1)


def augment(color: np.ndarray, mask: np.ndarray, camera: CameraView, cfg: TrainConfig, seed):
    """Randomly transformed (color, mask, camera) with consistent reprojection."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sim = draw_similarity(cfg, rng)
    center = np.array([camera.cx, camera.cy])
    cam = transform_camera(camera, sim)
    return (warp_image(color, sim, center, 1).astype(np.float32),
            warp_image(mask.astype(np.float32), sim, center, 0) > 0.5, cam)


# ----------------------------------------------------------------------------- data

@dataclass
class KeyframeData:
    t: int
    cloud: TexturedPointCloud
    cameras: list
    colors: list          # masked ground truth (H, W, 3)
    masks: list


def load_keyframe_data(dataset: Dataset, keyframes: Sequence[int]) -> list[KeyframeData]:
    """Fuse each key-frame and keep its masked views; reads key-frame files only."""
    out = []
    cams = dataset.cameras
    for t in keyframes:
        frames = dataset.frames(int(t))
        cloud = fuse_frame(frames, cams)
        cols = [fr.color * fr.mask[..., None] for fr in frames]
        out.append(KeyframeData(int(t), cloud, list(cams), cols, [fr.mask.copy() for fr in frames]))
    return out


def apply_branches(neural: torch.Tensor, tex: torch.Tensor, branches: str):
    if branches == "graphics":
        neural = torch.zeros_like(neural)
    elif branches == "neural":
        tex = torch.zeros_like(tex)
    return neural, tex


def render_full(nets: RenderNets, cloud: TexturedPointCloud, cameras: Sequence[CameraView],
                branches: str = "both", training: bool = False, rng=None, dropout: float = 0.2):
    """Both branches plus blend for several views of one cloud.

    Returns (I_* (B, 3, H, W), I_neural, M_neural (B, H, W), I_tex).
    """
    neural, mask = render_neural_batch(nets, [cloud] * len(cameras), list(cameras),
                                       training, rng, dropout)
    tex = torch.from_numpy(np.stack([render_textured(cloud, c)[0] for c in cameras])).permute(0, 3, 1, 2)
    tex = tex.to(neural.dtype)
    n_in, t_in = apply_branches(neural, tex, branches)
    return nets.fuse_net(n_in, t_in), neural, mask, tex


# ----------------------------------------------------------------------------- checkpoints

def save_checkpoint(path, nets, disc, opt_r, opt_d, cfg: TrainConfig, step: int, extra=None):
    payload = {
        "step": step,
        "config": cfg.to_dict(),
        "renderer": nets.state_dict(),
        "discriminator": disc.state_dict(),
        "opt_renderer": opt_r.state_dict(),
        "opt_discriminator": opt_d.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """(nets, discriminator, cfg, payload) with networks in eval mode."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = TrainConfig.from_dict(payload["config"])
    nets = RenderNets(cfg.net)
    nets.load_state_dict(payload["renderer"])
    disc = Discriminator(cfg.disc_base)
    disc.load_state_dict(payload["discriminator"])
    nets.eval()
    disc.eval()
    return nets, disc, cfg, payload


# ----------------------------------------------------------------------------- training

class Trainer:
    """Owns every trainable parameter; ``step(i)`` is a pure function of (state, seed, i)."""

    def __init__(self, data: list[KeyframeData], cfg: TrainConfig):
        self.cfg = cfg.validate()
        self.data = data
        torch.manual_seed(cfg.seed)
        self.nets = RenderNets(cfg.net)
        self.disc = Discriminator(cfg.disc_base)
        self.opt_r = torch.optim.Adam(self.nets.parameters(), lr=cfg.lr, betas=tuple(cfg.betas))
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=cfg.lr, betas=tuple(cfg.betas))
        self.extractor = perceptual_extractor(cfg)
        self.samples = [(i, v) for i in range(len(data)) for v in range(len(data[i].cameras))]
        self.steps_per_epoch = math.ceil(len(self.samples) / cfg.batch_size)
        self.bootstrap_steps = cfg.bootstrap_epochs * self.steps_per_epoch
        total = (cfg.bootstrap_epochs + cfg.epochs) * self.steps_per_epoch
        self.total_steps = total if cfg.max_steps is None else min(total, cfg.max_steps)
        self.step_done = 0

    def batch(self, step: int):
        epoch, pos = divmod(step, self.steps_per_epoch)
        perm = np.random.default_rng([self.cfg.seed, epoch, 1]).permutation(len(self.samples))
        b = self.cfg.batch_size
        return [self.samples[i] for i in perm[pos * b:(pos + 1) * b]]

    def _prepare(self, items, rng):
        by_frame: dict[int, list] = {}
        for i, v in items:
            kd = self.data[i]
            color, mask, cam = augment(kd.colors[v], kd.masks[v], kd.cameras[v], self.cfg, rng)
            by_frame.setdefault(i, []).append((color * mask[..., None], mask, cam))
        return by_frame

    def step(self, step: int) -> dict:
        # Tiny activations turn denormal late in training and slow CPU steps several-fold.
        # The flag is process-wide, so it is restored before returning.
        torch.set_flush_denormal(True)
        try:
            return self._step(step)
        finally:
            torch.set_flush_denormal(False)

    def _step(self, step: int) -> dict:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, step, 0])
        bootstrap = step < self.bootstrap_steps
        self.nets.train()
        prepared = self._prepare(self.batch(step), rng)
        clouds, cams, targets, masks = [], [], [], []
        for i, views in prepared.items():
            for color, mask, cam in views:
                clouds.append(self.data[i].cloud)
                cams.append(cam)
                targets.append(color)
                masks.append(mask)
        target = torch.from_numpy(np.stack(targets)).permute(0, 3, 1, 2).float()
        gt_mask = torch.from_numpy(np.stack(masks)).float()

        neural, m_neural = render_neural_batch(self.nets, clouds, cams, True, rng, cfg.point_dropout)
        l_mask = F.binary_cross_entropy(m_neural.clamp(1e-6, 1 - 1e-6), gt_mask)
        parts = {"L_adv_D": torch.zeros(()), "L_adv_G": torch.zeros(()), "L_mask": l_mask}
        if bootstrap:
            pred = neural
        else:
            tex = torch.from_numpy(np.stack([render_textured(c, cam)[0]
                                             for c, cam in zip(clouds, cams)])).permute(0, 3, 1, 2)
            n_in, t_in = apply_branches(neural, tex.float(), cfg.branches)
            pred = self.nets.fuse_net(n_in, t_in)
        parts["L_rgb"] = loss_rgb(pred, target)
        parts["L_vgg"] = loss_vgg(pred, target, self.extractor)
        if not bootstrap and cfg.w_adv > 0:
            parts["L_adv_D"], parts["L_adv_G"] = self._adversarial(pred, target, masks, rng)
        total = total_loss(parts, cfg)
        record = {"step": step, "phase": "bootstrap" if bootstrap else "joint",
                  **{k: float(v.detach()) for k, v in parts.items()}, "total": float(total.detach())}
        if not all(math.isfinite(v) for k, v in record.items() if k not in ("step", "phase")):
            raise NonFiniteLoss(f"non-finite loss at step {step}: {record}")

        self.opt_r.zero_grad(set_to_none=True)
        self.opt_d.zero_grad(set_to_none=True)
        total.backward()
        self.opt_r.step()
        if not bootstrap:
            self.opt_d.step()
        self.step_done = step + 1
        return record

    def _adversarial(self, pred, target, masks, rng):
        """L_adv_D sees detached fakes; L_adv_G sees a frozen discriminator."""
        n = self.cfg.patches_per_sample
        real, fake = [], []
        for b in range(pred.shape[0]):
            real.append(sample_patches(target[b], masks[b], n, rng, "real").patches)
            fake.append(sample_patches(pred[b], masks[b], n, rng, "rendered").patches)
        real, fake = torch.cat(real), torch.cat(fake)
        if len(real) == 0 or len(fake) == 0:
            return torch.zeros(()), torch.zeros(())
        scores = discriminate(self.disc, torch.cat([real, fake.detach()]))
        loss_d, _ = adv_losses(scores[:len(real)], scores[len(real):], self.cfg.lsgan_standard)
        self.disc.requires_grad_(False)
        try:
            fake_scores = discriminate(self.disc, fake)
        finally:
            self.disc.requires_grad_(True)
        _, loss_g = adv_losses(torch.ones(1), fake_scores, self.cfg.lsgan_standard)
        return loss_d, loss_g

    def save(self, path, extra=None):
        save_checkpoint(path, self.nets, self.disc, self.opt_r, self.opt_d, self.cfg,
                        self.step_done, extra)

    def restore(self, path):
        payload = torch.load(path, map_location="cpu", weights_only=False)
        self.nets.load_state_dict(payload["renderer"])
        self.disc.load_state_dict(payload["discriminator"])
        self.opt_r.load_state_dict(payload["opt_renderer"])
        self.opt_d.load_state_dict(payload["opt_discriminator"])
        self.step_done = int(payload["step"])


def train(dataset: Dataset, keyframes: Sequence[int], cfg: TrainConfig, out_dir,
          resume: Optional[str] = None, until: Optional[int] = None,
          data: Optional[list[KeyframeData]] = None) -> Path:
    """Run bootstrap and joint phases; writes ``checkpoint.pt`` and ``train_log.jsonl``.

    ``until`` stops after that many total steps (used to test resumption).
    Raises ``NonFiniteLoss`` after writing ``diagnostic.pt``.
    """
    torch.use_deterministic_algorithms(True)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_keyframe_data(dataset, keyframes) if data is None else data
    tr = Trainer(data, cfg)
    log_path = out / "train_log.jsonl"
    if resume:
        tr.restore(resume)
        kept = [l for l in log_path.read_text().splitlines() if json.loads(l)["step"] < tr.step_done] \
            if log_path.exists() else []
        log_path.write_text("".join(l + "\n" for l in kept))
    elif log_path.exists():
        log_path.unlink()
    stop = tr.total_steps if until is None else min(until, tr.total_steps)
    extra = {"keyframes": [int(k) for k in keyframes]}
    t0 = time.perf_counter()
    with log_path.open("a") as fh:
        for s in range(tr.step_done, stop):
            try:
                rec = tr.step(s)
            except NonFiniteLoss:
                tr.save(out / "diagnostic.pt", {**extra, "failed_step": s})
                raise
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            if cfg.checkpoint_every and tr.step_done % cfg.checkpoint_every == 0:
                tr.save(out / "checkpoint.pt", extra)
            if s % 50 == 0:
                log.info("step %d/%d total %.4f (%.1fs)", s, stop, rec["total"], time.perf_counter() - t0)
    tr.save(out / "checkpoint.pt", extra)
    return out / "checkpoint.pt"


def read_log(path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]
