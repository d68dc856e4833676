"""Neural point renderer branch and the two-branch blending network."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .proxy_geometry import zbuffer
from .scene_model import CameraView, TexturedPointCloud, project_points


@dataclass
class NetConfig:
    feature_dim: int = 32
    sa_points: tuple = (512, 128)
    sa_radii: tuple = (0.05, 0.20)
    neighbors: int = 16
    render_levels: int = 4
    render_base: int = 32
    fuse_levels: int = 5
    fuse_base: int = 16
    origin: tuple = (0.0, 0.0, 0.9)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {k: tuple(v) if isinstance(v, list) else v
                 for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# ----------------------------------------------------------------------------- point features

def farthest_point_sample(xyz: torch.Tensor, n: int) -> torch.Tensor:
    """FPS started from the point farthest from the centroid (order independent)."""
    N = xyz.shape[0]
    n = min(n, N)
    with torch.no_grad():
        dist = ((xyz - xyz.mean(0, keepdim=True)) ** 2).sum(-1)
        idx = torch.empty(n, dtype=torch.long)
        cur = int(torch.argmax(dist))
        best = torch.full((N,), float("inf"), dtype=xyz.dtype)
        for i in range(n):
            idx[i] = cur
            best = torch.minimum(best, ((xyz - xyz[cur]) ** 2).sum(-1))
            cur = int(torch.argmax(best))
    return idx


def knn_in_radius(query: torch.Tensor, xyz: torch.Tensor, k: int, radius: float) -> torch.Tensor:
    """k nearest neighbors; those outside ``radius`` are replaced by the nearest one."""
    with torch.no_grad():
        d2 = torch.cdist(query, xyz) ** 2
        k = min(k, xyz.shape[0])
        dk, idx = torch.topk(d2, k, dim=1, largest=False)
        far = dk > radius * radius
        idx = torch.where(far, idx[:, :1].expand_as(idx), idx)
    return idx


def mlp(widths: Sequence[int], last_act: bool = True) -> nn.Sequential:
    layers = []
    for i in range(len(widths) - 1):
        layers.append(nn.Linear(widths[i], widths[i + 1]))
        if i < len(widths) - 2 or last_act:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class SetAbstraction(nn.Module):
    def __init__(self, n_points, radius, k, in_dim, widths):
        super().__init__()
        self.n_points, self.radius, self.k = n_points, radius, k
        self.mlp = mlp([in_dim + 3, *widths])

    def forward(self, xyz, feats):
        centers = farthest_point_sample(xyz, self.n_points)
        new_xyz = xyz[centers]
        nb = knn_in_radius(new_xyz, xyz, self.k, self.radius)
        rel = (xyz[nb] - new_xyz[:, None, :]) / self.radius
        h = self.mlp(torch.cat([rel, feats[nb]], dim=-1))
        return new_xyz, h.max(dim=1).values


class FeaturePropagation(nn.Module):
    def __init__(self, in_dim, widths):
        super().__init__()
        self.mlp = mlp([in_dim, *widths])

    def forward(self, xyz, xyz_coarse, feats, feats_coarse):
        with torch.no_grad():
            d2 = torch.cdist(xyz, xyz_coarse) ** 2
            k = min(3, xyz_coarse.shape[0])
            dk, idx = torch.topk(d2, k, dim=1, largest=False)
            w = 1.0 / (dk + 1e-8)
            w = w / w.sum(dim=1, keepdim=True)
        interp = (feats_coarse[idx] * w[..., None]).sum(dim=1)
        return self.mlp(torch.cat([interp, feats], dim=-1))


class PointFeatureNet(nn.Module):
    """Two-level hierarchical set abstraction with per-point decoding.

    Input per point is position (relative to ``origin``) and color; output is
    ``feature_dim`` channels per point. The same weights serve every frame.
    """

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("origin", torch.tensor(cfg.origin, dtype=torch.float32))
        (n1, n2), (r1, r2), k = cfg.sa_points, cfg.sa_radii, cfg.neighbors
        self.sa1 = SetAbstraction(n1, r1, k, 6, (32, 32, 64))
        self.sa2 = SetAbstraction(n2, r2, k, 64, (64, 64, 128))
        self.fp2 = FeaturePropagation(128 + 64, (128, 64))
        self.fp1 = FeaturePropagation(64 + 6, (64, 64))
        self.head = nn.Linear(64, cfg.feature_dim)

    def forward(self, xyz: torch.Tensor, rgb: torch.Tensor) -> torch.Tensor:
        xyz = xyz - self.origin.to(xyz.dtype)
        f0 = torch.cat([xyz, rgb], dim=-1)
        xyz1, f1 = self.sa1(xyz, f0)
        xyz2, f2 = self.sa2(xyz1, f1)
        g1 = self.fp2(xyz1, xyz2, f1, f2)
        g0 = self.fp1(xyz, xyz1, f0, g1)
        return self.head(g0)


def cloud_tensors(cloud: TexturedPointCloud, dtype=torch.float32):
    return (torch.tensor(np.array(cloud.positions), dtype=dtype),
            torch.tensor(np.array(cloud.colors), dtype=dtype))


def extract_point_features(net: PointFeatureNet, cloud: TexturedPointCloud) -> torch.Tensor:
    if len(cloud) == 0:
        raise ValueError("empty point cloud")
    dtype = next(net.parameters()).dtype
    xyz, rgb = cloud_tensors(cloud, dtype)
    return net(xyz, rgb)


def dropout_points(cloud: TexturedPointCloud, rate: float = 0.2, seed=None,
                   training: bool = True) -> TexturedPointCloud:
    """Keep each point independently with probability ``1 - rate`` (training only)."""
    if not training or rate <= 0:
        return cloud
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = rng.random(len(cloud)) >= rate
    if not keep.any():
        keep[rng.integers(len(cloud))] = True
    return cloud.subset(np.flatnonzero(keep))


# ----------------------------------------------------------------------------- splatting

def splat_indices(points: np.ndarray, camera: CameraView):
    """Per-pixel nearest point under one-pixel splats: (flat pixel ids, point ids)."""
    uv, z = project_points(camera, np.asarray(points))
    c, r = np.rint(uv[:, 0]), np.rint(uv[:, 1])
    ok = (z > 0) & (c >= 0) & (c < camera.width) & (r >= 0) & (r < camera.height)
    idx = np.flatnonzero(ok)
    flat = (r[idx] * camera.width + c[idx]).astype(np.int64)
    return zbuffer(flat, z[idx], idx, camera.width * camera.height)


def splat_features(points, features: torch.Tensor, target: CameraView):
    """Depth-ordered feature map (F, H, W) and splat mask (H, W).

    Differentiable with respect to ``features``; the visibility ordering is not.
    """
    H, W = target.height, target.width
    pix, win = splat_indices(points, target)
    pix_t = torch.as_tensor(pix, dtype=torch.long)
    win_t = torch.as_tensor(win, dtype=torch.long)
    flat = features.new_zeros(H * W, features.shape[1])
    flat = flat.index_copy(0, pix_t, features.index_select(0, win_t))
    mask = torch.zeros(H * W, dtype=torch.bool)
    mask[pix_t] = True
    return flat.T.reshape(features.shape[1], H, W), mask.reshape(H, W)


# ----------------------------------------------------------------------------- image networks

class GatedConv2d(nn.Module):
    """out = elu(conv_f(x)) * sigmoid(conv_g(x))."""

    def __init__(self, cin, cout, kernel=3, stride=1):
        super().__init__()
        pad = kernel // 2
        self.feature = nn.Conv2d(cin, cout, kernel, stride, pad)
        self.gate = nn.Conv2d(cin, cout, kernel, stride, pad)

    def forward(self, x):
        return F.elu(self.feature(x)) * torch.sigmoid(self.gate(x))


def clamp01(x: torch.Tensor) -> torch.Tensor:
    """Clamp to [0, 1] in the forward pass with an identity gradient.

    Under L1 a clamped pixel whose target sits on the bound gets zero gradient
    (the error is exactly zero), while one whose target lies inside the range
    is still pulled back. A zero-gradient clamp instead lets a branch that has
    drifted onto a bound stay dark for good.
    """
    return x + (x.clamp(0.0, 1.0) - x).detach()


def upsample_to(x, ref):
    """Nearest-neighbor upsampling to ``ref``'s spatial size (exact 2x via expand, it is faster)."""
    h, w = ref.shape[-2:]
    if x.shape[-2] * 2 >= h and x.shape[-1] * 2 >= w and x.shape[-2] * 2 - h <= 1 and x.shape[-1] * 2 - w <= 1:
        B, C, hh, ww = x.shape
        up = x[:, :, :, None, :, None].expand(B, C, hh, 2, ww, 2).reshape(B, C, 2 * hh, 2 * ww)
        return up[:, :, :h, :w]
    return F.interpolate(x, size=(h, w), mode="nearest")


class GatedUNet(nn.Module):
    """Render head: gated convolutions throughout, skip connections, RGB + mask out."""

    def __init__(self, cin, levels=4, base=32, cout=4):
        super().__init__()
        ch = [base * 2 ** i for i in range(levels)]
        self.enc = nn.ModuleList()
        prev = cin
        for i, c in enumerate(ch):
            self.enc.append(nn.Sequential(GatedConv2d(prev, c, 3, 1 if i == 0 else 2),
                                          GatedConv2d(c, c)))
            prev = c
        self.dec = nn.ModuleList()
        for i in range(levels - 2, -1, -1):
            self.dec.append(GatedConv2d(prev + ch[i], ch[i]))
            prev = ch[i]
        self.out = nn.Conv2d(prev, cout, 1)

    def forward(self, x):
        skips = []
        for block in self.enc:
            x = block(x)
            skips.append(x)
        for block, skip in zip(self.dec, reversed(skips[:-1])):
            x = block(torch.cat([upsample_to(x, skip), skip], dim=1))
        return self.out(x)


def _conv_block(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.LeakyReLU(0.2),
                         nn.Conv2d(cout, cout, 3, 1, 1), nn.LeakyReLU(0.2))


class FuseUNet(nn.Module):
    """Plain U-Net over the concatenated branch images.

    The 1x1 head predicts a blend weight ``a`` and an RGB residual ``r``:
    ``I = clamp(a * I_neural + (1 - a) * I_tex + r, 0, 1)`` (see ``clamp01``).
    The head starts at zero, so an untrained net outputs the mean of both
    branches.
    """

    def __init__(self, levels=5, base=16):
        super().__init__()
        ch = [base * 2 ** i for i in range(levels)]
        self.enc = nn.ModuleList()
        prev = 6
        for i, c in enumerate(ch):
            self.enc.append(_conv_block(prev, c, 1 if i == 0 else 2))
            prev = c
        self.dec = nn.ModuleList()
        for i in range(levels - 2, -1, -1):
            self.dec.append(_conv_block(prev + ch[i], ch[i]))
            prev = ch[i]
        self.head = nn.Conv2d(prev, 4, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, neural, tex):
        x = torch.cat([neural, tex], dim=1)
        skips = []
        for block in self.enc:
            x = block(x)
            skips.append(x)
        for block, skip in zip(self.dec, reversed(skips[:-1])):
            x = block(torch.cat([upsample_to(x, skip), skip], dim=1))
        h = self.head(x)
        a = torch.sigmoid(h[:, :1])
        return clamp01(a * neural + (1 - a) * tex + h[:, 1:])


class RenderNets(nn.Module):
    """All renderer parameters: point features, gated render head and fuse net."""

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        self.point_net = PointFeatureNet(cfg)
        self.render_head = GatedUNet(cfg.feature_dim + 4, cfg.render_levels, cfg.render_base, 4)
        self.fuse_net = FuseUNet(cfg.fuse_levels, cfg.fuse_base)

    @property
    def neural_parameters(self):
        return list(self.point_net.parameters()) + list(self.render_head.parameters())


def render_neural_batch(nets: RenderNets, clouds: Sequence[TexturedPointCloud],
                        targets: Sequence[CameraView], training: bool = False,
                        rng: Optional[np.random.Generator] = None, dropout: float = 0.2):
    """Render several (cloud, camera) pairs; clouds shared by identity are featurized once."""
    feats = {}
    maps, masks = [], []
    for cloud, cam in zip(clouds, targets):
        key = id(cloud)
        if key not in feats:
            used = dropout_points(cloud, dropout, rng, training) if training else cloud
            f = extract_point_features(nets.point_net, used)
            rgb = torch.tensor(np.array(used.colors), dtype=f.dtype)
            feats[key] = (used, torch.cat([f, rgb], dim=1))
        used, f = feats[key]
        fmap, m = splat_features(used.positions, f, cam)
        maps.append(torch.cat([fmap, m[None].to(fmap.dtype)], dim=0))
    x = torch.stack(maps)
    out = nets.render_head(x)
    mask = torch.sigmoid(out[:, 3])
    # The head corrects the splatted point colors; the mask is trained by its own
    # loss only, so color errors cannot shrink it to zero.
    rgb = clamp01(x[:, -4:-1] + out[:, :3])
    return rgb * mask.detach()[:, None], mask


def render_neural(nets: RenderNets, cloud: TexturedPointCloud, target: CameraView,
                  training: bool = False, rng=None, dropout: float = 0.2):
    """(I_neural (3, H, W) in [0, 1], M_neural (H, W) in [0, 1])."""
    if len(cloud) == 0:
        raise ValueError("empty point cloud")
    img, mask = render_neural_batch(nets, [cloud], [target], training, rng, dropout)
    return img[0], mask[0]


def blend(nets: RenderNets, neural: torch.Tensor, tex: torch.Tensor) -> torch.Tensor:
    """Fuse both branch images; accepts (3, H, W) or (B, 3, H, W)."""
    if neural.shape != tex.shape:
        raise ValueError(f"branch images differ in size: {tuple(neural.shape)} vs {tuple(tex.shape)}")
    single = neural.dim() == 3
    if single:
        neural, tex = neural[None], tex[None]
    out = nets.fuse_net(neural, tex)
    return out[0] if single else out
