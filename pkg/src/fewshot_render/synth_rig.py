"""Deterministic synthetic capture rig.

An articulated 25-joint performer made of capsules is animated by a periodic
joint-angle program and ray cast into six RGBD cameras on a horizontal ring.
Noisy 2D joint detections with confidences stand in for a keypoint detector and
the exact foreground mask stands in for a segmentation network.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .scene_model import (
    JOINT_PARENTS, NUM_JOINTS, REST_JOINTS, ROOT_JOINT, CameraView, Pose3D, RGBDFrame,
    joint_order, look_at_camera, pixel_rays, project_points,
)

# (joint a, joint b, radius, texture owner joint)
BODY_CAPSULES = (
    (8, 1, 0.130, 8),     # torso
    (9, 12, 0.095, 8),    # pelvis
    (1, 0, 0.050, 1),     # neck
    (17, 18, 0.100, 0),   # head
    (1, 2, 0.060, 1),
    (1, 5, 0.060, 1),
    (2, 3, 0.050, 2),
    (3, 4, 0.042, 3),
    (5, 6, 0.050, 5),
    (6, 7, 0.042, 6),
    (9, 10, 0.070, 9),
    (10, 11, 0.052, 10),
    (12, 13, 0.070, 12),
    (13, 14, 0.052, 13),
    (24, 22, 0.042, 11),
    (21, 19, 0.042, 14),
    (11, 23, 0.030, 11),
    (14, 20, 0.030, 14),
)

CAPSULE_HUES = np.array([
    [0.85, 0.25, 0.20], [0.60, 0.20, 0.55], [0.95, 0.75, 0.60], [0.35, 0.20, 0.10],
    [0.20, 0.45, 0.85], [0.20, 0.75, 0.80], [0.25, 0.55, 0.95], [0.95, 0.80, 0.65],
    [0.30, 0.85, 0.65], [0.95, 0.70, 0.60], [0.25, 0.30, 0.75], [0.15, 0.65, 0.30],
    [0.70, 0.30, 0.85], [0.55, 0.75, 0.20], [0.15, 0.15, 0.20], [0.35, 0.35, 0.40],
    [0.90, 0.90, 0.30], [0.90, 0.55, 0.15],
])
PROP_RADIUS = 0.11
PROP_HUE = np.array([1.0, 0.55, 0.05])
LIGHT_DIR = np.array([0.3, 0.5, 0.8]) / np.linalg.norm([0.3, 0.5, 0.8])


def default_motion_program() -> dict:
    """Joint-angle curves: joint -> list of (axis, shape, harmonic, amplitude).

    ``shape`` is ``"sin"`` (A sin(2 pi k t / P)) or ``"bend"``
    (A (1 - cos(2 pi k t / P)) / 2); both vanish at t = 0 so frame 0 is the T-pose.
    """
    return {
        "8": [["z", "sin", 1, 0.35]],
        "1": [["x", "sin", 2, 0.15]],
        "2": [["y", "sin", 1, -0.75], ["z", "sin", 2, 0.30]],
        "3": [["z", "bend", 2, 0.90]],
        "5": [["y", "sin", 1, -0.55], ["z", "sin", 3, -0.20]],
        "6": [["z", "bend", 3, -0.55]],
        "9": [["x", "sin", 2, 0.32]],
        "10": [["x", "bend", 2, -0.55]],
        "12": [["x", "sin", 2, -0.32]],
        "13": [["x", "bend", 2, -0.50]],
    }


@dataclass
class SceneSpec:
    seed: int = 7
    n_frames: int = 100
    period: int = 100
    motion: dict = field(default_factory=default_motion_program)
    root_sway: float = 0.05
    texture_cell: float = 0.06
    n_views: int = 6
    rig_radius: float = 3.0
    rig_height: float = 1.0
    look_at: tuple = (0.0, 0.0, 0.9)
    focal_scale: float = 1.35  # focal length in units of image height
    image_size: int = 128
    detection_sigma: float = 1.0
    depth_sigma: float = 0.0
    occlusion_floor: float = 0.05
    topology_event: bool = False
    pickup_frame: int = 40

    def validate(self):
        if self.n_frames <= 0:
            raise ValueError("sequence length must be positive")
        if self.n_views <= 0:
            raise ValueError("rig needs at least one camera")
        if self.period <= 0 or self.image_size < 8:
            raise ValueError("invalid period or image size")
        if not 0 <= self.occlusion_floor <= 1:
            raise ValueError("occlusion floor must be in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["look_at"] = list(self.look_at)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "look_at" in known:
            known["look_at"] = tuple(known["look_at"])
        return cls(**known)


def rig_cameras(spec: SceneSpec) -> list[CameraView]:
    size = spec.image_size
    cams = []
    for i in range(spec.n_views):
        a = math.pi / 2 + 2 * math.pi * i / spec.n_views
        eye = (spec.rig_radius * math.cos(a), spec.rig_radius * math.sin(a), spec.rig_height)
        cams.append(look_at_camera(eye, spec.look_at, focal=spec.focal_scale * size,
                                   width=size, height=size, view_id=i))
    return cams


def orbit_cameras(spec: SceneSpec, n: int, radius: Optional[float] = None,
                  height: Optional[float] = None) -> list[CameraView]:
    """Evenly spaced cameras on a full circle around the rig center."""
    radius = spec.rig_radius if radius is None else radius
    height = spec.rig_height if height is None else height
    size = spec.image_size
    out = []
    for i in range(n):
        a = math.pi / 2 + 2 * math.pi * i / n
        eye = (radius * math.cos(a), radius * math.sin(a), height)
        out.append(look_at_camera(eye, spec.look_at, focal=spec.focal_scale * size,
                                  width=size, height=size, view_id=i))
    return out


def _axis_rotation(axis: str, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    raise ValueError(f"unknown axis {axis!r}")


def _joint_angles(spec: SceneSpec, frame_index: int) -> dict[int, np.ndarray]:
    # Phase is reduced modulo the period first so pose(t) == pose(t + P) exactly.
    phase = 2 * math.pi * ((frame_index % spec.period) / spec.period)
    rots = {}
    for key, terms in spec.motion.items():
        R = np.eye(3)
        for axis, shape, k, amp in terms:
            if shape == "sin":
                ang = amp * math.sin(k * phase)
            elif shape == "bend":
                ang = amp * 0.5 * (1.0 - math.cos(k * phase))
            else:
                raise ValueError(f"unknown curve shape {shape!r}")
            R = R @ _axis_rotation(axis, ang)
        rots[int(key)] = R
    return rots


def forward_kinematics(spec: SceneSpec, frame_index: int) -> tuple[np.ndarray, np.ndarray]:
    """World joint positions (25, 3) and per-joint world rotations (25, 3, 3)."""
    local = _joint_angles(spec, frame_index)
    phase = 2 * math.pi * ((frame_index % spec.period) / spec.period)
    X = np.zeros((NUM_JOINTS, 3))
    W = np.zeros((NUM_JOINTS, 3, 3))
    for j in joint_order():
        p = JOINT_PARENTS[j]
        L = local.get(j, np.eye(3))
        if p < 0:
            W[j] = L
            X[j] = REST_JOINTS[j] + np.array([spec.root_sway * math.sin(phase),
                                              0.0, 0.5 * spec.root_sway * math.sin(2 * phase)])
        else:
            W[j] = W[p] @ L
            X[j] = X[p] + W[p] @ (REST_JOINTS[j] - REST_JOINTS[p])
    return X, W


def motion_program_eval(spec: SceneSpec, frame_index: int) -> Pose3D:
    if not 0 <= frame_index < spec.n_frames:
        raise IndexError(f"frame {frame_index} outside [0, {spec.n_frames})")
    X, _ = forward_kinematics(spec, frame_index)
    return Pose3D(X, np.ones(NUM_JOINTS), frame_index)


@dataclass
class Primitives:
    """Capsules in world space; spheres are capsules with a == b."""
    a: np.ndarray
    b: np.ndarray
    radius: np.ndarray
    frames: np.ndarray   # (M, 3, 3) texture frame rotations
    hues: np.ndarray
    is_prop: np.ndarray
    joint_sets: list

    def __len__(self):
        return len(self.radius)


def scene_primitives(spec: SceneSpec, frame_index: int) -> Primitives:
    X, W = forward_kinematics(spec, frame_index)
    a, b, r, fr, hues, prop, sets = [], [], [], [], [], [], []
    for i, (ja, jb, rad, owner) in enumerate(BODY_CAPSULES):
        a.append(X[ja]); b.append(X[jb]); r.append(rad); fr.append(W[owner])
        hues.append(CAPSULE_HUES[i]); prop.append(False); sets.append((ja, jb))
    if spec.topology_event:
        if frame_index < spec.pickup_frame:
            c, R = np.array([-0.55, 0.45, 0.75]), np.eye(3)
        else:
            c, R = X[4] + W[3] @ np.array([0.0, 0.0, -PROP_RADIUS - 0.04]), W[3]
        a.append(c); b.append(c); r.append(PROP_RADIUS); fr.append(R)
        hues.append(PROP_HUE); prop.append(True); sets.append(())
    return Primitives(np.array(a), np.array(b), np.array(r), np.array(fr),
                      np.array(hues), np.array(prop), sets)


def _sphere_hits(o, d, c, r):
    oc = o[:, None, :] - c[None, :, :]
    bq = np.einsum("nk,nmk->nm", d, oc)
    cq = np.einsum("nmk,nmk->nm", oc, oc) - r[None, :] ** 2
    h = bq * bq - cq
    with np.errstate(invalid="ignore"):
        t = -bq - np.sqrt(h)
    t[(h < 0) | (t <= 0)] = np.inf
    return t


def ray_entry_distances(origins, dirs, prims: Primitives) -> np.ndarray:
    """Distance along each unit ray to the first entry into each capsule, inf if missed."""
    o = np.asarray(origins, float)
    d = np.asarray(dirs, float)
    ba = prims.b - prims.a
    L2 = np.einsum("mk,mk->m", ba, ba)
    safe = np.where(L2 > 0, L2, 1.0)
    oa = o[:, None, :] - prims.a[None, :, :]
    d_ax = (d @ ba.T) / safe
    oa_ax = np.einsum("nmk,mk->nm", oa, ba) / safe
    dp = d[:, None, :] - d_ax[..., None] * ba[None]
    op = oa - oa_ax[..., None] * ba[None]
    A = np.einsum("nmk,nmk->nm", dp, dp)
    B = 2 * np.einsum("nmk,nmk->nm", op, dp)
    C = np.einsum("nmk,nmk->nm", op, op) - prims.radius[None, :] ** 2
    disc = B * B - 4 * A * C
    with np.errstate(invalid="ignore", divide="ignore"):
        t_cyl = (-B - np.sqrt(disc)) / (2 * A)
        s = oa_ax + t_cyl * d_ax
    bad = (disc < 0) | (A < 1e-12) | ~(t_cyl > 0) | (s < 0) | (s > 1) | (L2[None] == 0)
    t_cyl = np.where(bad, np.inf, t_cyl)
    t = np.minimum(t_cyl, _sphere_hits(o, d, prims.a, prims.radius))
    return np.minimum(t, _sphere_hits(o, d, prims.b, prims.radius))


def segment_distances(points, prims: Primitives) -> np.ndarray:
    """(N, M) distance from each point to each capsule axis segment."""
    p = np.asarray(points, float).reshape(-1, 3)
    ba = prims.b - prims.a
    L2 = np.einsum("mk,mk->m", ba, ba)
    pa = p[:, None, :] - prims.a[None]
    s = np.einsum("nmk,mk->nm", pa, ba) / np.where(L2 > 0, L2, 1.0)
    s = np.clip(s, 0.0, 1.0)
    closest = prims.a[None] + s[..., None] * ba[None]
    return np.linalg.norm(p[:, None, :] - closest, axis=2)


def surface_distance(points, prims: Primitives) -> np.ndarray:
    """Unsigned distance from points to the union surface of the capsules."""
    sd = (segment_distances(points, prims) - prims.radius[None]).min(axis=1)
    return np.abs(sd)


def shade_hits(points, prim_index, prims: Primitives, texture_cell: float) -> np.ndarray:
    """Albedo (per-capsule hue times a solid checker in the bone frame) with Lambertian shading."""
    k = prim_index
    a, b = prims.a[k], prims.b[k]
    ba = b - a
    L2 = np.einsum("nk,nk->n", ba, ba)
    s = np.clip(np.einsum("nk,nk->n", points - a, ba) / np.where(L2 > 0, L2, 1.0), 0, 1)
    normal = points - (a + s[:, None] * ba)
    normal /= np.maximum(np.linalg.norm(normal, axis=1, keepdims=True), 1e-12)
    local = np.einsum("nji,nj->ni", prims.frames[k], points - a)
    cells = np.floor(local / texture_cell).astype(np.int64).sum(axis=1)
    checker = (cells % 2).astype(float)
    stripes = 0.5 + 0.5 * np.cos(local[:, 2] * (2 * math.pi / (0.5 * texture_cell)))
    albedo = prims.hues[k] * (0.45 + 0.45 * checker + 0.10 * stripes)[:, None]
    shade = 0.55 + 0.45 * np.clip(normal @ LIGHT_DIR, 0.0, 1.0)
    return np.clip(albedo * shade[:, None], 0.0, 1.0)


def render_view(prims: Primitives, camera: CameraView, texture_cell: float,
                depth_noise: float = 0.0, rng=None, frame_index: int = 0) -> RGBDFrame:
    H, W = camera.height, camera.width
    vv, uu = np.mgrid[0:H, 0:W]
    pix = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(float)
    o, d = pixel_rays(camera, pix)
    t_all = ray_entry_distances(o, d, prims)
    k = np.argmin(t_all, axis=1)
    t = t_all[np.arange(len(k)), k]
    hit = np.isfinite(t)
    color = np.zeros((H * W, 3))
    depth = np.zeros(H * W)
    pts = o[hit] + t[hit, None] * d[hit]
    color[hit] = shade_hits(pts, k[hit], prims, texture_cell)
    z = (pts @ camera.R.T + camera.t)[:, 2]
    if depth_noise > 0 and rng is not None:
        z = z + rng.normal(0.0, depth_noise, size=z.shape)
    depth[hit] = np.maximum(z, 1e-3)
    return RGBDFrame(color.reshape(H, W, 3), depth.reshape(H, W), hit.reshape(H, W),
                     camera.view_id, frame_index)


def joint_occlusion(joints, camera: CameraView, prims: Primitives,
                    tolerance: float = 0.02) -> np.ndarray:
    """True where a joint is hidden from ``camera`` behind some other body part.

    A joint is visible when nothing is entered before the first capsule that
    contains the joint (minus ``tolerance``); joints outside the image count
    as occluded.
    """
    X = np.asarray(joints, float)
    C = camera.center
    diff = X - C
    rng_j = np.linalg.norm(diff, axis=1)
    d = diff / rng_j[:, None]
    t = ray_entry_distances(np.broadcast_to(C, X.shape), d, prims)
    inside = segment_distances(X, prims) <= prims.radius[None] + 1e-9
    own = np.where(inside, t, np.inf).min(axis=1)
    own = np.where(np.isfinite(own), own, rng_j)
    other = np.where(inside, np.inf, t).min(axis=1)
    occluded = other < np.minimum(own, rng_j) - tolerance
    uv, z = project_points(camera, X)
    outside = (z <= 0) | (uv[:, 0] < -0.5) | (uv[:, 0] > camera.width - 0.5) \
        | (uv[:, 1] < -0.5) | (uv[:, 1] > camera.height - 0.5)
    return occluded | outside


def detect_joints(joints, cameras, prims: Primitives, spec: SceneSpec, rng) -> list[dict]:
    """Noisy per-view 2D detections; occluded joints get confidence below the floor."""
    out = []
    for cam in cameras:
        uv, _ = project_points(cam, joints)
        noisy = uv + rng.normal(0.0, spec.detection_sigma, size=uv.shape)
        occ = joint_occlusion(joints, cam, prims)
        conf = np.where(occ, rng.uniform(0.0, spec.occlusion_floor, size=len(uv)),
                        rng.uniform(0.6, 1.0, size=len(uv)))
        if spec.occlusion_floor > 0:
            conf = np.where(occ, np.minimum(conf, spec.occlusion_floor), conf)
        else:
            conf = np.where(occ, 0.0, conf)
        out.append({"view_id": cam.view_id, "joints": noisy.tolist(),
                    "confidences": conf.tolist(), "occluded": occ.tolist()})
    return out


def synthesize_frame(spec: SceneSpec, frame_index: int, cameras=None):
    """Render one timestamp: (frames per view, ground-truth pose, detections)."""
    cameras = rig_cameras(spec) if cameras is None else cameras
    prims = scene_primitives(spec, frame_index)
    pose = motion_program_eval(spec, frame_index)
    det_rng = np.random.default_rng([spec.seed, frame_index, 0])
    depth_rng = np.random.default_rng([spec.seed, frame_index, 1])
    frames = [render_view(prims, cam, spec.texture_cell, spec.depth_sigma, depth_rng, frame_index)
              for cam in cameras]
    dets = detect_joints(pose.joints, cameras, prims, spec, det_rng)
    return frames, pose, dets


def _write_frame(args):
    from .dataset import write_frame_files

    spec_dict, root, t = args
    spec = SceneSpec.from_dict(spec_dict)
    frames, pose, dets = synthesize_frame(spec, t)
    write_frame_files(Path(root), t, frames, pose, dets)
    return t


def generate_sequence(spec: SceneSpec, out_dir, workers: int = 1) -> Path:
    """Write a full dataset; output bytes depend only on ``spec``."""
    from .dataset import write_rig_files

    spec.validate()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    write_rig_files(root, spec, rig_cameras(spec))
    jobs = [(spec.to_dict(), str(root), t) for t in range(spec.n_frames)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            list(ex.map(_write_frame, jobs))
    else:
        for job in jobs:
            _write_frame(job)
    return root


def load_spec(path) -> SceneSpec:
    return SceneSpec.from_dict(json.loads(Path(path).read_text()))
