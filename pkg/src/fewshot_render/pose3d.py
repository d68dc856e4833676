"""Multi-view skeleton triangulation and the pose-space distance used for clustering."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .scene_model import (
    JOINT_PARENTS, NUM_JOINTS, REST_JOINTS, ROOT_JOINT, CameraView, Pose3D, joint_order,
    pixel_rays, transform_pose, unproject_pixels,
)

METHODS = ("rays+depth", "rays", "depth")

# Typical distance (m) from the visible skin surface to the joint center along a
# viewing ray; median over the default synthetic performer and all rig views.
JOINT_SURFACE_DEPTH = (
    0.05, 0.13, 0.06, 0.055, 0.045, 0.06, 0.055, 0.045, 0.13, 0.095, 0.07, 0.055,
    0.095, 0.07, 0.055, 0.15, 0.15, 0.10, 0.10, 0.04, 0.03, 0.045, 0.04, 0.03, 0.045,
)


class UntriangulatableFrame(ValueError):
    """No joint in the frame is seen by enough confident views."""


@dataclass(frozen=True)
class TriangulationConfig:
    conf_threshold: float = 0.1
    min_views: int = 2
    depth_weight: float = 1.0
    method: str = "rays+depth"
    surface_depth: Optional[tuple] = JOINT_SURFACE_DEPTH

    def __post_init__(self):
        if self.min_views < 2:
            raise ValueError("min_views must be at least 2")
        if not 0 <= self.conf_threshold <= 1:
            raise ValueError("conf_threshold must be in [0, 1]")
        if self.depth_weight < 0:
            raise ValueError("depth_weight must be non-negative")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")


def _sample_depth(depth: np.ndarray, uv) -> float:
    h, w = depth.shape
    c, r = int(np.rint(uv[0])), int(np.rint(uv[1]))
    if 0 <= r < h and 0 <= c < w:
        return float(depth[r, c])
    return 0.0


def triangulate_pose(detections: Sequence[dict], depths: Optional[Sequence[np.ndarray]],
                     cameras: Sequence[CameraView], cfg: TriangulationConfig = TriangulationConfig(),
                     previous: Optional[Pose3D] = None, timestamp: int = 0) -> Pose3D:
    """Lift per-view 2D joints to one 3D skeleton.

    ``detections`` holds one record per view with ``view_id``, ``joints``
    (25 x 2 pixels) and ``confidences``. For each joint the estimate minimizes
    the confidence-weighted squared distances to the back-projected rays plus
    ``depth_weight`` times the squared distances to the points lifted from the
    depth images. Views are accumulated in view-id order so the result does
    not depend on how the inputs are ordered.
    """
    cam_by_id = {c.view_id: c for c in cameras}
    depth_by_id = {}
    if depths is not None:
        depth_by_id = {cameras[i].view_id: d for i, d in enumerate(depths)}
    dets = sorted(detections, key=lambda d: d["view_id"])

    use_rays = cfg.method in ("rays+depth", "rays")
    use_depth = cfg.method in ("rays+depth", "depth") and depths is not None
    if cfg.method == "depth" and depths is None:
        raise ValueError("depth-only triangulation needs depth images")
    w_depth = cfg.depth_weight if cfg.method == "rays+depth" else 1.0

    joints = np.zeros((NUM_JOINTS, 3))
    conf = np.zeros(NUM_JOINTS)
    solved = np.zeros(NUM_JOINTS, bool)
    for j in range(NUM_JOINTS):
        A = np.zeros((3, 3))
        b = np.zeros(3)
        used = []
        for det in dets:
            c = float(det["confidences"][j])
            if c < cfg.conf_threshold:
                continue
            cam = cam_by_id[det["view_id"]]
            uv = np.asarray(det["joints"][j], float)
            contributed = False
            if use_rays:
                o, d = pixel_rays(cam, uv[None])
                P = np.eye(3) - np.outer(d[0], d[0])
                A += c * P
                b += c * P @ o[0]
                contributed = True
            if use_depth and w_depth > 0:
                z = _sample_depth(depth_by_id[det["view_id"]], uv)
                if z > 0:
                    p = unproject_pixels(cam, uv[None], [z])[0]
                    if cfg.surface_depth is not None:
                        ray = (p - cam.center) / np.linalg.norm(p - cam.center)
                        p = p + cfg.surface_depth[j] * ray
                    A += c * w_depth * np.eye(3)
                    b += c * w_depth * p
                    contributed = True
            if contributed:
                used.append(c)
        if len(used) < cfg.min_views:
            continue
        try:
            joints[j] = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            continue
        conf[j] = float(np.mean(used))
        solved[j] = True

    if not solved.any():
        raise UntriangulatableFrame(f"frame {timestamp}: no joint seen by {cfg.min_views} views")
    _fill_missing(joints, solved, previous)
    return Pose3D(joints, conf, timestamp)


def _fill_missing(joints: np.ndarray, solved: np.ndarray, previous: Optional[Pose3D]) -> None:
    ref = REST_JOINTS if previous is None else previous.joints
    if not solved[ROOT_JOINT]:
        if previous is not None:
            joints[ROOT_JOINT] = previous.joints[ROOT_JOINT]
        else:
            idx = np.flatnonzero(solved)
            joints[ROOT_JOINT] = (joints[idx] - REST_JOINTS[idx]).mean(axis=0) + REST_JOINTS[ROOT_JOINT]
    for j in joint_order():
        p = JOINT_PARENTS[j]
        if p >= 0 and not solved[j]:
            joints[j] = joints[p] + (ref[j] - ref[p])


def triangulate_sequence(dataset, cfg: TriangulationConfig = TriangulationConfig(),
                         use_depth: bool = True, write: bool = False) -> list[Pose3D]:
    """Sequential scan over a dataset; each frame may fill from the previous one."""
    cams = dataset.cameras
    poses, prev = [], None
    for t in range(dataset.n_frames):
        depths = [dataset.depth(t, c.view_id) for c in cams] if use_depth else None
        pose = triangulate_pose(dataset.detections(t), depths, cams, cfg, prev, t)
        if write:
            dataset.write_pose_est(pose)
        poses.append(pose)
        prev = pose
    return poses


def pose_distance(a: Pose3D, b: Pose3D) -> float:
    """Sum over joints of the Euclidean distance between corresponding joints."""
    ja, jb = np.asarray(getattr(a, "joints", a)), np.asarray(getattr(b, "joints", b))
    if ja.shape != jb.shape:
        raise ValueError(f"joint count mismatch: {ja.shape} vs {jb.shape}")
    return float(np.linalg.norm(ja - jb, axis=-1).sum())


def pose_distance_matrix(x: np.ndarray, y: Optional[np.ndarray] = None) -> np.ndarray:
    """Pairwise pose distances between stacks of joint arrays (T, V, 3)."""
    y = x if y is None else y
    out = np.empty((len(x), len(y)))
    for i in range(len(x)):
        out[i] = np.linalg.norm(y - x[i][None], axis=-1).sum(axis=-1)
    return out


def assign_identities(previous: Sequence[Pose3D], current: Sequence[Pose3D]) -> list[Pose3D]:
    """Reorder ``current`` people to match ``previous`` by nearest joint centroid.

    Pairs are taken greedily in order of increasing centroid distance; ties go
    to the lower previous index, then the lower current index.
    """
    if len(previous) != len(current):
        raise ValueError("person count changed between timestamps")
    pc = [p.joints.mean(axis=0) for p in previous]
    cc = [c.joints.mean(axis=0) for c in current]
    pairs = sorted((float(np.linalg.norm(pc[i] - cc[k])), i, k)
                   for i in range(len(pc)) for k in range(len(cc)))
    taken_p, taken_c, match = set(), set(), {}
    for _, i, k in pairs:
        if i in taken_p or k in taken_c:
            continue
        match[i] = k
        taken_p.add(i)
        taken_c.add(k)
    return [current[match[i]] for i in range(len(previous))]


def concat_multi_person(poses: Sequence[Pose3D]) -> Pose3D:
    """Stack the people of one timestamp into a single pose with 25 * P joints."""
    if not poses:
        raise ValueError("need at least one person")
    ts = {p.timestamp for p in poses}
    if len(ts) != 1:
        raise ValueError("all people must share a timestamp")
    joints = np.concatenate([p.joints for p in poses])
    conf = np.concatenate([p.confidences for p in poses])
    return Pose3D(joints, conf, poses[0].timestamp, sum(p.n_people for p in poses))


def normalized_stack(poses: Sequence[Pose3D]) -> np.ndarray:
    """(T, V, 3) root-aligned joint arrays for clustering."""
    return np.stack([transform_pose(p).joints for p in poses])
