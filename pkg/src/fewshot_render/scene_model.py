"""Cameras, poses, RGBD frames and point clouds shared by every pipeline stage.

World units are meters. Pixel (0, 0) is the center of the top-left pixel,
+u points right and +v points down. A world point ``X`` maps to camera
coordinates as ``R @ X + t``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

NUM_JOINTS = 25
ROOT_JOINT = 8  # MidHip

# 25-joint body layout (OpenPose BODY_25 ordering).
JOINT_NAMES = (
    "Nose", "Neck", "RShoulder", "RElbow", "RWrist", "LShoulder", "LElbow",
    "LWrist", "MidHip", "RHip", "RKnee", "RAnkle", "LHip", "LKnee", "LAnkle",
    "REye", "LEye", "REar", "LEar", "LBigToe", "LSmallToe", "LHeel",
    "RBigToe", "RSmallToe", "RHeel",
)

JOINT_PARENTS = (
    1, 8, 1, 2, 3, 1, 5, 6, -1, 8, 9, 10, 8, 12, 13,
    0, 0, 15, 16, 14, 14, 14, 11, 11, 11,
)

# T-pose joint table, z up, performer facing +y, performer's right towards -x.
REST_JOINTS = np.array([
    [0.000, 0.090, 1.600],   # Nose
    [0.000, 0.000, 1.450],   # Neck
    [-0.180, 0.000, 1.430],  # RShoulder
    [-0.460, 0.000, 1.430],  # RElbow
    [-0.720, 0.000, 1.430],  # RWrist
    [0.180, 0.000, 1.430],   # LShoulder
    [0.460, 0.000, 1.430],   # LElbow
    [0.720, 0.000, 1.430],   # LWrist
    [0.000, 0.000, 0.950],   # MidHip
    [-0.100, 0.000, 0.930],  # RHip
    [-0.100, 0.000, 0.520],  # RKnee
    [-0.100, 0.000, 0.100],  # RAnkle
    [0.100, 0.000, 0.930],   # LHip
    [0.100, 0.000, 0.520],   # LKnee
    [0.100, 0.000, 0.100],   # LAnkle
    [-0.035, 0.075, 1.650],  # REye
    [0.035, 0.075, 1.650],   # LEye
    [-0.080, 0.000, 1.630],  # REar
    [0.080, 0.000, 1.630],   # LEar
    [0.120, 0.170, 0.030],   # LBigToe
    [0.170, 0.140, 0.030],   # LSmallToe
    [0.100, -0.060, 0.030],  # LHeel
    [-0.120, 0.170, 0.030],  # RBigToe
    [-0.170, 0.140, 0.030],  # RSmallToe
    [-0.100, -0.060, 0.030],  # RHeel
])


def joint_order() -> list[int]:
    """Joint indices ordered so that every parent precedes its children."""
    order, seen = [], set()

    def visit(j):
        if j in seen:
            return
        p = JOINT_PARENTS[j]
        if p >= 0:
            visit(p)
        seen.add(j)
        order.append(j)

    for j in range(NUM_JOINTS):
        visit(j)
    return order


class BehindCameraError(ValueError):
    """Raised when a point projects with non-positive camera-frame depth."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CameraView:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray
    t: np.ndarray
    view_id: int = 0

    def __post_init__(self):
        R = _frozen(np.reshape(self.R, (3, 3)))
        t = _frozen(np.reshape(self.t, (3,)))
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "view_id", int(self.view_id))
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-6 or np.linalg.det(R) <= 0:
            raise ValueError("camera rotation must be orthonormal with det +1")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def to_dict(self) -> dict:
        return {
            "view_id": self.view_id,
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": self.width, "height": self.height,
            "R": [float(v) for v in self.R.reshape(-1)],
            "t": [float(v) for v in self.t],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraView":
        return cls(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                   width=d["width"], height=d["height"],
                   R=np.reshape(d["R"], (3, 3)), t=d["t"], view_id=d["view_id"])

    def replace(self, **kw) -> "CameraView":
        d = dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width,
                 height=self.height, R=self.R, t=self.t, view_id=self.view_id)
        d.update(kw)
        return CameraView(**d)


def look_at_camera(eye, target, up=(0.0, 0.0, 1.0), *, focal: float, width: int,
                   height: int, view_id: int = 0) -> CameraView:
    """Pinhole camera at ``eye`` looking at ``target`` with square pixels."""
    eye = np.asarray(eye, float)
    z = np.asarray(target, float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, float))
    if np.linalg.norm(x) < 1e-9:
        raise ValueError("up vector parallel to viewing direction")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)  # image +v is world-down for an upright camera
    R = np.stack([x, y, z])
    return CameraView(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height,
                      R, -R @ eye, view_id)


def save_cameras(path, cameras: Sequence[CameraView]) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


def load_cameras(path) -> list[CameraView]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data.get("cameras", [data])
    return [CameraView.from_dict(d) for d in data]


def project_point(camera: CameraView, point) -> tuple[np.ndarray, float]:
    p = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    xc = camera.R @ p + camera.t
    z = float(xc[2])
    if z <= 0:
        raise BehindCameraError(f"point is behind the camera (z={z:.4g})")
    uv = np.array([camera.fx * xc[0] / z + camera.cx, camera.fy * xc[1] / z + camera.cy])
    return uv, z


def project_points(camera: CameraView, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Entries with ``z <= 0`` have undefined pixels."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    xc = pts @ camera.R.T + camera.t
    z = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * xc[:, 0] / z + camera.cx
        v = camera.fy * xc[:, 1] / z + camera.cy
    return np.stack([u, v], axis=1), z


def unproject_pixel(camera: CameraView, pixel, depth: float) -> np.ndarray:
    if not depth > 0:
        raise ValueError("depth must be positive")
    u, v = float(pixel[0]), float(pixel[1])
    xc = np.array([(u - camera.cx) * depth / camera.fx, (v - camera.cy) * depth / camera.fy, depth])
    return camera.R.T @ (xc - camera.t)


def unproject_pixels(camera: CameraView, pixels, depths) -> np.ndarray:
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    z = np.asarray(depths, dtype=np.float64).reshape(-1)
    if np.any(z <= 0):
        raise ValueError("depth must be positive")
    xc = np.stack([(pix[:, 0] - camera.cx) * z / camera.fx,
                   (pix[:, 1] - camera.cy) * z / camera.fy, z], axis=1)
    return (xc - camera.t) @ camera.R


def pixel_rays(camera: CameraView, pixels) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray origins and unit directions through the given pixels."""
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d = np.stack([(pix[:, 0] - camera.cx) / camera.fx,
                  (pix[:, 1] - camera.cy) / camera.fy, np.ones(len(pix))], axis=1) @ camera.R
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.broadcast_to(camera.center, d.shape).copy(), d


@dataclass(frozen=True)
class Pose3D:
    joints: np.ndarray
    confidences: np.ndarray
    timestamp: int = 0
    n_people: int = 1

    def __post_init__(self):
        j = _frozen(self.joints)
        c = _frozen(self.confidences)
        if j.shape != (NUM_JOINTS * self.n_people, 3):
            raise ValueError(f"expected {NUM_JOINTS * self.n_people} joints, got {j.shape}")
        if c.shape != (len(j),):
            raise ValueError("one confidence per joint required")
        object.__setattr__(self, "joints", j)
        object.__setattr__(self, "confidences", c)

    @property
    def root(self) -> np.ndarray:
        return self.joints[ROOT_JOINT]

    def to_dict(self) -> dict:
        return {"timestamp": int(self.timestamp), "n_people": self.n_people,
                "joints": self.joints.tolist(), "confidences": self.confidences.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose3D":
        return cls(np.array(d["joints"]), np.array(d["confidences"]),
                   int(d.get("timestamp", 0)), int(d.get("n_people", 1)))


def transform_pose(pose: Pose3D) -> Pose3D:
    """Translate every person so that its root joint sits at the origin."""
    j = pose.joints.reshape(pose.n_people, NUM_JOINTS, 3)
    j = j - j[:, ROOT_JOINT:ROOT_JOINT + 1]
    return Pose3D(j.reshape(-1, 3), pose.confidences, pose.timestamp, pose.n_people)


normalize_pose = transform_pose


@dataclass(frozen=True)
class RGBDFrame:
    color: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    view_id: int = 0
    frame_index: int = 0

    def __post_init__(self):
        color = _frozen(self.color, np.float32)
        depth = _frozen(self.depth, np.float64)
        mask = _frozen(self.mask, bool)
        if color.ndim != 3 or color.shape[2] != 3 or depth.shape != color.shape[:2] \
                or mask.shape != depth.shape:
            raise ValueError("color must be HxWx3 and depth/mask HxW")
        if np.any(depth < 0):
            raise ValueError("depth must be non-negative")
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "mask", mask)


@dataclass(frozen=True)
class TexturedPointCloud:
    positions: np.ndarray
    colors: np.ndarray
    features: Optional[np.ndarray] = None
    frame_index: int = 0
    normals: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        p = _frozen(np.reshape(self.positions, (-1, 3)))
        c = _frozen(np.reshape(self.colors, (-1, 3)), np.float32)
        if len(p) != len(c):
            raise ValueError("positions and colors must align")
        if not np.all(np.isfinite(p)):
            raise ValueError("positions must be finite")
        if len(c) and (c.min() < 0 or c.max() > 1):
            raise ValueError("colors must lie in [0, 1]")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "colors", c)
        if self.features is not None:
            object.__setattr__(self, "features", _frozen(self.features, np.float32))
        if self.normals is not None:
            object.__setattr__(self, "normals", _frozen(self.normals))

    def __len__(self):
        return len(self.positions)

    def subset(self, index) -> "TexturedPointCloud":
        f = None if self.features is None else self.features[index]
        n = None if self.normals is None else self.normals[index]
        return TexturedPointCloud(self.positions[index], self.colors[index], f,
                                  self.frame_index, n)
