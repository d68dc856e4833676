"""On-disk dataset layout.

::

    root/spec.json                       scene description used to generate the data
    root/cameras/view{i}.json            one calibration record per view
    root/frames/{t:06}/view{i}_color.png 8-bit RGB
    root/frames/{t:06}/view{i}_depth.png 16-bit depth in millimeters (0 = invalid)
    root/frames/{t:06}/view{i}_mask.png  8-bit 0/255 foreground
    root/frames/{t:06}/pose_gt.json      ground-truth skeleton
    root/frames/{t:06}/detections.json   per-view 2D joints + confidences
    root/frames/{t:06}/pose_est.json     triangulated skeleton (written later)
    root/keyframes.json                  selected key-frames
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .scene_model import CameraView, Pose3D, RGBDFrame


class DataError(RuntimeError):
    """Missing or malformed dataset content."""


def frame_dir(root, t: int) -> Path:
    return Path(root) / "frames" / f"{t:06d}"


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_png_rgb(path, color: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(color) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, "RGB").save(path, optimize=False)


def read_png_rgb(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def depth_to_mm(depth: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(depth) * 1000.0), 0, 65535).astype(np.uint16)


def write_rig_files(root: Path, spec, cameras) -> None:
    (root / "cameras").mkdir(parents=True, exist_ok=True)
    dump_json(root / "spec.json", spec.to_dict())
    for cam in cameras:
        dump_json(root / "cameras" / f"view{cam.view_id}.json", cam.to_dict())


def write_frame_files(root: Path, t: int, frames, pose: Pose3D, detections) -> None:
    d = frame_dir(root, t)
    d.mkdir(parents=True, exist_ok=True)
    for fr in frames:
        i = fr.view_id
        write_png_rgb(d / f"view{i}_color.png", fr.color)
        Image.fromarray(depth_to_mm(fr.depth)).save(d / f"view{i}_depth.png", optimize=False)
        Image.fromarray((fr.mask.astype(np.uint8) * 255), "L").save(d / f"view{i}_mask.png",
                                                                   optimize=False)
    dump_json(d / "pose_gt.json", pose.to_dict())
    dump_json(d / "detections.json", {"timestamp": t, "views": detections})


class Dataset:
    """Read access to a generated dataset.

    Every ground-truth image read is recorded in ``reads`` as
    ``(kind, frame, view)`` so callers can audit which frames were touched.
    """

    def __init__(self, root):
        self.root = Path(root)
        if not (self.root / "cameras").is_dir():
            raise DataError(f"{self.root} has no cameras/ directory")
        self.reads: list[tuple[str, int, int]] = []
        self._cameras: Optional[list[CameraView]] = None

    @property
    def cameras(self) -> list[CameraView]:
        if self._cameras is None:
            files = sorted((self.root / "cameras").glob("view*.json"),
                           key=lambda p: int(p.stem[4:]))
            if not files:
                raise DataError("no camera calibration files")
            self._cameras = [CameraView.from_dict(json.loads(f.read_text())) for f in files]
        return self._cameras

    @property
    def n_frames(self) -> int:
        return len([p for p in (self.root / "frames").iterdir() if p.is_dir()])

    @property
    def spec(self) -> dict:
        p = self.root / "spec.json"
        return json.loads(p.read_text()) if p.exists() else {}

    def _path(self, t: int, name: str) -> Path:
        p = frame_dir(self.root, t) / name
        if not p.exists():
            raise DataError(f"missing {p}")
        return p

    def color(self, t: int, view: int) -> np.ndarray:
        self.reads.append(("color", t, view))
        return read_png_rgb(self._path(t, f"view{view}_color.png"))

    def depth(self, t: int, view: int) -> np.ndarray:
        self.reads.append(("depth", t, view))
        mm = np.asarray(Image.open(self._path(t, f"view{view}_depth.png")))
        return mm.astype(np.float64) / 1000.0

    def mask(self, t: int, view: int) -> np.ndarray:
        self.reads.append(("mask", t, view))
        return np.asarray(Image.open(self._path(t, f"view{view}_mask.png"))) > 127

    def frame(self, t: int, view: int) -> RGBDFrame:
        return RGBDFrame(self.color(t, view), self.depth(t, view), self.mask(t, view), view, t)

    def frames(self, t: int) -> list[RGBDFrame]:
        return [self.frame(t, c.view_id) for c in self.cameras]

    def pose_gt(self, t: int) -> Pose3D:
        return Pose3D.from_dict(json.loads(self._path(t, "pose_gt.json").read_text()))

    def pose_est(self, t: int) -> Pose3D:
        return Pose3D.from_dict(json.loads(self._path(t, "pose_est.json").read_text()))

    def has_pose_est(self, t: int) -> bool:
        return (frame_dir(self.root, t) / "pose_est.json").exists()

    def detections(self, t: int) -> list[dict]:
        return json.loads(self._path(t, "detections.json").read_text())["views"]

    def write_pose_est(self, pose: Pose3D) -> None:
        dump_json(frame_dir(self.root, pose.timestamp) / "pose_est.json", pose.to_dict())

    def frames_read(self, kinds=("color", "mask")) -> set[int]:
        return {t for k, t, _ in self.reads if k in kinds}
