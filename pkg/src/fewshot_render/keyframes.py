"""Pose-guided key-frame selection.

K-means in pose space where, after every mean update, each center is snapped
to the member frame whose pose is nearest to the numerical mean. Centers are
therefore always actual frames of the sequence.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .pose3d import normalized_stack, pose_distance_matrix


@dataclass(frozen=True)
class KeyframeSet:
    indices: tuple
    k: int
    iterations: int = 0
    cost: float = 0.0
    method: str = "pose"
    seed: int = 0
    labels: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx) or list(idx) != sorted(idx):
            raise ValueError("key-frame indices must be sorted and unique")
        object.__setattr__(self, "indices", idx)

    def to_dict(self) -> dict:
        return {"k": self.k, "indices": list(self.indices), "method": self.method,
                "seed": self.seed, "iterations": self.iterations, "cost": self.cost}

    @classmethod
    def from_dict(cls, d: dict) -> "KeyframeSet":
        return cls(tuple(d["indices"]), int(d["k"]), int(d.get("iterations", 0)),
                   float(d.get("cost", 0.0)), d.get("method", "pose"), int(d.get("seed", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "KeyframeSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_k(n_frames: int) -> int:
    return min(n_frames, max(2, math.ceil(0.04 * n_frames)))


def _as_stack(poses) -> np.ndarray:
    if isinstance(poses, np.ndarray):
        return poses.reshape(len(poses), -1, 3)
    return normalized_stack(poses)


def _seed_centers(D: np.ndarray, k: int, rng) -> list[int]:
    n = len(D)
    centers = [int(rng.integers(n))]
    while len(centers) < k:
        d2 = D[:, centers].min(axis=1) ** 2
        d2[centers] = 0.0
        total = d2.sum()
        if total <= 0:
            rest = [i for i in range(n) if i not in centers]
            centers.append(rest[0])
            continue
        centers.append(int(rng.choice(n, p=d2 / total)))
    return centers


def _snap(X: np.ndarray, members: np.ndarray) -> int:
    mean = X[members].mean(axis=0)
    d = np.linalg.norm(X[members] - mean[None], axis=-1).sum(axis=-1)
    return int(members[np.argmin(d)])  # argmin picks the lowest index on ties


def select_keyframes(poses, k: int, seed: int = 0, max_iter: int = 100) -> KeyframeSet:
    """Cluster ``poses`` (root-normalized) into ``k`` frame-snapped centers."""
    X = _as_stack(poses)
    n = len(X)
    if n == 0:
        raise ValueError("empty sequence")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    D = pose_distance_matrix(X)
    rng = np.random.default_rng(seed)
    centers = _seed_centers(D, k, rng)

    seen = set()
    best = None
    it = 0
    for it in range(1, max_iter + 1):
        labels = np.argmin(D[:, centers], axis=1)
        for c in range(k):
            if not np.any(labels == c):
                # Re-seed an emptied cluster at the frame farthest from all centers.
                far = D[:, centers].min(axis=1)
                far[centers] = -1.0
                if far.max() > 0:
                    centers[c] = int(np.argmax(far))
                    labels = np.argmin(D[:, centers], axis=1)
        # Clusters are disjoint and snapping stays inside a cluster, so centers stay unique.
        new_centers = []
        for c in range(k):
            members = np.flatnonzero(labels == c)
            new_centers.append(_snap(X, members) if len(members) else centers[c])
        cost = float(D[:, new_centers].min(axis=1).sum())
        key = tuple(sorted(new_centers))
        if best is None or cost < best[0] - 1e-12:
            best = (cost, list(new_centers), labels.copy())
        if key in seen:
            break
        seen.add(key)
        centers = new_centers

    cost, centers, labels = best
    order = np.argsort(centers)
    remap = np.empty(k, int)
    remap[order] = np.arange(k)
    return KeyframeSet(tuple(sorted(centers)), k, it, cost, "pose", seed,
                       tuple(int(remap[l]) for l in labels))


def select_random(n_frames: int, k: int, seed: int = 0) -> KeyframeSet:
    if not 1 <= k <= n_frames:
        raise ValueError(f"k must be in [1, {n_frames}], got {k}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n_frames, size=k, replace=False))
    return KeyframeSet(tuple(int(i) for i in idx), k, 0, 0.0, "random", seed)


def coverage_radius(keyframes, poses) -> float:
    """Largest distance from any frame to its nearest key-frame."""
    X = _as_stack(poses)
    idx = list(getattr(keyframes, "indices", keyframes))
    if not idx:
        raise ValueError("no key-frames")
    return float(pose_distance_matrix(X, X[idx]).min(axis=1).max())


def within_cluster_cost(keyframes, poses) -> float:
    X = _as_stack(poses)
    idx = list(getattr(keyframes, "indices", keyframes))
    return float(pose_distance_matrix(X, X[idx]).min(axis=1).sum())


def snap_violations(ks: KeyframeSet, poses) -> list[int]:
    """Clusters whose center is not the member nearest the cluster mean."""
    X = _as_stack(poses)
    labels = np.asarray(ks.labels)
    bad = []
    for c, center in enumerate(ks.indices):
        members = np.flatnonzero(labels == c)
        if len(members) == 0:
            continue
        mean = X[members].mean(axis=0)
        d = np.linalg.norm(X[members] - mean[None], axis=-1).sum(axis=-1)
        if center not in members or np.any(d < d[members == center][0]):
            bad.append(c)
    return bad
