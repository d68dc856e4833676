"""Graphics texturing branch: depth fusion into a colored point proxy and its z-buffered render."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .scene_model import CameraView, RGBDFrame, TexturedPointCloud, project_points, unproject_pixels

VOXEL_SIZE = 0.005
SPLAT_RADIUS = 0.004
CULL_COS = 0.2  # skip splats whose normal is within ~78 degrees of grazing or back-facing


class EmptyFusion(ValueError):
    """No foreground pixel with valid depth in any view."""


def estimate_normals(points: np.ndarray, k: int = 16) -> np.ndarray:
    """Unoriented normals from PCA over the ``k`` nearest neighbors."""
    n = len(points)
    if n < 3:
        out = np.zeros((n, 3))
        out[:, 2] = 1.0
        return out
    k = min(k, n)
    _, idx = cKDTree(points).query(points, k=k)
    nb = points[idx] - points[idx].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def _voxel_merge(points, colors, views, voxel):
    keys = np.floor(points / voxel).astype(np.int64)
    # lexsort: last key is primary; points are already in canonical (view, pixel) order
    order = np.lexsort((np.arange(len(keys)), keys[:, 2], keys[:, 1], keys[:, 0]))
    k = keys[order]
    start = np.ones(len(k), bool)
    start[1:] = np.any(k[1:] != k[:-1], axis=1)
    group = np.cumsum(start) - 1
    counts = np.bincount(group)
    pos = np.zeros((group[-1] + 1, 3))
    col = np.zeros((group[-1] + 1, 3))
    np.add.at(pos, group, points[order])
    np.add.at(col, group, colors[order])
    first = np.flatnonzero(start)
    return pos / counts[:, None], col / counts[:, None], views[order][first]


def fuse_frame(frames: Sequence[RGBDFrame], cameras: Sequence[CameraView],
               voxel: float = VOXEL_SIZE, normal_k: int = 16, mosaic: bool = True,
               depth_tolerance: float = 0.02) -> TexturedPointCloud:
    """Union of all back-projected foreground pixels, voxel-deduplicated and mosaic-colored."""
    cam_by_id = {c.view_id: c for c in cameras}
    frames = sorted(frames, key=lambda f: f.view_id)
    pts, cols, views = [], [], []
    for fr in frames:
        cam = cam_by_id[fr.view_id]
        valid = fr.mask & (fr.depth > 0)
        rows, cols_ = np.nonzero(valid)
        if len(rows) == 0:
            continue
        pix = np.stack([cols_, rows], axis=1).astype(float)
        pts.append(unproject_pixels(cam, pix, fr.depth[rows, cols_]))
        cols.append(fr.color[rows, cols_].astype(np.float64))
        views.append(np.full(len(rows), fr.view_id))
    if not pts:
        raise EmptyFusion("no foreground pixels with depth in any view")
    points = np.concatenate(pts)
    colors = np.concatenate(cols)
    source = np.concatenate(views)
    if voxel > 0:
        points, colors, source = _voxel_merge(points, colors, source, voxel)

    normals = estimate_normals(points, normal_k)
    centers = np.stack([cam_by_id[v].center for v in source])
    flip = np.einsum("nk,nk->n", normals, centers - points) < 0
    normals[flip] *= -1
    if mosaic and len(frames) > 1:
        colors = mosaic_colors(points, normals, colors, frames, cam_by_id, depth_tolerance)
    frame_index = frames[0].frame_index
    return TexturedPointCloud(points, np.clip(colors, 0, 1), None, frame_index, normals)


def mosaic_colors(points, normals, fallback, frames, cam_by_id, depth_tolerance=0.02):
    """Blend each point's color over the views that see it.

    Weight per view is cos(angle between normal and direction to camera) / z^2;
    a view sees a point if it projects onto a foreground pixel whose depth
    agrees within ``depth_tolerance``.
    """
    acc = np.zeros_like(points)
    wsum = np.zeros(len(points))
    for fr in frames:
        cam = cam_by_id[fr.view_id]
        uv, z = project_points(cam, points)
        ok = z > 0
        c = np.where(ok, np.rint(uv[:, 0]), -1).astype(np.int64)
        r = np.where(ok, np.rint(uv[:, 1]), -1).astype(np.int64)
        ok &= (c >= 0) & (c < cam.width) & (r >= 0) & (r < cam.height)
        idx = np.flatnonzero(ok)
        rr, cc = r[idx], c[idx]
        seen = fr.mask[rr, cc] & (np.abs(fr.depth[rr, cc] - z[idx]) < depth_tolerance)
        idx, rr, cc = idx[seen], rr[seen], cc[seen]
        to_cam = cam.center[None] - points[idx]
        to_cam /= np.linalg.norm(to_cam, axis=1, keepdims=True)
        cos = np.clip(np.einsum("nk,nk->n", normals[idx], to_cam), 0.0, 1.0)
        w = cos / z[idx] ** 2
        acc[idx] += w[:, None] * fr.color[rr, cc]
        wsum[idx] += w
    out = np.array(fallback, dtype=np.float64, copy=True)
    has = wsum > 0
    out[has] = acc[has] / wsum[has, None]
    return out


def zbuffer(pixels_rc: np.ndarray, depth: np.ndarray, point_index: np.ndarray, n_pixels: int):
    """Resolve per-pixel winners: nearest depth, ties to the lowest point index.

    ``pixels_rc`` holds flat pixel ids. Returns (winning flat pixel ids,
    winning point indices).
    """
    order = np.lexsort((point_index, depth, pixels_rc))
    pix = pixels_rc[order]
    first = np.ones(len(pix), bool)
    first[1:] = pix[1:] != pix[:-1]
    return pix[first], point_index[order][first]


def splat_footprints(camera: CameraView, positions: np.ndarray, radius: float = SPLAT_RADIUS):
    """Candidate (flat pixel, depth, point index) triples for disk splats of world radius ``radius``."""
    uv, z = project_points(camera, positions)
    keep = np.flatnonzero(z > 0)
    uv, z = uv[keep], z[keep]
    rad_px = radius * camera.fx / z
    r_max = int(np.ceil(np.max(rad_px))) if len(z) else 0
    cu, cv = np.rint(uv[:, 0]).astype(np.int64), np.rint(uv[:, 1]).astype(np.int64)
    flat, dep, idx = [], [], []
    for dv in range(-r_max, r_max + 1):
        for du in range(-r_max, r_max + 1):
            pu, pv = cu + du, cv + dv
            if du == 0 and dv == 0:
                m = np.ones(len(z), bool)
            else:
                m = (pu - uv[:, 0]) ** 2 + (pv - uv[:, 1]) ** 2 <= rad_px ** 2
            m &= (pu >= 0) & (pu < camera.width) & (pv >= 0) & (pv < camera.height)
            flat.append(pv[m] * camera.width + pu[m])
            dep.append(z[m])
            idx.append(keep[m])
    return np.concatenate(flat), np.concatenate(dep), np.concatenate(idx)


def facing_points(proxy: TexturedPointCloud, target: CameraView, cull_cos: float = CULL_COS):
    """Indices of points whose normal faces ``target`` by more than ``cull_cos``."""
    if proxy.normals is None or cull_cos is None:
        return np.arange(len(proxy))
    v = target.center[None] - proxy.positions
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    return np.flatnonzero(np.einsum("nk,nk->n", proxy.normals, v) > cull_cos)


def render_textured(proxy: TexturedPointCloud, target: CameraView, radius: float = SPLAT_RADIUS,
                    cull_cos: float = CULL_COS):
    """Z-buffered splat render of the colored proxy: (I_tex HxWx3, M_tex HxW, D_tex HxW).

    Points carrying normals are back-face and grazing-angle culled first.
    """
    H, W = target.height, target.width
    image = np.zeros((H * W, 3), np.float32)
    mask = np.zeros(H * W, bool)
    depth = np.zeros(H * W)
    keep = facing_points(proxy, target, cull_cos)
    if len(keep):
        flat, dep, sub = splat_footprints(target, proxy.positions[keep], radius)
        idx = keep[sub]
        if len(flat):
            pix, win = zbuffer(flat, dep, idx, H * W)
            image[pix] = proxy.colors[win]
            mask[pix] = True
            _, z = project_points(target, proxy.positions[win])
            depth[pix] = z
    return image.reshape(H, W, 3), mask.reshape(H, W), depth.reshape(H, W)


def save_ply(path, cloud: TexturedPointCloud) -> None:
    rgb = np.clip(np.round(cloud.colors * 255), 0, 255).astype(int)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    lines += [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}"
              for p, c in zip(cloud.positions, rgb)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_ply(path, frame_index: int = 0) -> TexturedPointCloud:
    text = Path(path).read_text().splitlines()
    n = next(int(l.split()[-1]) for l in text if l.startswith("element vertex"))
    body = text[text.index("end_header") + 1:][:n]
    arr = np.array([l.split() for l in body], dtype=np.float64).reshape(n, 6)
    return TexturedPointCloud(arr[:, :3], arr[:, 3:] / 255.0, None, frame_index)
