import hashlib

import numpy as np
import pytest

from fewshot_render.dataset import Dataset
from fewshot_render.scene_model import REST_JOINTS, project_points, unproject_pixels
from fewshot_render.synth_rig import (
    SceneSpec, detect_joints, forward_kinematics, generate_sequence, joint_occlusion,
    motion_program_eval, render_view, rig_cameras, scene_primitives, surface_distance,
    synthesize_frame,
)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_frame0_is_rest_pose():
    spec = SceneSpec()
    pose = motion_program_eval(spec, 0)
    assert np.allclose(pose.joints, REST_JOINTS, atol=1e-12)
    assert np.all(pose.confidences == 1.0)


def test_smoothness_bound():
    spec = SceneSpec()
    X = np.stack([forward_kinematics(spec, t)[0] for t in range(spec.period + 1)])
    step = np.linalg.norm(np.diff(X, axis=0), axis=2)
    assert step.max() < 0.05


def test_periodicity():
    spec = SceneSpec(n_frames=200, period=50)
    for t in (0, 7, 33):
        assert np.array_equal(motion_program_eval(spec, t).joints,
                              motion_program_eval(spec, t + 50).joints)


def test_index_out_of_range():
    with pytest.raises(IndexError):
        motion_program_eval(SceneSpec(n_frames=10), 10)


def test_invalid_spec():
    with pytest.raises(ValueError):
        SceneSpec(n_frames=0).validate()
    with pytest.raises(ValueError):
        SceneSpec(n_views=0).validate()


def test_ring_cameras_face_center():
    spec = SceneSpec()
    cams = rig_cameras(spec)
    assert len(cams) == 6
    for c in cams:
        assert abs(c.center[2] - spec.rig_height) < 1e-12
        assert abs(np.hypot(*c.center[:2]) - spec.rig_radius) < 1e-12
        uv, z = project_points(c, [spec.look_at])
        assert np.allclose(uv[0], [c.cx, c.cy], atol=1e-9) and z[0] > 0


def test_depth_points_on_surface():
    spec = SceneSpec(image_size=64)
    frames, _, _ = synthesize_frame(spec, 13)
    prims = scene_primitives(spec, 13)
    for fr, cam in zip(frames, rig_cameras(spec)):
        r, c = np.nonzero(fr.mask)
        assert np.all(fr.depth[fr.mask] > 0) and np.all(fr.depth[~fr.mask] == 0)
        pts = unproject_pixels(cam, np.stack([c, r], 1), fr.depth[r, c])
        assert surface_distance(pts, prims).max() < 0.01


def test_mask_is_nearest_surface_hit():
    spec = SceneSpec(image_size=32)
    prims = scene_primitives(spec, 0)
    cam = rig_cameras(spec)[0]
    fr = render_view(prims, cam, spec.texture_cell)
    from fewshot_render.scene_model import pixel_rays
    from fewshot_render.synth_rig import ray_entry_distances
    vv, uu = np.mgrid[0:32, 0:32]
    o, d = pixel_rays(cam, np.stack([uu.ravel(), vv.ravel()], 1))
    hit = np.isfinite(ray_entry_distances(o, d, prims).min(axis=1))
    assert np.array_equal(hit.reshape(32, 32), fr.mask)


def test_occluded_joints_have_low_confidence():
    spec = SceneSpec(image_size=64)
    cams = rig_cameras(spec)
    n_occ = 0
    for t in (0, 20, 45):
        pose = motion_program_eval(spec, t)
        prims = scene_primitives(spec, t)
        dets = detect_joints(pose.joints, cams, prims, spec, np.random.default_rng(t))
        for cam, det in zip(cams, dets):
            occ = joint_occlusion(pose.joints, cam, prims)
            conf = np.array(det["confidences"])
            assert np.all(conf[occ] <= spec.occlusion_floor)
            assert np.all(conf[~occ] >= 0.6)
            n_occ += occ.sum()
    assert n_occ > 0  # the side views do hide some joints


def test_detection_noise_is_centered():
    spec = SceneSpec(image_size=128)
    cams = rig_cameras(spec)
    pose = motion_program_eval(spec, 5)
    prims = scene_primitives(spec, 5)
    rng = np.random.default_rng(0)
    acc = np.zeros((6, 25, 2))
    n = 1000
    for _ in range(n):
        dets = detect_joints(pose.joints, cams, prims, spec, rng)
        acc += np.array([d["joints"] for d in dets])
    mean = acc / n
    for cam, m in zip(cams, mean):
        uv, _ = project_points(cam, pose.joints)
        assert np.abs(m - uv).max() < 4 * spec.detection_sigma / np.sqrt(n)


def test_generation_deterministic(tmp_path):
    spec = SceneSpec(n_frames=3, image_size=32, topology_event=True, pickup_frame=1)
    a = generate_sequence(spec, tmp_path / "a")
    b = generate_sequence(spec, tmp_path / "b")
    c = generate_sequence(spec, tmp_path / "c", workers=2)
    assert tree_digest(a) == tree_digest(b) == tree_digest(c)
    ds = Dataset(a)
    assert ds.n_frames == 3 and len(ds.cameras) == 6
    assert ds.color(0, 0).shape == (32, 32, 3)


def test_topology_event_moves_prop():
    spec = SceneSpec(topology_event=True, pickup_frame=40)
    before = scene_primitives(spec, 39)
    after = scene_primitives(spec, 60)
    assert before.is_prop[-1] and after.is_prop[-1]
    X, _ = forward_kinematics(spec, 60)
    assert np.linalg.norm(after.a[-1] - X[4]) < 0.2
    assert np.linalg.norm(before.a[-1] - X[4]) > 0.2
