import numpy as np
import pytest

from fewshot_render.scene_model import CameraView, look_at_camera
from fewshot_render.synth_rig import SceneSpec, generate_sequence


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_camera(rng, size=64):
    return CameraView(rng.uniform(50, 150), rng.uniform(50, 150), rng.uniform(10, size - 10),
                      rng.uniform(10, size - 10), size, size, random_rotation(rng),
                      rng.normal(size=3), 0)


def identity_camera(f=100.0, c=64.0, size=128):
    return CameraView(f, f, c, c, size, size, np.eye(3), np.zeros(3), 0)


@pytest.fixture(scope="session")
def small_spec():
    return SceneSpec(n_frames=6, image_size=64)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory, small_spec):
    root = tmp_path_factory.mktemp("data64")
    generate_sequence(small_spec, root)
    return root


@pytest.fixture
def front_camera():
    return look_at_camera((0, 3, 1), (0, 0, 0.9), focal=80, width=32, height=32)


def cyclic_clusters(seed, sizes=(70, 60, 70)):
    """Three well-separated pose clusters, each a looping motion with slight jitter."""
    rng = np.random.default_rng(seed)
    out = []
    for n in sizes:
        center = rng.normal(size=(25, 3)) * 2
        a1, a2 = rng.normal(size=(2, 25, 3)) * 0.3
        ph = np.linspace(0, 2 * np.pi, n, endpoint=False)[:, None, None]
        out.append(center + a1 * np.sin(ph) + a2 * np.sin(2 * ph) + rng.normal(0, 0.005, (n, 25, 3)))
    return np.concatenate(out)


def tiny_train_config(**kw):
    from fewshot_render.neural_render import NetConfig
    from fewshot_render.trainer import TrainConfig

    net = NetConfig(feature_dim=8, sa_points=(64, 16), render_levels=3, render_base=8,
                    fuse_levels=3, fuse_base=4)
    base = dict(net=net, disc_base=4, batch_size=2, patches_per_sample=2, bootstrap_epochs=1,
                epochs=1, perceptual="random", perceptual_widths=(4, 8))
    base.update(kw)
    return TrainConfig(**base)
