import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fewshot_render.keyframes import (
    KeyframeSet, coverage_radius, default_k, select_keyframes, select_random, snap_violations,
)
from fewshot_render.pose3d import pose_distance_matrix


def clustered(seed, n_per=(30, 40, 30), spread=0.02, sep=3.0):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(25, 3))
    out, truth = [], []
    for c, n in enumerate(n_per):
        center = base + sep * c
        out.append(center + rng.normal(0, spread, (n, 25, 3)))
        truth += [c] * n
    return np.concatenate(out), np.array(truth)


def test_k_equals_n():
    X = np.random.default_rng(0).normal(size=(12, 25, 3))
    ks = select_keyframes(X, 12)
    assert ks.indices == tuple(range(12)) and ks.cost == 0.0


def test_errors():
    X = np.zeros((5, 25, 3))
    with pytest.raises(ValueError):
        select_keyframes(X, 6)
    with pytest.raises(ValueError):
        select_keyframes(np.zeros((0, 25, 3)), 1)
    with pytest.raises(ValueError):
        select_random(5, 6)


def test_default_k_sparsity():
    assert default_k(500) == 20
    assert default_k(10) == 2


def test_three_clusters_one_keyframe_each():
    X, truth = clustered(1)
    ks = select_keyframes(X, 3, seed=0)
    assert sorted(truth[list(ks.indices)]) == [0, 1, 2]
    D = pose_distance_matrix(X)
    for i in ks.indices:
        members = np.flatnonzero(truth == truth[i])
        mean = X[members].mean(axis=0)
        d = np.linalg.norm(X[members] - mean, axis=-1).sum(axis=-1)
        assert i == members[np.argmin(d)]
    assert D.shape == (100, 100)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 60), st.integers(1, 12))
def test_snap_invariant(seed, n, k):
    k = min(k, n)
    X = np.random.default_rng(seed).normal(size=(n, 25, 3))
    ks = select_keyframes(X, k, seed=seed)
    assert snap_violations(ks, X) == []
    assert len(set(ks.indices)) == k and all(0 <= i < n for i in ks.indices)
    assert ks.iterations <= 100


def test_random_selection():
    assert select_random(10, 10).indices == tuple(range(10))
    assert select_random(50, 5, 3) == select_random(50, 5, 3)
    counts = np.zeros(10)
    for s in range(10_000):
        counts[list(select_random(10, 2, s).indices)] += 1
    freq = counts / 10_000
    sigma = np.sqrt(0.2 * 0.8 / 10_000)
    assert np.all(np.abs(freq - 0.2) < 3 * sigma)


def test_coverage_radius():
    X = np.random.default_rng(2).normal(size=(30, 25, 3))
    assert coverage_radius(list(range(30)), X) == 0.0
    D = pose_distance_matrix(X)
    assert coverage_radius([4], X) == pytest.approx(D[:, 4].max())
    rng = np.random.default_rng(3)
    sel = [int(rng.integers(30))]
    prev = coverage_radius(sel, X)
    for i in rng.permutation(30):
        if i in sel:
            continue
        sel.append(int(i))
        cur = coverage_radius(sel, X)
        assert cur <= prev
        prev = cur


def test_pose_guided_beats_random_on_clusters():
    X, _ = clustered(4, n_per=(60, 60, 60), spread=0.05)
    ks = select_keyframes(X, 3)
    rand = [coverage_radius(select_random(len(X), 3, s), X) for s in range(20)]
    assert coverage_radius(ks, X) < np.mean(rand)


def test_save_load(tmp_path):
    ks = KeyframeSet((1, 5, 9), 3, 4, 1.5, "pose", 2)
    ks.save(tmp_path / "k.json")
    assert KeyframeSet.load(tmp_path / "k.json") == ks
    with pytest.raises(ValueError):
        KeyframeSet((5, 1), 2)
