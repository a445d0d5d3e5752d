import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from refmesh.errors import DegenerateConfiguration, EmptyRange
from refmesh.reference import (DistanceMatrix, align_embedding, build_distance_matrix,
                               mds_embed, normalized_stress, procrustes_rmse, raw_stress,
                               rigid_align)
from refmesh.tracking import CenterTrajectories


def _traj(positions):
    return CenterTrajectories(positions, [np.array([], int)] * positions.shape[0])


def _pairwise(x):
    return np.linalg.norm(x[:, None] - x[None], axis=2)


def test_static_trajectories():
    rng = np.random.default_rng(0)
    c = rng.normal(size=(10, 3))
    d = build_distance_matrix(_traj(np.repeat(c[:, None], 4, axis=1)))
    np.testing.assert_allclose(d.d, _pairwise(c), rtol=0, atol=1e-15)


def test_two_centres_max():
    pos = np.zeros((2, 3, 3))
    pos[1, :, 0] = [1.0, 3.0, 2.0]
    assert build_distance_matrix(_traj(pos)).d[0, 1] == 3.0
    assert build_distance_matrix(_traj(pos), (0, 0)).d[0, 1] == 1.0


def test_matches_triple_loop():
    rng = np.random.default_rng(1)
    pos = rng.normal(size=(20, 5, 3))
    got = build_distance_matrix(_traj(pos), (1, 3)).d
    ref = np.zeros((20, 20))
    for i in range(20):
        for j in range(20):
            for f in range(1, 4):
                ref[i, j] = max(ref[i, j], float(np.sqrt(np.sum((pos[i, f] - pos[j, f]) ** 2))))
    # identical up to summation order inside the norm
    np.testing.assert_allclose(got, ref, rtol=4e-16, atol=0)


def test_empty_range():
    pos = np.zeros((3, 4, 3))
    for rng in [(2, 1), (-1, 2), (0, 4)]:
        with pytest.raises(EmptyRange):
            build_distance_matrix(_traj(pos), rng)


def test_tetrahedron():
    x = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1.0]])
    rc = mds_embed(DistanceMatrix(_pairwise(x)))
    assert rc.stress < 1e-8
    np.testing.assert_allclose(_pairwise(rc.points), _pairwise(x), atol=1e-6)


def test_all_zero():
    rc = mds_embed(DistanceMatrix(np.zeros((5, 5))))
    assert rc.stress == 0.0 and rc.converged
    assert np.ptp(rc.points, axis=0).max() == 0.0


def test_stress_field_recomputable():
    rng = np.random.default_rng(2)
    d = _pairwise(rng.normal(size=(30, 5)))   # not realisable in 3D
    rc = mds_embed(d, max_iter=50)
    assert rc.stress == pytest.approx(normalized_stress(d, rc.points), abs=1e-12)
    assert rc.stress > 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_stress_monotone(seed):
    rng = np.random.default_rng(seed)
    d = _pairwise(rng.normal(size=(15, 4)))
    init = rng.normal(size=(15, 3))
    rc = mds_embed(d, max_iter=100, init=init)
    h = np.asarray(rc.raw_stress_history)
    assert np.all(np.diff(h) <= 1e-12 * h[:-1])
    assert h[-1] == pytest.approx(raw_stress(d, rc.points))


def test_seed_invariance_up_to_rigid_motion():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(25, 3))
    d = _pairwise(x)
    a = mds_embed(d, seed=0, init=rng.normal(size=(25, 3)), max_iter=3000, eps=1e-24)
    b = mds_embed(d, seed=1)
    assert procrustes_rmse(align_embedding(a.points, b.points), b.points) < 1e-6


def test_rigid_sequence_recovers_frame0():
    rng = np.random.default_rng(4)
    c0 = rng.normal(size=(40, 3))
    frames = [Rotation.from_rotvec(rng.normal(size=3)).apply(c0) + rng.normal(size=3)
              for _ in range(6)]
    pos = np.stack([c0] + frames, axis=1)
    rc = mds_embed(build_distance_matrix(_traj(pos)))
    diag = np.linalg.norm(np.ptp(c0, axis=0))
    assert rc.stress < 1e-6
    assert procrustes_rmse(align_embedding(rc.points, c0), c0) < 1e-6 * diag


def test_rigid_align_identity_and_exact():
    rng = np.random.default_rng(5)
    s = rng.normal(size=(12, 3))
    tf = rigid_align(s, s)
    np.testing.assert_allclose(tf.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(tf.translation, 0, atol=1e-12)
    r = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    t = s @ r.T + [1, 2, 3]
    tf = rigid_align(s, t)
    np.testing.assert_allclose(tf.rotation, r, atol=1e-9)
    np.testing.assert_allclose(tf.translation, [1, 2, 3], atol=1e-9)


def test_rigid_align_noisy_is_least_squares():
    rng = np.random.default_rng(6)
    s = rng.normal(size=(100, 3))
    r = Rotation.from_rotvec([0.3, -0.2, 0.9])
    t = r.apply(s) + [0.5, -1, 2] + rng.normal(scale=0.01, size=s.shape)
    tf = rigid_align(s, t)
    rmse = np.sqrt(np.mean(np.sum((tf.apply(s) - t) ** 2, axis=1)))

    def f(v):
        return np.mean(np.sum((Rotation.from_rotvec(v[:3]).apply(s) + v[3:] - t) ** 2, axis=1))

    res = minimize(f, np.zeros(6), method="BFGS", options={"gtol": 1e-12})
    assert rmse <= np.sqrt(res.fun) + 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rigid_align_proper_rotation(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(8, 3))
    t = rng.normal(size=(8, 3))
    r = rigid_align(s, t).rotation
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_rigid_align_mirror_never_reflects():
    rng = np.random.default_rng(7)
    s = rng.normal(size=(10, 3))
    r = rigid_align(s, s * [1, 1, -1]).rotation
    assert np.linalg.det(r) > 0


def test_rigid_align_degenerate():
    with pytest.raises(DegenerateConfiguration):
        rigid_align(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateConfiguration):
        rigid_align(line, line)


def test_align_embedding_handles_mirror():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(20, 3))
    np.testing.assert_allclose(align_embedding(x * [-1, 1, 1], x), x, atol=1e-12)
