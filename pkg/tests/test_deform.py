import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from refmesh.deform import (DeformationProblem, RemeshParams, arap_deform, cotangent_weights,
                            greedy_coloring, remesh_frame)
from refmesh.errors import InsufficientMatches, SolverSingular
from refmesh.synth import box_mesh, gen_articulated_bar, icosphere, merge_meshes


def _cot(a, b):
    return np.dot(a, b) / np.linalg.norm(np.cross(a, b))


def test_cotangent_weights_oracle():
    rng = np.random.default_rng(0)
    sph = icosphere(1.0, (0, 0, 0), 1)
    m = sph.with_vertices(sph.vertices + 0.05 * rng.normal(size=sph.vertices.shape))
    acc = {}
    for f in m.faces:
        for k in range(3):
            o, i, j = f[k], f[(k + 1) % 3], f[(k + 2) % 3]
            key = (min(i, j), max(i, j))
            acc[key] = acc.get(key, 0.0) + 0.5 * _cot(m.vertices[i] - m.vertices[o],
                                                     m.vertices[j] - m.vertices[o])
    edges, w = cotangent_weights(m)
    assert len(edges) == len(acc)
    for (i, j), x in zip(edges, w):
        assert x == pytest.approx(max(acc[(i, j)], 0.0), abs=1e-12)


def test_coloring_is_proper():
    sph = icosphere(1.0, (0, 0, 0), 2)
    edges, _ = cotangent_weights(sph)
    classes = greedy_coloring(sph.n_vertices, edges)
    color = np.full(sph.n_vertices, -1)
    for c, cls in enumerate(classes):
        color[cls] = c
    assert np.all(color >= 0)
    assert np.all(color[edges[:, 0]] != color[edges[:, 1]])


def _spread(mesh, k):
    # farthest-point picks on the vertices
    idx = [0]
    d = np.linalg.norm(mesh.vertices - mesh.vertices[0], axis=1)
    for _ in range(k - 1):
        idx.append(int(np.argmax(d)))
        d = np.minimum(d, np.linalg.norm(mesh.vertices - mesh.vertices[idx[-1]], axis=1))
    return np.array(idx)


def test_rigid_constraints_give_rigid_result():
    m = icosphere(1.0, (0, 0, 0), 3)
    m = m.with_vertices(m.vertices * [1.0, 0.7, 0.5])
    r = Rotation.from_rotvec([0.3, -0.5, 0.8]).as_matrix()
    t = np.array([0.2, 1.0, -0.4])
    idx = _spread(m, 6)
    res = arap_deform(DeformationProblem(m, (idx, m.vertices[idx] @ r.T + t)))
    err = np.abs(res.mesh.vertices - (m.vertices @ r.T + t)).max()
    assert err < 1e-4 * m.bbox_diagonal()
    h = np.array(res.energy_history)
    assert np.all(np.diff(h) <= 1e-9 * h[0] + 1e-12)


def test_identity_constraints():
    m = icosphere(1.0, (0, 0, 0), 2)
    idx = _spread(m, 4)
    res = arap_deform(DeformationProblem(m, (idx, m.vertices[idx])))
    np.testing.assert_allclose(res.mesh.vertices, m.vertices, atol=1e-10)
    np.testing.assert_array_equal(res.mesh.faces, m.faces)


def test_bend_converges_and_is_monotone():
    bar = gen_articulated_bar(2, np.pi / 2, divisions=(24, 3, 3))
    rest, bent = bar[0], bar[1]
    x = rest.vertices[:, 0]
    idx = np.nonzero((x < 0.3) | (x > 3.7))[0]
    prob = DeformationProblem(rest, (idx, bent.vertices[idx]))
    short = arap_deform(prob, max_iter=200, tol=0)
    long = arap_deform(prob, max_iter=2000, tol=0)
    h = np.array(long.energy_history)
    assert np.all(np.diff(h) <= 1e-9 * h[0] + 1e-12)
    d = rest.bbox_diagonal()
    assert np.abs(short.mesh.vertices - long.mesh.vertices).max() < 0.01 * d
    # the bent bar keeps its edge lengths approximately
    e = rest.edges()
    l0 = np.linalg.norm(rest.vertices[e[:, 0]] - rest.vertices[e[:, 1]], axis=1)
    l1 = np.linalg.norm(long.mesh.vertices[e[:, 0]] - long.mesh.vertices[e[:, 1]], axis=1)
    assert np.median(np.abs(l1 / l0 - 1)) < 0.05


def test_unconstrained_component():
    a = icosphere(1.0, (-2, 0, 0), 2)
    b = icosphere(1.0, (2, 0, 0), 2)
    m = merge_meshes([a, b])
    idx = _spread(a, 4)
    tgt = m.vertices[idx] + [0, 1, 0]
    with pytest.raises(SolverSingular):
        arap_deform(DeformationProblem(m, (idx, tgt)))
    _, lab = m.vertex_components()
    other = int(lab[-1])
    res = arap_deform(DeformationProblem(m, (idx, tgt), anchors={other: [3.0, 0, 0]}))
    moved = res.mesh.vertices[lab == other]
    np.testing.assert_allclose(moved - b.vertices, np.tile([1.0, 0, 0], (len(moved), 1)),
                               atol=1e-12)
    np.testing.assert_allclose(res.mesh.vertices[lab != other], a.vertices + [0, 1, 0],
                               atol=1e-6)


def test_bad_constraints():
    m = icosphere(1.0, (0, 0, 0), 1)
    with pytest.raises(ValueError):
        DeformationProblem(m, ([0, 1], np.zeros((3, 3))))
    with pytest.raises(ValueError):
        DeformationProblem(m, ([m.n_vertices], np.zeros((1, 3))))


def test_unrelated_shapes_do_not_match():
    s = icosphere(1.0, (0, 0, 0), 3)
    b = box_mesh((1.0, 0.6, 0.4), (0, 0, 0), 12)
    with pytest.raises(InsufficientMatches):
        remesh_frame(s, b)


def test_remesh_identity_on_asymmetric_shape():
    box = box_mesh((1.0, 0.6, 0.4), (0, 0, 0), 12)
    sph = icosphere(0.3, (0.2, 0.45, 0.1), 3)
    ref = merge_meshes([box, sph])
    res = remesh_frame(ref, ref, RemeshParams(match_radius=0.1))
    assert len(res.matches) >= 4
    assert all(p.ref_vertex == p.frame_vertex for p in res.matches.pairs)
    np.testing.assert_array_equal(res.mesh.faces, ref.faces)
    assert np.abs(res.mesh.vertices - ref.vertices).max() < 1e-3 * ref.bbox_diagonal()
