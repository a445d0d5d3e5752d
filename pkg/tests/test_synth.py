import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refmesh.geometry import RigidTransform
from refmesh.mesh import validate_watertight
from refmesh.synth import (bend_points, box_mesh, collision_layout, gen_articulated_bar,
                           gen_collision, gen_rigid_motion, icosphere, unit_cube)


def test_unit_cube():
    c = unit_cube()
    assert validate_watertight(c)[0]
    assert c.signed_volume() == pytest.approx(1.0)


@given(st.floats(0.1, 3), st.floats(0.1, 3), st.floats(0.1, 3), st.integers(1, 5))
def test_box_volume_and_closure(a, b, c, d):
    m = box_mesh((a, b, c), (1.0, -2.0, 0.5), d)
    assert validate_watertight(m)[0]
    assert m.signed_volume() == pytest.approx(a * b * c, rel=1e-9)
    np.testing.assert_allclose(m.vertices.mean(0), [1.0, -2.0, 0.5], atol=1e-12)


@pytest.mark.parametrize("n", range(5))
def test_icosphere(n):
    s = icosphere(2.0, (1, 1, 1), n)
    assert s.n_vertices == 10 * 4 ** n + 2 and s.n_faces == 20 * 4 ** n
    np.testing.assert_allclose(np.linalg.norm(s.vertices - 1, axis=1), 2.0)
    assert validate_watertight(s)[0] and s.signed_volume() > 0


def test_collision_sequence():
    seq = gen_collision(10, 64, 0, 3, 8)
    gaps, _, contact = collision_layout(10, 64, 0)
    assert len(seq) == 10 and contact == 4
    h = 1.8 / 64
    for f, m in enumerate(seq):
        assert m.frame_index == f
        assert validate_watertight(m)[0]
        assert m.face_components()[0] == 2
        ball = m.vertices[m.vertices[:, 0] > 1e-12]
        # bodies never touch; the box face is x = 0
        assert ball[:, 0].min() == pytest.approx(gaps[f])
        assert gaps[f] > 0
    assert np.argmin(gaps) == contact and gaps[contact] < h
    b = gen_collision(10, 64, 0, 3, 8)
    assert all(np.array_equal(x.vertices, y.vertices) for x, y in zip(seq, b))
    with pytest.raises(ValueError):
        gen_collision(2)


def test_rigid_motion():
    base = box_mesh((1, 0.6, 0.4), (0, 0, 0), 2)
    tf = RigidTransform.from_rotvec([0.1, 0.2, 0.3], [0.5, 0, 0])
    seq = gen_rigid_motion(base, 4, tf)
    p = base.vertices
    for f, m in enumerate(seq):
        np.testing.assert_allclose(m.vertices, p, atol=1e-12)
        p = tf.apply(p)


def test_bar_bend_is_isometric_on_centerline():
    length, angle = 4.0, np.pi / 2
    x = np.linspace(0, length, 50)
    line = np.c_[x, np.zeros(50), np.zeros(50)]
    bent = bend_points(line, angle, length)
    arc = np.linalg.norm(np.diff(bent, axis=0), axis=1).sum()
    assert arc == pytest.approx(length, rel=1e-3)
    r = length / angle
    np.testing.assert_allclose(bent[-1], [r, r, 0], atol=1e-12)
    np.testing.assert_array_equal(bend_points(line, 0.0, length), line)


def test_bar_sequence():
    seq = gen_articulated_bar(5, np.pi / 2)
    np.testing.assert_allclose(seq[0].vertices[:, 0].min(), 0)
    for m in seq:
        assert validate_watertight(m)[0]
        np.testing.assert_array_equal(m.faces, seq[0].faces)
    # volume is preserved by a pure bend up to discretization
    assert seq[-1].signed_volume() == pytest.approx(seq[0].signed_volume(), rel=0.02)
