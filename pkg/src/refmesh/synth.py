"""Deterministic test sequences and primitive meshes."""

from __future__ import annotations

import numpy as np

from .geometry import RigidTransform
from .mesh import MeshSequence, TriMesh


def unit_cube():
    """The canonical 8-vertex, 12-face cube on [0, 1]^3, outward oriented."""
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    f = np.array([
        [0, 1, 3], [0, 3, 2],   # x = 0
        [4, 6, 7], [4, 7, 5],   # x = 1
        [0, 4, 5], [0, 5, 1],   # y = 0
        [2, 3, 7], [2, 7, 6],   # y = 1
        [0, 2, 6], [0, 6, 4],   # z = 0
        [1, 5, 7], [1, 7, 3],   # z = 1
    ])
    return TriMesh(v, f)


def box_mesh(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0), divisions=4):
    """Closed box with every face split into a regular grid of quads."""
    div = np.broadcast_to(np.asarray(divisions, dtype=int), (3,))
    index = {}
    verts = []
    faces = []

    def vid(ijk):
        key = tuple(ijk)
        if key not in index:
            index[key] = len(verts)
            verts.append(key)
        return index[key]

    for a in range(3):
        u, w = (a + 1) % 3, (a + 2) % 3
        for side in (0, 1):
            for i in range(div[u]):
                for j in range(div[w]):
                    quad = []
                    for du, dw in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = [0, 0, 0]
                        p[a] = side * div[a]
                        p[u] = i + du
                        p[w] = j + dw
                        quad.append(vid(p))
                    if side == 0:
                        quad = quad[::-1]
                    faces.append([quad[0], quad[1], quad[2]])
                    faces.append([quad[0], quad[2], quad[3]])
    lattice = np.array(verts, dtype=float)
    v = (lattice / div - 0.5) * np.asarray(size, dtype=float) + np.asarray(center, dtype=float)
    return TriMesh(v, np.array(faces))


def icosphere(radius=1.0, center=(0.0, 0.0, 0.0), subdivisions=3):
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
         [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
         [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    v = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    return TriMesh(np.array(v) * radius + np.asarray(center, dtype=float), np.array(f))


def merge_meshes(meshes, frame_index=0):
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += m.n_vertices
    return TriMesh(np.vstack(verts), np.vstack(faces), frame_index)


def collision_layout(frames, resolution, seed, radius=0.4, max_gap=0.6):
    """Sphere centres and per-frame gaps of :func:`gen_collision`."""
    rng = np.random.default_rng(seed)
    lateral = rng.uniform(-0.05, 0.05, size=2)
    contact = (frames - 1) // 2
    # scene is x in [-1, gap + 2r]; the tangency gap is a quarter tracking voxel
    min_gap = 0.25 * (1.0 + 2 * radius) / (resolution - 0.25)
    span = max(contact, frames - 1 - contact)
    f = np.arange(frames)
    gaps = min_gap + (max_gap - min_gap) * np.abs(f - contact) / span
    return gaps, lateral, contact


def gen_collision(frames=10, resolution=64, seed=0, sphere_subdivisions=4, box_divisions=32):
    """A sphere approaches a static unit cuboid, grazes its +x face at the
    middle frame without interpenetrating, and moves away again."""
    if frames < 3:
        raise ValueError("collision sequence needs at least 3 frames")
    radius = 0.4
    gaps, lateral, _ = collision_layout(frames, resolution, seed, radius)
    cuboid = box_mesh((1.0, 1.0, 1.0), (-0.5, 0.0, 0.0), box_divisions)
    ball = icosphere(radius, (0.0, 0.0, 0.0), sphere_subdivisions)
    lowest_x = ball.vertices[:, 0].min()
    meshes = []
    for f, gap in enumerate(gaps):
        shift = np.array([gap - lowest_x, lateral[0], lateral[1]])
        moved = ball.with_vertices(ball.vertices + shift)
        meshes.append(merge_meshes([cuboid, moved], f))
    return MeshSequence(tuple(meshes), "collision")


def gen_rigid_motion(base, frames, per_frame_transform):
    """Frame ``f`` is ``per_frame_transform`` applied ``f`` times to ``base``."""
    meshes = []
    current = RigidTransform.identity()
    for f in range(frames):
        meshes.append(TriMesh(current.apply(base.vertices), base.faces, f))
        current = per_frame_transform.compose(current)
    return MeshSequence(tuple(meshes), "rigid")


def bend_points(points, angle, length):
    """Bend a bar lying along +x from x=0 into an arc of total ``angle`` about z."""
    p = np.asarray(points, dtype=float)
    if abs(angle) < 1e-12:
        return p.copy()
    k = angle / length
    rho = 1.0 / k - p[:, 1]
    out = p.copy()
    out[:, 0] = np.sin(k * p[:, 0]) * rho
    out[:, 1] = 1.0 / k - np.cos(k * p[:, 0]) * rho
    return out


def gen_articulated_bar(frames=10, max_bend=np.pi / 2, length=4.0, width=0.5, divisions=(16, 2, 2)):
    """Watertight bar along x that bends progressively up to ``max_bend``."""
    bar = box_mesh((length, width, width), (length / 2, 0.0, 0.0), divisions)
    meshes = []
    for f in range(frames):
        angle = max_bend * f / max(frames - 1, 1)
        meshes.append(TriMesh(bend_points(bar.vertices, angle, length), bar.faces, f))
    return MeshSequence(tuple(meshes), "bar")
