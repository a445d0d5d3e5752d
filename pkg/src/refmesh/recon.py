"""Oriented point soups and watertight surface reconstruction.

The reconstructor evaluates an implicit signed field built from the k nearest
oriented samples with compactly supported Wendland weights,

    F(p) = sum_i w_i(p) n_i . (p - q_i) / sum_i w_i(p),

and extracts the zero level set with marching cubes. The field is only
evaluated in a narrow band around the samples; grid nodes outside the band
take the sign of the region they belong to (outside if connected to the grid
border).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .errors import EmptyField
from .mesh import TriMesh, face_components, validate_watertight, write_ply


@dataclass(frozen=True, eq=False)
class OrientedPoints:
    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if p.shape != n.shape:
            raise ValueError("points and normals must have the same shape")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "normals", n)

    def __len__(self):
        return len(self.points)

    def dump_ply(self, path):
        write_ply(path, self.points, vertex_props={
            "nx": self.normals[:, 0], "ny": self.normals[:, 1], "nz": self.normals[:, 2]})

    @classmethod
    def concatenate(cls, parts):
        parts = list(parts)
        if not parts:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)))
        return cls(np.vstack([p.points for p in parts]), np.vstack([p.normals for p in parts]))


def orient_outward(mesh):
    """Flip every face component whose signed volume is negative."""
    n, labels = face_components(mesh)
    faces = mesh.faces.copy()
    changed = False
    for c in range(n):
        mask = labels == c
        if mesh.signed_volume(mask) < 0:
            faces[mask] = faces[mask][:, ::-1]
            changed = True
    return TriMesh(mesh.vertices, faces, mesh.frame_index) if changed else mesh


def transport_normals(frame, rbf_map, step=None):
    """Outward vertex normals of ``frame`` carried into reference space.

    Normals transform with the cofactor of the map's Jacobian (finite
    differences, default step 1e-4 of the bounding-box diagonal). Returns
    ``(normals, valid)``; isolated vertices have no normal and are flagged
    invalid.
    """
    mesh = orient_outward(frame)
    n = mesh.vertex_normals()
    valid = np.linalg.norm(n, axis=1) > 0
    if step is None:
        step = 1e-4 * mesh.bbox_diagonal()
    jac = rbf_map.jacobian(mesh.vertices, step)
    a, b, c = jac[:, :, 0], jac[:, :, 1], jac[:, :, 2]
    out = (n[:, :1] * np.cross(b, c) + n[:, 1:2] * np.cross(c, a) + n[:, 2:] * np.cross(a, b))
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    valid &= norm[:, 0] > 0
    out = np.divide(out, norm, out=np.zeros_like(out), where=norm > 0)
    return out, valid


def wendland(t):
    t = np.clip(t, 0.0, 1.0)
    return (1.0 - t) ** 4 * (4.0 * t + 1.0)


def signed_field(soup, query, k=12, tree=None, support_scale=1.5):
    """Evaluate the implicit field at ``query`` points."""
    tree = tree or cKDTree(soup.points)
    k = min(k, len(soup))
    dist, idx = tree.query(query, k=k)
    dist = dist.reshape(len(query), k)
    idx = idx.reshape(len(query), k)
    h = support_scale * np.maximum(dist[:, -1:], 1e-300)
    w = wendland(dist / h)
    proj = np.einsum("ikj,ikj->ik", soup.normals[idx], query[:, None, :] - soup.points[idx])
    return np.sum(w * proj, axis=1) / np.maximum(np.sum(w, axis=1), 1e-300)


class Reconstructor:
    """Interface of a point-soup-to-watertight-mesh reconstructor."""

    def reconstruct(self, soup, resolution):
        raise NotImplementedError


def merge_cells(soup, origin, h):
    """One sample per occupied grid cell: the mean position and the
    normalised sum of normals of the samples falling into the cell.

    Aligned frames leave slightly offset copies of the same surface in a soup;
    averaging at the grid scale blends copies closer than about a cell instead
    of letting the nearest-neighbour field resolve each copy separately.
    """
    cell = np.floor((soup.points - origin) / h).astype(np.int64)
    _, inv, cnt = np.unique(cell, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    pts = np.zeros((len(cnt), 3))
    nrm = np.zeros((len(cnt), 3))
    np.add.at(pts, inv, soup.points)
    np.add.at(nrm, inv, soup.normals)
    pts /= cnt[:, None]
    norm = np.linalg.norm(nrm, axis=1)
    ok = norm > 1e-12
    return OrientedPoints(pts[ok], nrm[ok] / norm[ok, None])


class SignedFieldReconstructor(Reconstructor):
    """Signed-field reconstructor.

    Samples are first merged per cell of size ``max(grid spacing,
    merge_spacing)``; set ``merge_spacing`` to the expected misalignment
    between frames of a soup so their copies of a surface blend into one.
    """

    def __init__(self, k=12, band=3, min_component_fraction=1e-3,
                 merge_spacing=None):
        self.k = k
        self.band = band
        self.min_component_fraction = min_component_fraction
        self.merge_spacing = merge_spacing

    def field_grid(self, soup, resolution):
        lo, hi = soup.points.min(0), soup.points.max(0)
        h = float((hi - lo).max()) / resolution
        if h <= 0:
            raise EmptyField("soup has zero extent")
        pad = self.band + 2
        dims = np.ceil((hi - lo) / h).astype(int) + 1 + 2 * pad
        origin = lo - pad * h
        return origin, h, tuple(dims)

    def evaluate(self, soup, resolution):
        """Signed field sampled on the reconstruction grid.

        Returns ``(values, origin, spacing)``.
        """
        origin, h, dims = self.field_grid(soup, resolution)
        soup = merge_cells(soup, origin, max(h, self.merge_spacing or 0.0))
        # band = nodes of cells holding samples, dilated
        cell = np.floor((soup.points - origin) / h).astype(int)
        near = np.zeros(dims, dtype=bool)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    near[cell[:, 0] + dx, cell[:, 1] + dy, cell[:, 2] + dz] = True
        near = ndimage.binary_dilation(near, iterations=self.band)
        values = np.empty(dims)
        nodes = np.argwhere(near)
        values[near] = signed_field(soup, origin + nodes * h, self.k)
        # away from the band: outside if connected to the border, inside otherwise
        labels, _ = ndimage.label(~near)
        border = np.unique(np.concatenate([
            labels[0].ravel(), labels[-1].ravel(), labels[:, 0].ravel(),
            labels[:, -1].ravel(), labels[:, :, 0].ravel(), labels[:, :, -1].ravel()]))
        outside = np.isin(labels, border[border > 0])
        far = ~near
        values[far & outside] = self.band * h
        values[far & ~outside] = -self.band * h
        values[values == 0.0] = 1e-12 * h
        return values, origin, h

    def reconstruct(self, soup, resolution=256):
        if len(soup) == 0:
            raise EmptyField("empty soup")
        values, origin, h = self.evaluate(soup, resolution)
        if not np.any(values < 0):
            raise EmptyField("field has no interior at this resolution")
        verts, faces, _, _ = marching_cubes(values, level=0.0, spacing=(h, h, h))
        verts = verts + origin
        keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
        mesh = TriMesh(verts, faces[keep])
        n, labels = face_components(mesh)
        sizes = np.bincount(labels, minlength=n)
        big = sizes >= self.min_component_fraction * mesh.n_faces
        if not np.all(big):
            mesh = mesh.submesh(big[labels])
        return orient_outward(mesh)


def reconstruct(soup, resolution=256, reconstructor=None):
    """Watertight mesh from an oriented point soup."""
    return (reconstructor or SignedFieldReconstructor()).reconstruct(soup, resolution)


def is_watertight(mesh):
    return validate_watertight(mesh)[0]
