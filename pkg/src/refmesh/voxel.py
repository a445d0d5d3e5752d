"""Interior voxelization, inside tests, interior sampling and voxel IoU.

The inside test is ray-crossing parity along +x. Query points are shifted
in the (y, z) plane by a tiny mesh-scaled offset so rays never graze an
edge or a vertex exactly; the shift is a property of the mesh, so the cell
voxelizer and the point sampler agree on every query.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateExtent, GridMismatch, NotWatertight
from .mesh import bounding_box, validate_watertight, write_ply

# irrational-ish direction of the (y, z) ray shift, scaled by the mesh diagonal
_SHIFT = np.array([0.7548776662466927, 0.5698402909980532]) * 1e-9
_PAIR_CHUNK = 2_000_000


def ray_shift(mesh):
    return _SHIFT * max(mesh.bbox_diagonal(), 1e-300)


@dataclass(frozen=True)
class GridFrame:
    """Placement of a regular grid: cell (i, j, k) is centred at
    ``origin + (i + 0.5, j + 0.5, k + 0.5) * voxel_size``."""

    origin: tuple
    voxel_size: float
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.voxel_size <= 0 or min(self.dims) < 1:
            raise ValueError("grid needs positive voxel_size and dims")

    @classmethod
    def around(cls, box, resolution=None, voxel_size=None, pad=1):
        """Grid covering ``box`` padded by ``pad`` voxels on every side.

        ``resolution`` is the cell count along the longest box axis.
        """
        ext = np.asarray(box.extent, dtype=np.float64)
        if np.any(ext <= 0):
            raise DegenerateExtent(f"bounding box extent {ext} has zero volume")
        if voxel_size is None:
            if resolution is None or resolution < 2:
                raise ValueError("need resolution >= 2 or a positive voxel_size")
            voxel_size = float(ext.max()) / int(resolution)
        elif voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        n = np.maximum(np.ceil(ext / voxel_size - 1e-9).astype(int), 1)
        origin = np.asarray(box.min) - pad * voxel_size
        return cls(tuple(origin), voxel_size, tuple(n + 2 * pad))

    def centers_along(self, axis):
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.voxel_size

    def cell_centers(self, ijk):
        ijk = np.asarray(ijk)
        return np.asarray(self.origin) + (ijk + 0.5) * self.voxel_size

    def cell_of(self, points):
        """Integer cell index containing each point (may be out of range)."""
        p = np.asarray(points, dtype=np.float64)
        return np.floor((p - np.asarray(self.origin)) / self.voxel_size).astype(np.int64)

    def contains_index(self, ijk):
        ijk = np.asarray(ijk)
        return np.all((ijk >= 0) & (ijk < np.asarray(self.dims)), axis=-1)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    frame: GridFrame
    occupancy: np.ndarray

    def __post_init__(self):
        occ = np.ascontiguousarray(self.occupancy, dtype=bool)
        if occ.shape != self.frame.dims:
            raise ValueError(f"occupancy shape {occ.shape} != dims {self.frame.dims}")
        occ.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)

    @property
    def origin(self):
        return np.asarray(self.frame.origin)

    @property
    def voxel_size(self):
        return self.frame.voxel_size

    @property
    def dims(self):
        return self.frame.dims

    @property
    def count(self):
        return int(self.occupancy.sum())

    def occupied_indices(self):
        return np.argwhere(self.occupancy)

    def occupied_centers(self):
        return self.frame.cell_centers(self.occupied_indices())

    def volume(self):
        return self.count * self.voxel_size ** 3

    def is_occupied(self, points):
        """True where the cell containing a point is occupied."""
        ijk = self.frame.cell_of(points)
        ok = self.frame.contains_index(ijk)
        out = np.zeros(len(ijk), dtype=bool)
        i = ijk[ok]
        out[ok] = self.occupancy[i[:, 0], i[:, 1], i[:, 2]]
        return out

    def dump_ply(self, path):
        write_ply(path, self.occupied_centers())


def _edge_fn(ax, ay, bx, by, qx, qy):
    return (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)


def _crossings(tri, qy, qz):
    """x-intercepts of +x rays at (qy, qz) with the paired triangles, NaN on miss.

    ``tri`` is (P, 3, 3) and pairs elementwise with the query arrays.
    """
    ay, az = tri[:, 0, 1], tri[:, 0, 2]
    by, bz = tri[:, 1, 1], tri[:, 1, 2]
    cy, cz = tri[:, 2, 1], tri[:, 2, 2]
    wa = _edge_fn(by, bz, cy, cz, qy, qz)
    wb = _edge_fn(cy, cz, ay, az, qy, qz)
    wc = _edge_fn(ay, az, by, bz, qy, qz)
    hit = ((wa > 0) & (wb > 0) & (wc > 0)) | ((wa < 0) & (wb < 0) & (wc < 0))
    s = wa + wb + wc
    with np.errstate(invalid="ignore", divide="ignore"):
        x = (wa * tri[:, 0, 0] + wb * tri[:, 1, 0] + wc * tri[:, 2, 0]) / s
    return np.where(hit, x, np.nan)


def _require_watertight(mesh):
    ok, nb = validate_watertight(mesh)
    if not ok:
        raise NotWatertight(f"mesh (frame {mesh.frame_index}) is not watertight: "
                            f"{nb} boundary edges", nb, mesh.frame_index)


def voxelize_interior(mesh, resolution=None, voxel_size=None, frame=None, check=True):
    """Occupancy grid of cells whose centre lies inside the closed ``mesh``.

    Either ``frame`` is given explicitly (common-grid comparisons) or a grid is
    laid over the mesh bounding box padded by one voxel, with ``resolution``
    cells along the longest axis or cubic cells of ``voxel_size``. Parts of the
    mesh outside an explicit frame are clipped.
    """
    if check:
        _require_watertight(mesh)
    if frame is None:
        frame = GridFrame.around(bounding_box(mesh), resolution, voxel_size)
    nx, ny, nz = frame.dims
    h = frame.voxel_size
    ox, oy, oz = frame.origin
    dy, dz = ray_shift(mesh)
    tri = mesh.vertices[mesh.faces]
    toggles = np.zeros((ny, nz, nx + 1), dtype=np.uint8)

    # row index ranges each triangle's (y, z) footprint can touch
    j0 = np.ceil((tri[:, :, 1].min(1) - oy - dy) / h - 0.5).astype(np.int64)
    j1 = np.floor((tri[:, :, 1].max(1) - oy - dy) / h - 0.5).astype(np.int64)
    k0 = np.ceil((tri[:, :, 2].min(1) - oz - dz) / h - 0.5).astype(np.int64)
    k1 = np.floor((tri[:, :, 2].max(1) - oz - dz) / h - 0.5).astype(np.int64)
    j0, j1 = np.maximum(j0, 0), np.minimum(j1, ny - 1)
    k0, k1 = np.maximum(k0, 0), np.minimum(k1, nz - 1)
    nj = np.maximum(j1 - j0 + 1, 0)
    nk = np.maximum(k1 - k0 + 1, 0)
    npairs = nj * nk
    live = np.nonzero(npairs)[0]

    start = 0
    while start < len(live):
        csum = np.cumsum(npairs[live[start:]])
        stop = start + max(1, int(np.searchsorted(csum, _PAIR_CHUNK, side="right")))
        ids = live[start:stop]
        cnt = npairs[ids]
        t = np.repeat(ids, cnt)
        local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        nkt = nk[t]
        j = j0[t] + local // nkt
        k = k0[t] + local % nkt
        qy = oy + (j + 0.5) * h + dy
        qz = oz + (k + 0.5) * h + dz
        x = _crossings(tri[t], qy, qz)
        hit = ~np.isnan(x)
        m = np.clip(np.ceil((x[hit] - ox) / h - 0.5), 0, nx).astype(np.int64)
        np.bitwise_xor.at(toggles, (j[hit], k[hit], m), 1)
        start = stop

    # cell i is inside iff an odd number of crossings lie strictly beyond its centre
    parity = np.cumsum(toggles[:, :, :0:-1], axis=2)[:, :, ::-1] & 1
    occ = np.transpose(parity.astype(bool), (2, 0, 1))
    return VoxelGrid(frame, occ)


def points_inside(mesh, points, check=True):
    """Ray-parity inside test for arbitrary points, consistent with
    :func:`voxelize_interior` on cell centres."""
    if check:
        _require_watertight(mesh)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0 or mesh.n_faces == 0:
        return np.zeros(len(pts), dtype=bool)
    dy, dz = ray_shift(mesh)
    qy = pts[:, 1] + dy
    qz = pts[:, 2] + dz
    tri = mesh.vertices[mesh.faces]

    # bucket triangles by their (y, z) footprint on a coarse 2D grid
    ymin, ymax = tri[:, :, 1].min(1), tri[:, :, 1].max(1)
    zmin, zmax = tri[:, :, 2].min(1), tri[:, :, 2].max(1)
    lo = np.array([ymin.min(), zmin.min()])
    hi = np.array([ymax.max(), zmax.max()])
    nb = max(1, int(np.sqrt(mesh.n_faces)))
    cell = np.maximum((hi - lo) / nb, 1e-300)
    b0y = np.clip(((ymin - lo[0]) / cell[0]).astype(np.int64), 0, nb - 1)
    b1y = np.clip(((ymax - lo[0]) / cell[0]).astype(np.int64), 0, nb - 1)
    b0z = np.clip(((zmin - lo[1]) / cell[1]).astype(np.int64), 0, nb - 1)
    b1z = np.clip(((zmax - lo[1]) / cell[1]).astype(np.int64), 0, nb - 1)
    cy, cz = b1y - b0y + 1, b1z - b0z + 1
    cnt = cy * cz
    t = np.repeat(np.arange(mesh.n_faces), cnt)
    local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    by = b0y[t] + local // cz[t]
    bz = b0z[t] + local % cz[t]
    key = by * nb + bz
    order = np.argsort(key, kind="stable")
    bucket_tri = t[order]
    bucket_start = np.searchsorted(key[order], np.arange(nb * nb + 1))

    inside_box = (qy >= lo[0]) & (qy <= hi[0]) & (qz >= lo[1]) & (qz <= hi[1])
    out = np.zeros(len(pts), dtype=bool)
    idx = np.nonzero(inside_box)[0]
    if len(idx) == 0:
        return out
    py = np.clip(((qy[idx] - lo[0]) / cell[0]).astype(np.int64), 0, nb - 1)
    pz = np.clip(((qz[idx] - lo[1]) / cell[1]).astype(np.int64), 0, nb - 1)
    pk = py * nb + pz
    s, e = bucket_start[pk], bucket_start[pk + 1]
    n = e - s
    step = max(1, _PAIR_CHUNK // max(int(n.mean()) if len(n) else 1, 1))
    for c0 in range(0, len(idx), step):
        sl = slice(c0, c0 + step)
        ns, ss = n[sl], s[sl]
        q = np.repeat(idx[sl], ns)
        off = np.arange(ns.sum()) - np.repeat(np.cumsum(ns) - ns, ns)
        tt = bucket_tri[np.repeat(ss, ns) + off]
        x = _crossings(tri[tt], qy[q], qz[q])
        beyond = (x > pts[q, 0])
        flips = np.bincount(q[beyond], minlength=len(pts))
        out ^= (flips & 1).astype(bool)
    return out


def iou(a, b):
    """Intersection over union of two occupancy grids on the same frame.

    Two empty grids have IoU 1 by convention.
    """
    if a.frame.dims != b.frame.dims or not (
            np.allclose(a.frame.origin, b.frame.origin, rtol=0, atol=1e-12 * a.voxel_size)
            and np.isclose(a.voxel_size, b.voxel_size, rtol=1e-12, atol=0)):
        raise GridMismatch("IoU needs grids with identical origin, voxel_size and dims")
    inter = np.count_nonzero(a.occupancy & b.occupancy)
    union = np.count_nonzero(a.occupancy | b.occupancy)
    return 1.0 if union == 0 else inter / union


def sample_interior(mesh, count, seed, resolution=32, check=True):
    """``count`` points inside the mesh, deterministic for a given seed.

    Occupied voxels are drawn uniformly, each draw is jittered inside its
    voxel, and draws failing the inside test are redrawn.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if check:
        _require_watertight(mesh)
    grid = voxelize_interior(mesh, resolution=resolution, check=False)
    cells = grid.occupied_indices()
    if len(cells) == 0:
        raise DegenerateExtent("mesh encloses no voxel at this resolution")
    rng = np.random.default_rng(seed)
    out = np.empty((count, 3))
    todo = np.arange(count)
    for _ in range(1000):
        pick = cells[rng.integers(0, len(cells), size=len(todo))]
        cand = grid.frame.cell_centers(pick) + (rng.random((len(todo), 3)) - 0.5) * grid.voxel_size
        ok = points_inside(mesh, cand, check=False)
        out[todo[ok]] = cand[ok]
        todo = todo[~ok]
        if len(todo) == 0:
            return out
    raise RuntimeError("interior sampling failed to converge")
