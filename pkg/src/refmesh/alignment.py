"""Group-of-frames planning and voxel-IoU alignment of mapped frames.

Each frame ``f`` of a group is mapped into reference space by the RBF taking
its centres ``C_f`` to ``X'_f = X_g + delta``. The offsets are chosen to
maximise the IoU between the voxelized mapped frame and the voxelized mapped
R-frame on a common grid. The interpolant is linear in its targets, so the
mapped vertices are ``M_f @ X'_f`` for a fixed operator ``M_f``; no refit is
needed per candidate.

The optimiser has two derivative-free stages, both accepting strict IoU
improvements only:

1. pattern search over a 7-parameter similarity (translation, rotation
   vector, log-scale) of ``X_g`` about its centroid;
2. randomized block-coordinate descent in which a centre and its graph
   neighbours share an offset, with a step that halves after every sweep
   without improvement.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import OptimizationDiverged
from .mesh import Aabb, TriMesh
from .metrics import SurfaceDistance
from .rbf import RbfSystem
from .recon import OrientedPoints, transport_normals
from .voxel import GridFrame, iou, voxelize_interior

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class GroupPlan:
    group_index: int
    frame_range: tuple
    r_frame: int
    reference_centers: object = None
    optimized_centers: dict = field(default_factory=dict)
    iou_before: dict = field(default_factory=dict)
    iou_after: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)

    @property
    def frames(self):
        return range(self.frame_range[0], self.frame_range[1] + 1)

    def __len__(self):
        return self.frame_range[1] - self.frame_range[0] + 1


def make_groups(n_frames, gof_size):
    """Consecutive groups of ``gof_size`` frames; the last may be short.

    The R-frame of each group is its middle frame (lower middle for even
    lengths).
    """
    n = n_frames if isinstance(n_frames, int) else len(n_frames)
    if gof_size < 1:
        raise ValueError("gof_size must be >= 1")
    plans = []
    for g, f0 in enumerate(range(0, n, gof_size)):
        f1 = min(f0 + gof_size, n) - 1
        plans.append(GroupPlan(g, (f0, f1), f0 + (f1 - f0) // 2))
    return plans


def group_grid(meshes, resolution=None, voxel_size=None, margin=0.1):
    """Common IoU grid over the union of the meshes' boxes, grown by
    ``margin`` of the union's diagonal so moved frames stay covered.

    ``resolution`` counts cells along the longest axis of the unpadded union.
    """
    box = Aabb.of_points(np.vstack([m.vertices for m in meshes]))
    if voxel_size is None:
        voxel_size = float(np.max(box.extent)) / resolution
    grow = margin * box.diagonal
    grown = Aabb(box.min - grow, box.max + grow)
    return GridFrame.around(grown, voxel_size=voxel_size)


@dataclass
class AlignmentResult:
    centers: np.ndarray
    iou_before: float
    iou_after: float
    trace: list
    evaluations: int


class FrameAlignment:
    """IoU objective of one frame against a fixed target occupancy."""

    def __init__(self, mesh, anchors, reference, target, grid, neighbors=None,
                 kernel="thin_plate_spline"):
        self.mesh = mesh
        self.reference = np.asarray(reference, dtype=np.float64)
        self.target = target
        self.grid = grid
        self.neighbors = neighbors
        self.operator = RbfSystem(anchors, kernel).operator(mesh.vertices)
        self.evaluations = 0

    def mapped(self, centers):
        return self.operator @ centers

    def occupancy(self, centers):
        return voxelize_interior(self.mesh.with_vertices(self.mapped(centers)),
                                 frame=self.grid, check=False)

    def iou(self, centers):
        self.evaluations += 1
        return iou(self.occupancy(centers), self.target)


def _similarity(x, c, params):
    t, rv, ls = params[:3], params[3:6], params[6]
    r = Rotation.from_rotvec(rv).as_matrix()
    return c + np.exp(ls) * (x - c) @ r.T + t


def _pattern_search(obj, x0, best, h, budget, trace):
    c = x0.mean(axis=0)
    diag = float(np.linalg.norm(x0.max(0) - x0.min(0))) or 1.0
    params = np.zeros(7)
    steps = np.array([4 * h] * 3 + [4 * h / diag] * 3 + [4 * h / diag])
    floor = steps / 16
    used = 0
    while used < budget and np.any(steps >= floor):
        improved = False
        for a in range(7):
            for sgn in (1.0, -1.0):
                trial = params.copy()
                trial[a] += sgn * steps[a]
                val = obj(_similarity(x0, c, trial))
                used += 1
                if val > best:
                    best, params, improved = val, trial, True
                    trace.append(best)
                    break
        if not improved:
            steps = steps / 2
    return _similarity(x0, c, params), best


def _block_descent(obj, x, best, neighbors, h, budget, rng, trace):
    k = len(x)
    blocks = [np.unique(np.concatenate([[i], neighbors[i]])) if neighbors is not None
              else np.array([i]) for i in range(k)]
    step = 2.0 * h
    used = 0
    dirs = np.vstack([np.eye(3), -np.eye(3)])
    while used < budget and step >= 0.25 * h:
        improved = False
        for i in rng.permutation(k):
            if used >= budget:
                break
            for d in dirs:
                trial = x.copy()
                trial[blocks[i]] += step * d
                val = obj(trial)
                used += 1
                if val > best:
                    x, best, improved = trial, val, True
                    trace.append(best)
                    break
        if not improved:
            step /= 2
    return x, best


def optimize_frame_alignment(problem, iters=2000, seed=0, global_stage=True,
                             global_budget=None):
    """Offsets of the reference centres maximising IoU for one frame.

    ``iters`` bounds the number of objective evaluations. The returned IoU is
    never below the unoptimised one; a non-finite objective aborts to the
    unoptimised centres.
    """
    x0 = problem.reference
    h = problem.grid.voxel_size
    trace = []

    def obj(x):
        v = problem.iou(x)
        if not np.isfinite(v):
            raise OptimizationDiverged("non-finite IoU")
        return v

    start = obj(x0)
    trace.append(start)
    try:
        x, best = x0, start
        if best < 1.0 and global_stage:
            budget = global_budget or max(iters // 4, 1)
            x, best = _pattern_search(obj, x0, start, h, budget, trace)
        if best < 1.0:
            rng = np.random.default_rng(seed)
            x, best = _block_descent(obj, x, best, problem.neighbors, h,
                                     max(iters - problem.evaluations, 0), rng, trace)
    except OptimizationDiverged as exc:
        logger.warning("alignment aborted (%s); keeping unoptimised centres", exc)
        return AlignmentResult(x0.copy(), start, start, [start], problem.evaluations)
    return AlignmentResult(np.asarray(x), start, best, trace, problem.evaluations)


def write_trace_csv(path, traces):
    """``frame,iter,iou`` rows; ``traces`` maps frame -> accepted IoU values."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "iter", "iou"])
        for f in sorted(traces):
            for i, v in enumerate(traces[f]):
                w.writerow([f, i, repr(float(v))])


def dedupe_points(points, tol=1e-7):
    """Indices of points kept after dropping later duplicates within ``tol``."""
    keep = np.ones(len(points), dtype=bool)
    if len(points) == 0:
        return np.nonzero(keep)[0]
    pairs = cKDTree(points).query_pairs(tol, output_type="ndarray")
    for i, j in pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]:
        if keep[i]:
            keep[j] = False
    return np.nonzero(keep)[0]


def consensus_mask(mapped, tol):
    """Per-frame masks of vertices lying within ``tol`` of the mapped surface
    of at least half of the group's other frames.

    A well-aligned group agrees everywhere; a vertex supported by a minority
    of frames is residue of a mapping that the smooth interpolant could not
    tear apart (typically near a contact) and would otherwise leave a stray
    layer in the soup.
    """
    n = len(mapped)
    need = int(np.ceil((n - 1) / 2))
    dist = [SurfaceDistance(m) for m in mapped]
    masks = []
    for f, m in enumerate(mapped):
        votes = np.zeros(m.n_vertices, dtype=np.int64)
        for g in range(n):
            if g != f:
                votes += dist[g](m.vertices) <= tol
        masks.append(votes >= need)
    return masks


def build_group_soup(meshes, anchors, targets, kernel="thin_plate_spline", tol=1e-7,
                     consensus_tol=None):
    """Oriented point soup of every mapped frame of a group.

    ``meshes``, ``anchors`` and ``targets`` are parallel sequences (frame mesh,
    its centres ``C_f`` and its optimised reference centres ``X'_f``). With
    ``consensus_tol`` set, vertices without majority support from the other
    frames are dropped (see :func:`consensus_mask`).
    Returns ``(soup, frame_of_point)``.
    """
    maps = [RbfSystem(c, kernel).fit(x) for c, x in zip(anchors, targets)]
    mapped = [m.with_vertices(r(m.vertices)) for m, r in zip(meshes, maps)]
    if consensus_tol is not None and len(meshes) > 1:
        agree = consensus_mask(mapped, consensus_tol)
    else:
        agree = [np.ones(m.n_vertices, dtype=bool) for m in meshes]
    pts, nrm, src = [], [], []
    for mesh, rbf, mm, ok in zip(meshes, maps, mapped, agree):
        n, valid = transport_normals(mesh, rbf)
        valid &= ok
        pts.append(mm.vertices[valid])
        nrm.append(n[valid])
        src.append(np.full(int(valid.sum()), mesh.frame_index))
    p, n, s = np.vstack(pts), np.vstack(nrm), np.concatenate(src)
    keep = dedupe_points(p, tol)
    return OrientedPoints(p[keep], n[keep]), s[keep]


def mapped_mesh(mesh, anchors, targets, kernel="thin_plate_spline"):
    return TriMesh(RbfSystem(anchors, kernel).fit(targets)(mesh.vertices), mesh.faces,
                   mesh.frame_index)
