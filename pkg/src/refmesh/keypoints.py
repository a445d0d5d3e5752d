"""ISS keypoints and rotation-constrained neighbourhood matching.

A reference keypoint ``r`` and a frame keypoint ``i`` are compared by
translating the reference neighbourhood so that ``r`` lands on ``i`` and then
minimising, over rotations about that common point,

    Err(R) = mean_{q in N(i)} min_{p in N(r)} |q - R p| + H(N(i), R N(r)),

with ``H`` the two-sided Hausdorff distance between the vertex sets. Only
proper rotations are searched, so a neighbourhood never matches its mirror
image unless it happens to be symmetric.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation


@dataclass(frozen=True)
class Keypoint:
    position: np.ndarray
    vertex_index: int
    saliency: float


@dataclass(frozen=True)
class KeypointMatch:
    ref_vertex: int
    frame_vertex: int
    error: float
    rotation: np.ndarray  # rotation vector


@dataclass
class KeypointMatchSet:
    pairs: list = field(default_factory=list)
    sigma_th: float = 0.0

    def __len__(self):
        return len(self.pairs)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ref_vertex", "frame_vertex", "error"])
            for p in self.pairs:
                w.writerow([p.ref_vertex, p.frame_vertex, repr(float(p.error))])


def vertex_areas(mesh):
    """One third of the area of the faces around each vertex."""
    a = np.zeros(mesh.n_vertices)
    fa = mesh.face_areas() / 3.0
    for k in range(3):
        np.add.at(a, mesh.faces[:, k], fa)
    return a


def iss_eigenvalues(points, radius, weights=None):
    """Descending eigenvalues of the weighted scatter matrix around every
    point, plus neighbour counts.

    Each neighbour within ``radius`` contributes with its sampling weight
    (vertex area) times a smooth radial falloff, so that the spectrum reflects
    the surface rather than the triangulation and the ball boundary.
    """
    pts = np.asarray(points, dtype=np.float64)
    weights = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=np.float64)
    nbrs = cKDTree(pts).query_ball_point(pts, radius)
    counts = np.array([len(n) for n in nbrs])
    lam = np.zeros((len(pts), 3))
    for i, nb in enumerate(nbrs):
        nb = np.asarray(nb)
        d = pts[nb] - pts[i]
        t = np.sqrt(np.einsum("ij,ij->i", d, d)) / radius
        w = weights[nb] * (1.0 - t * t) ** 2
        sw = w.sum()
        if sw <= 0:
            continue
        cov = (w[:, None] * d).T @ d / sw
        lam[i] = np.linalg.eigvalsh(cov)[::-1]
    return lam, counts


def detect_keypoints(mesh, salient_radius, nms_radius, gamma21=0.975, gamma32=0.975,
                     min_neighbors=5):
    """ISS keypoints on the vertices of ``mesh``.

    A vertex is a candidate when its scatter spectrum has three distinct
    eigenvalues (``l2/l1 < gamma21``, ``l3/l2 < gamma32``, ``l3 > 0``) and at
    least ``min_neighbors`` neighbours; candidates survive if their ``l3`` is
    the largest among candidates within ``nms_radius`` (ties go to the lower
    index).
    """
    if salient_radius <= 0 or nms_radius <= 0:
        raise ValueError("radii must be positive")
    pts = mesh.vertices
    if len(pts) == 0:
        return []
    w = vertex_areas(mesh) if mesh.n_faces else None
    lam, counts = iss_eigenvalues(pts, salient_radius, w)
    l1, l2, l3 = lam.T
    with np.errstate(divide="ignore", invalid="ignore"):
        cand = ((counts >= min_neighbors) & (l3 > 1e-10 * l1)
                & (l2 < gamma21 * l1) & (l3 < gamma32 * l2))
    idx = np.nonzero(cand)[0]
    if len(idx) == 0:
        return []
    tree = cKDTree(pts[idx])
    out = []
    for a, nb in enumerate(tree.query_ball_point(pts[idx], nms_radius)):
        i = idx[a]
        rivals = idx[np.asarray(nb)]
        s = l3[rivals]
        if np.all((s < l3[i]) | ((s == l3[i]) & (rivals >= i))):
            out.append(Keypoint(pts[i].copy(), int(i), float(l3[i])))
    return out


def octahedral_rotations():
    """The 24 proper rotations mapping the coordinate axes onto themselves."""
    mats = []
    for perm in ([0, 1, 2], [1, 2, 0], [2, 0, 1], [1, 0, 2], [0, 2, 1], [2, 1, 0]):
        for signs in np.ndindex(2, 2, 2):
            m = np.zeros((3, 3))
            m[np.arange(3), perm] = np.where(np.array(signs) == 1, -1.0, 1.0)
            if np.linalg.det(m) > 0:
                mats.append(m)
    return np.array(mats)


_OCTAHEDRAL = octahedral_rotations()
# starting simplex edge of the local refinement, in radians: about half the
# largest angle between a rotation and its nearest octahedral start
_SIMPLEX = 0.5


class NeighborhoodError:
    """``Err(R)`` between a frame neighbourhood and a rotated reference one,
    both expressed relative to their keypoints."""

    def __init__(self, ref_local, frame_local):
        self.p = np.asarray(ref_local, dtype=np.float64)
        self.q = np.asarray(frame_local, dtype=np.float64)
        self.ptree = cKDTree(self.p)
        self.qtree = cKDTree(self.q)

    def __call__(self, rot):
        dq, _ = self.ptree.query(self.q @ rot)   # |R^T q - p| = |q - R p|
        dp, _ = self.qtree.query(self.p @ rot.T)
        return float(dq.mean() + max(dq.max(), dp.max()))

    def principal_starts(self):
        """The proper rotations taking the principal axes of the reference
        neighbourhood onto those of the frame neighbourhood (four sign
        choices); exact for a rotated copy with distinct scatter eigenvalues."""
        if len(self.p) < 3 or len(self.q) < 3:
            return np.zeros((0, 3, 3))
        _, vp = np.linalg.eigh(self.p.T @ self.p)
        _, vq = np.linalg.eigh(self.q.T @ self.q)
        out = []
        for sx, sy in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            d = np.diag([sx, sy, 1.0])
            r = vq @ d @ vp.T
            if np.linalg.det(r) < 0:
                r = vq @ np.diag([sx, sy, -1.0]) @ vp.T
            out.append(r)
        return np.array(out)

    def starts(self):
        """Octahedral rotations followed by the principal-axis alignments."""
        if not hasattr(self, "_starts"):
            self._starts = np.concatenate([_OCTAHEDRAL, self.principal_starts()])
        return self._starts

    def start_values(self):
        return np.array([self(r) for r in self.starts()])

    def refine(self, base, xatol=1e-4):
        """Nelder-Mead over a rotation-vector increment applied after ``base``.

        Returns ``(error, rotation_matrix)``, never worse than ``base``.
        """
        def f(v):
            return self(Rotation.from_rotvec(v).as_matrix() @ base)

        res = minimize(f, np.zeros(3), method="Nelder-Mead",
                       options={"xatol": xatol, "fatol": 1e-9, "maxiter": 2000,
                                "initial_simplex": _SIMPLEX * np.vstack([np.zeros(3), np.eye(3)])})
        start = self(base)
        if res.fun <= start:
            return float(res.fun), Rotation.from_rotvec(res.x).as_matrix() @ base
        return start, base

    def minimize(self, n_refine=6, xatol=1e-4):
        """Best rotation: evaluate every start (see :meth:`starts`) and refine
        the best ``n_refine`` of them. Returns ``(error, rotation_matrix)``."""
        vals = self.start_values()
        best = (np.inf, None)
        for s in np.argsort(vals, kind="stable")[:n_refine]:
            cand = self.refine(self.starts()[s], xatol)
            if cand[0] < best[0]:
                best = cand
        return best


def neighborhood(points, center, radius, tree=None):
    tree = tree or cKDTree(points)
    return points[tree.query_ball_point(center, radius)] - center


def match_error(ref_points, ref_center, frame_points, frame_center, radius):
    """Minimum over rotations of ``Err`` for one keypoint pair.

    Returns ``(error, rotation_matrix)``.
    """
    p = neighborhood(ref_points, ref_center, radius)
    q = neighborhood(frame_points, frame_center, radius)
    if len(p) == 0 or len(q) == 0:
        return np.inf, np.eye(3)
    return NeighborhoodError(p, q).minimize()


def match_keypoints(ref, ref_keypoints, frame, frame_keypoints, radius, sigma_th=None,
                    candidate_radius=None, n_refine=6):
    """Rotation-constrained keypoint matching with error filtering.

    Candidates for each reference keypoint are the frame keypoints within
    ``candidate_radius`` after translating the reference by the difference of
    the mesh centroids (all frame keypoints when ``None``). The best candidate
    per reference keypoint is kept if its error is at most ``sigma_th``
    (default ``0.25 * radius``); the frame side is made one-to-one greedily in
    order of increasing error. Rotation starts are scored for every
    candidate and only the ``n_refine`` best (candidate, start) pairs are
    refined.
    """
    sigma_th = 0.25 * radius if sigma_th is None else sigma_th
    out = KeypointMatchSet([], sigma_th)
    if not ref_keypoints or not frame_keypoints:
        return out
    rtree, ftree = cKDTree(ref.vertices), cKDTree(frame.vertices)
    shift = frame.vertices.mean(0) - ref.vertices.mean(0)
    fpos = np.array([k.position for k in frame_keypoints])
    fnb = [neighborhood(frame.vertices, k.position, radius, ftree) for k in frame_keypoints]
    best = []
    for rk in ref_keypoints:
        p = neighborhood(ref.vertices, rk.position, radius, rtree)
        if candidate_radius is None:
            cands = range(len(frame_keypoints))
        else:
            cands = np.nonzero(np.linalg.norm(fpos - (rk.position + shift), axis=1)
                               <= candidate_radius)[0]
        # rank every (candidate, start) pair, refine only the most promising
        errs = {c: NeighborhoodError(p, fnb[c]) for c in cands}
        starts = [(v, c, k) for c in cands for k, v in enumerate(errs[c].start_values())]
        top = None
        for _, c, k in sorted(starts, key=lambda t: (t[0], t[1], t[2]))[:n_refine]:
            err, rot = errs[c].refine(errs[c].starts()[k])
            if top is None or err < top[0]:
                top = (err, c, rot)
        if top is not None and top[0] <= sigma_th:
            best.append((top[0], rk.vertex_index, frame_keypoints[top[1]].vertex_index, top[2]))
    used = set()
    for err, rv, fv, rot in sorted(best, key=lambda t: (t[0], t[1])):
        if fv in used:
            continue
        used.add(fv)
        out.pairs.append(KeypointMatch(rv, fv, float(err), Rotation.from_matrix(rot).as_rotvec()))
    return out
