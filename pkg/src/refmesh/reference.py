"""Max-over-time distance matrix, SMACOF embedding and rigid alignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, EmptyRange
from .geometry import RigidTransform

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class DistanceMatrix:
    d: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        if self.d.ndim != 2 or self.d.shape[0] != self.d.shape[1]:
            raise ValueError("distance matrix must be square")

    @property
    def K(self):
        return self.d.shape[0]


@dataclass(eq=False)
class ReferenceCenters:
    points: np.ndarray
    stress: float
    converged: bool
    n_iter: int = 0
    raw_stress_history: list = field(default_factory=list)

    @property
    def K(self):
        return len(self.points)


def build_distance_matrix(traj, frame_range=None):
    """``d[i, j] = max_f |c_i(f) - c_j(f)|`` over the inclusive frame range."""
    positions = traj.positions if hasattr(traj, "positions") else np.asarray(traj)
    n = positions.shape[1]
    f0, f1 = (0, n - 1) if frame_range is None else frame_range
    if not (0 <= f0 <= f1 < n):
        raise EmptyRange(f"frame range [{f0}, {f1}] is empty or outside [0, {n - 1}]")
    d = np.zeros((positions.shape[0],) * 2)
    for f in range(f0, f1 + 1):
        c = positions[:, f]
        diff = c[:, None, :] - c[None, :, :]
        np.maximum(d, np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)), out=d)
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(d)


def _pairwise(x):
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def raw_stress(d, x):
    iu = np.triu_indices(len(d), 1)
    return float(np.sum((d[iu] - _pairwise(x)[iu]) ** 2))


def normalized_stress(d, x):
    """sqrt( sum_{i<j} (d_ij - |x_i - x_j|)^2 / sum_{i<j} d_ij^2 )."""
    iu = np.triu_indices(len(d), 1)
    denom = float(np.sum(d[iu] ** 2))
    if denom == 0.0:
        return 0.0
    return float(np.sqrt(raw_stress(d, x) / denom))


def classical_mds(d, dim=3):
    """Torgerson scaling; returns None when fewer than ``dim`` positive eigenvalues."""
    k = len(d)
    j = np.eye(k) - 1.0 / k
    b = -0.5 * j @ (d ** 2) @ j
    w, v = np.linalg.eigh(b)
    order = np.argsort(w)[::-1][:dim]
    w, v = w[order], v[:, order]
    if len(w) == 0 or w[0] <= 0:
        return None
    x = v * np.sqrt(np.maximum(w, 0.0))
    # fewer than ``dim`` points: pad missing coordinates with zeros
    return np.hstack([x, np.zeros((k, dim - x.shape[1]))])


def mds_embed(D, eps=1e-20, max_iter=300, seed=0, init=None):
    """Metric MDS into 3D by SMACOF stress majorization.

    Starts from classical MDS (or a seeded random configuration when that is
    unusable) and stops once the raw stress decreases by less than ``eps`` in
    one iteration or after ``max_iter`` Guttman transforms.
    """
    d = D.d if isinstance(D, DistanceMatrix) else np.asarray(D, dtype=np.float64)
    k = len(d)
    if k == 0 or not np.any(d > 0):
        return ReferenceCenters(np.zeros((k, 3)), 0.0, True, 0, [0.0])
    if init is not None:
        x = np.array(init, dtype=np.float64)
    else:
        x = classical_mds(d)
        if x is None or not np.all(np.isfinite(x)):
            rng = np.random.default_rng(seed)
            x = rng.standard_normal((k, 3)) * d.max()
    s = raw_stress(d, x)
    history = [s]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        dist = _pairwise(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dist > 0, d / dist, 0.0)
        b = -ratio
        np.fill_diagonal(b, 0.0)
        np.fill_diagonal(b, -b.sum(axis=1))
        x_new = b @ x / k
        s_new = raw_stress(d, x_new)
        # majorization guarantees s_new <= s up to round-off
        if s_new > s * (1 + 1e-12) + 1e-300:
            logger.warning("SMACOF stress rose from %g to %g", s, s_new)
        decrease = s - s_new
        x, s = x_new, s_new
        history.append(s)
        if decrease < eps:
            converged = True
            break
    return ReferenceCenters(x, normalized_stress(d, x), converged, it, history)


def rigid_align(source, target):
    """Least-squares rotation + translation mapping ``source`` onto ``target``
    (Kabsch, reflections excluded)."""
    s = np.asarray(source, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if s.shape != t.shape or s.ndim != 2 or s.shape[1] != 3:
        raise ValueError("source and target must both be (K, 3)")
    if len(s) < 3:
        raise DegenerateConfiguration("rigid alignment needs at least 3 points")
    cs, ct = s.mean(axis=0), t.mean(axis=0)
    s0, t0 = s - cs, t - ct
    sv = np.linalg.svd(s0, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateConfiguration("source points are collinear or coincident")
    u, _, vt = np.linalg.svd(s0.T @ t0)
    dfix = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, dfix]) @ u.T
    return RigidTransform(r, ct - r @ cs)


def procrustes_rmse(source, target):
    tf = rigid_align(source, target)
    return float(np.sqrt(np.mean(np.sum((tf.apply(source) - target) ** 2, axis=1))))


def align_embedding(points, target):
    """Rigidly place an MDS embedding onto ``target`` centres.

    Stress cannot tell an embedding from its mirror image, so both
    handednesses are tried and the one with the smaller residual is kept.
    """
    best = None
    for flip in (1.0, -1.0):
        p = np.asarray(points) * np.array([1.0, 1.0, flip])
        tf = rigid_align(p, target)
        moved = tf.apply(p)
        err = float(np.sum((moved - target) ** 2))
        if best is None or err < best[0]:
            best = (err, moved)
    return best[1]
