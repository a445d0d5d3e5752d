"""Polyharmonic RBF maps from frame centres to reference centres."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import SingularSystem

# In 3D the bending-energy minimising thin-plate spline has kernel r.
KERNELS = {
    "thin_plate_spline": lambda r: r,
    "thin_plate_spline_r2logr": lambda r: np.where(r > 0, r * r * np.log(np.where(r > 0, r, 1.0)), 0.0),
}
COND_LIMIT = 1e12


def _distances(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _poly(points):
    return np.hstack([np.ones((len(points), 1)), points])


class RbfSystem:
    """Factorised interpolation system for a fixed set of anchors.

    The interpolant is linear in the targets, so one factorisation serves
    every target set; :meth:`operator` gives the matrix taking targets to
    mapped positions of arbitrary query points.
    """

    def __init__(self, anchors, kernel="thin_plate_spline"):
        if kernel not in KERNELS:
            raise ValueError(f"unknown kernel {kernel!r}")
        self.anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3)
        self.kernel = kernel
        k = len(self.anchors)
        if k < 4:
            raise SingularSystem("RBF fit needs at least 4 anchors for the affine part")
        phi = KERNELS[kernel](_distances(self.anchors, self.anchors))
        p = _poly(self.anchors)
        sv = np.linalg.svd(self.anchors - self.anchors.mean(0), compute_uv=False)
        if sv[2] <= 1e-9 * max(sv[0], 1e-300):
            raise SingularSystem("RBF anchors are coplanar; the affine part is undetermined")
        a = np.zeros((k + 4, k + 4))
        a[:k, :k] = phi
        a[:k, k:] = p
        a[k:, :k] = p.T
        self.regularization = 0.0
        cond = np.linalg.cond(a)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            # coincident or near-coincident anchors
            scale = np.mean(np.abs(phi)) if np.any(phi) else 1.0
            self.regularization = 1e-10 * scale
            a[:k, :k] += self.regularization * np.eye(k)
        try:
            self._lu = scipy.linalg.lu_factor(a, check_finite=True)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise SingularSystem(str(exc)) from exc
        if np.any(np.abs(np.diag(self._lu[0])) < 1e-300):
            raise SingularSystem("interpolation matrix is singular")
        self.matrix = a

    @property
    def K(self):
        return len(self.anchors)

    def coefficients(self, targets):
        t = np.asarray(targets, dtype=np.float64).reshape(self.K, 3)
        rhs = np.vstack([t, np.zeros((4, 3))])
        sol = scipy.linalg.lu_solve(self._lu, rhs)
        return sol[:self.K], sol[self.K:]

    def fit(self, targets):
        w, c = self.coefficients(targets)
        return RbfMap(self.anchors, np.asarray(targets, dtype=np.float64).reshape(-1, 3),
                      self.kernel, w, c)

    def basis(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.hstack([KERNELS[self.kernel](_distances(points, self.anchors)), _poly(points)])

    def operator(self, points):
        """(n, K) matrix ``M`` with ``map(points) == M @ targets``."""
        # the system matrix is symmetric, so rows of basis @ A^-1 come from A^-1 @ basis^T
        e = scipy.linalg.lu_solve(self._lu, self.basis(points).T)
        return e[:self.K].T


@dataclass(frozen=True, eq=False)
class RbfMap:
    anchors: np.ndarray
    targets: np.ndarray
    kernel: str
    weights: np.ndarray
    affine: np.ndarray

    def __call__(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        phi = KERNELS[self.kernel](_distances(points, self.anchors))
        return phi @ self.weights + _poly(points) @ self.affine

    def jacobian(self, points, step):
        """Central finite-difference Jacobians, shape (n, 3, 3)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        jac = np.empty((len(points), 3, 3))
        for a in range(3):
            dp = np.zeros(3)
            dp[a] = step
            jac[:, :, a] = (self(points + dp) - self(points - dp)) / (2 * step)
        return jac


@dataclass(frozen=True, eq=False)
class MappedFrame:
    mapped_vertices: np.ndarray
    source_frame: int
    group: int = 0


def fit_rbf(anchors, targets, kernel="thin_plate_spline"):
    """Interpolating RBF with affine part taking ``anchors`` to ``targets``."""
    return RbfSystem(anchors, kernel).fit(targets)


def map_vertices(rbf_map, mesh, group=0):
    return MappedFrame(rbf_map(mesh.vertices), mesh.frame_index, group)
