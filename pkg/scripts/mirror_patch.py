"""Rotation-constrained matching of a chiral patch against its mirror image
and against rotated copies of itself.

    python scripts/mirror_patch.py --rotations 20
"""

import argparse

import numpy as np
from scipy.spatial.transform import Rotation

from refmesh.keypoints import match_error


def chiral_patch(n=41):
    x, y = np.meshgrid(np.linspace(-1, 1, n), np.linspace(-1, 1, n))
    x, y = x.ravel(), y.ravel()
    k = x ** 2 + y ** 2 <= 1
    x, y = x[k], y[k]
    z = np.zeros_like(x)
    for h, a in ((1.0, 0), (0.5, 100)):
        a = np.deg2rad(a)
        z += h * np.exp(-((x - 0.55 * np.cos(a)) ** 2 + (y - 0.55 * np.sin(a)) ** 2) / 0.04)
    return np.c_[x, y, z]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rotations", type=int, default=10)
    ap.add_argument("--radius", type=float, default=1.0)
    args = ap.parse_args()

    p = chiral_patch()
    c = int(np.argmin(np.linalg.norm(p[:, :2], axis=1)))
    m = p * [-1, 1, 1]
    err, _ = match_error(p, p[c], m, m[c], args.radius)
    print(f"mirror: Err/radius = {err / args.radius:.3f}")
    for s in range(args.rotations):
        truth = Rotation.random(random_state=s)
        q = (p - p[c]) @ truth.as_matrix().T + p[c]
        err, rot = match_error(p, p[c], q, q[c], args.radius)
        ang = np.rad2deg((Rotation.from_matrix(rot) * truth.inv()).magnitude())
        print(f"rotation {s}: Err/radius = {err / args.radius:.1e}, angle error {ang:.1e} deg")


if __name__ == "__main__":
    main()
