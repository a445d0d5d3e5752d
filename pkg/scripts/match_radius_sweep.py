"""Keypoint matches and deformation error of every frame of a finished run
for a range of match radii.

    python scripts/match_radius_sweep.py runs/collision --radii 0.1 0.12 0.15 0.2
"""

import argparse
import json
from pathlib import Path

from refmesh.deform import RemeshParams, remesh_frame
from refmesh.errors import InsufficientMatches
from refmesh.mesh import load_mesh
from refmesh.metrics import hausdorff
from refmesh.synth import gen_collision


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run_dir")
    ap.add_argument("--radii", type=float, nargs="+", default=[0.1, 0.12, 0.15, 0.2])
    ap.add_argument("--resolution", type=int, default=64)
    args = ap.parse_args()

    run = Path(args.run_dir)
    n = json.loads((run / "manifest.json").read_text())["n_frames"]
    seq = gen_collision(n, args.resolution)
    gof = json.loads((run / "manifest.json").read_text())["config"]["gof_size"]
    print("radius frame matches hausdorff")
    for r in args.radii:
        for f, frame in enumerate(seq):
            ref = load_mesh(run / f"ref_g{f // gof}.obj")
            try:
                res = remesh_frame(ref, frame, RemeshParams(match_radius=r))
                h = hausdorff(res.mesh, frame).symmetric
                print(f"{r:6.3f} {f:5d} {len(res.matches):7d} {h:.4f}", flush=True)
            except InsufficientMatches as exc:
                print(f"{r:6.3f} {f:5d} {exc.n_matches:7d} -", flush=True)


if __name__ == "__main__":
    main()
