"""Command-line interface: ``run``, ``gen``, ``metrics`` and ``inspect``.

Exit codes: 0 success, 1 configuration error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, RefMeshError, StageError
from .mesh import load_mesh
from .metrics import hausdorff
from .pipeline import (STAGES, PipelineConfig, parse_config_file, run_pipeline,
                       write_sequence)
from .synth import gen_articulated_bar, gen_collision

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2
# options with their own dedicated flags
_FIXED = ("input_dir", "output_dir", "run_name", "stop_after", "resume", "global_centers")


def _add_overrides(p):
    """One ``--key`` option per config field (underscores become dashes)."""
    for name in PipelineConfig.__dataclass_fields__:
        if name in _FIXED:
            continue
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None,
                       metavar="VALUE")


def _cmd_run(args):
    cfg = parse_config_file(args.config) if args.config else {}
    cfg["input_dir"] = args.input_dir
    cfg["output_dir"] = args.out
    if args.run_name:
        cfg["run_name"] = args.run_name
    if args.stop_after:
        cfg["stop_after"] = args.stop_after
    cfg["resume"] = args.resume
    for name in PipelineConfig.__dataclass_fields__:
        v = getattr(args, name, None)
        if name == "global_centers" and v is not None:
            cfg[name] = v
        if v is not None and name not in _FIXED:
            cfg[name] = v
    run_dir = run_pipeline(cfg)
    print(run_dir)
    return EXIT_OK


def _cmd_gen(args):
    if args.kind == "collision":
        seq = gen_collision(args.frames, args.resolution, args.seed)
    else:
        seq = gen_articulated_bar(args.frames, np.deg2rad(args.max_bend))
    write_sequence(seq, args.out)
    print(f"wrote {len(seq)} frames to {args.out}")
    return EXIT_OK


def _cmd_metrics(args):
    a, b = load_mesh(args.mesh_a), load_mesh(args.mesh_b)
    h = hausdorff(a, b, samples_per_area=0 if args.vertices_only else None, seed=args.seed)
    print(json.dumps({"forward": h.forward, "backward": h.backward,
                      "symmetric": h.symmetric}))
    return EXIT_OK


def _cmd_inspect(args):
    run = Path(args.run_dir)
    if not (run / "manifest.json").exists():
        raise ConfigError([f"{run} has no manifest.json"])
    man = json.loads((run / "manifest.json").read_text())
    print(f"run: {run}")
    print(f"frames: {man.get('n_frames')}  version: {man.get('package_version')}")
    print("completed stages: " + ", ".join(s for s in STAGES if s in man.get("completed", {})))
    rep = run / "report.json"
    if rep.exists():
        for g in json.loads(rep.read_text())["groups"]:
            hs = g["hausdorff_sym"]
            print(f"group {g['group']} frames {g['frames'][0]}-{g['frames'][1]}: "
                  f"components={g['ref_components']} iou={g['iou_final']:.4f} "
                  f"stress={g['stress']:.3e} hausdorff="
                  + ("n/a" if hs is None else f"{hs:.4g}"))
    for ref in sorted(run.glob("ref_g*.obj")):
        m = load_mesh(ref)
        n, _ = m.face_components()
        print(f"{ref.name}: {m.n_vertices} vertices, {m.n_faces} faces, {n} components")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="refmesh", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the pipeline on an OBJ/PLY sequence")
    p.add_argument("input_dir")
    p.add_argument("--out", default="out")
    p.add_argument("--run-name", default=None)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--stop-after", choices=STAGES)
    p.add_argument("--resume", action="store_true",
                   help="reuse artifacts of completed stages with matching config")
    p.add_argument("--global-centers", dest="global_centers", action="store_const",
                   const="true", default=None,
                   help="one set of reference centres for the whole sequence")
    _add_overrides(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("gen", help="write a synthetic sequence")
    p.add_argument("kind", choices=("collision", "bar"))
    p.add_argument("out")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-bend", type=float, default=90.0, help="degrees")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("metrics", help="Hausdorff distance between two meshes")
    p.add_argument("mesh_a")
    p.add_argument("mesh_b")
    p.add_argument("--vertices-only", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("inspect", help="summarise a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=_cmd_inspect)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except RefMeshError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
