"""End-to-end orchestration: configuration, stages, artifacts and reports.

Stages run in order ``track -> mds -> align -> recon -> deform -> metrics``.
Every stage persists its outputs under the run directory; with ``resume``
enabled a stage whose artifacts are present (and whose configuration matches
the manifest) is loaded instead of recomputed. Artifact layout::

    <out>/<run>/
        trajectories.bin  neighbors.json  track_energy.json
        manifest.json  report.json
        dmatrix.bin  refcenters.bin            (whole-sequence centres only)
        ref_g<g>.obj                           (copy of group_<g>/ref.obj)
        group_<g>/
            dmatrix.bin  refcenters.bin  mds.json
            xprime_f<f>.bin  align.json  trace.csv
            soup.ply  ref.obj
            deformed_f<f>.obj  matches_f<f>.csv  error_f<f>.ply  deform.json
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import re
import shutil
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import (FrameAlignment, build_group_soup, group_grid, make_groups,
                        mapped_mesh, optimize_frame_alignment, write_trace_csv)
from .deform import RemeshParams, remesh_frame
from .errors import ConfigError, InsufficientMatches, RefMeshError, StageError
from .mesh import MeshSequence, load_mesh, save_mesh
from .metrics import hausdorff, vertex_error_field, write_error_field
from .rbf import KERNELS
from .recon import SignedFieldReconstructor
from .reference import (ReferenceCenters, align_embedding, build_distance_matrix,
                        mds_embed, normalized_stress)
from .tables import read_table, write_table
from .tracking import CenterTrajectories, track_sequence
from .voxel import voxelize_interior

logger = logging.getLogger(__name__)

STAGES = ("track", "mds", "align", "recon", "deform", "metrics")
# bump when a stage's output for a given config changes
STAGE_VERSIONS = dict({s: 1 for s in STAGES}, track=2, deform=2)


@dataclass
class PipelineConfig:
    input_dir: str = ""
    output_dir: str = "out"
    run_name: str = "run"
    seed: int = 0
    # tracking
    K: int = 1000
    tracking_resolution: int = 512
    tracking_lambda: float = 1.0
    tracking_max_iter: int = 50
    tracking_tol: float = 1e-6
    tracking_supersample: int = 1
    # reference space
    gof_size: int = 5
    mds_eps: float = 1e-20
    mds_max_iter: int = 300
    global_centers: bool = False
    kernel: str = "thin_plate_spline"
    # alignment
    iou_voxel_size: float = 0.01
    iou_resolution: int = 0          # > 0 overrides iou_voxel_size (cells along longest axis)
    align_iters: int = 1000
    align_global_stage: bool = True
    consensus_voxels: float = 2.0    # soup consensus tolerance in IoU voxels; 0 disables
    # reconstruction
    recon_resolution: int = 256
    merge_voxels: float = 2.0        # soup merge spacing in IoU voxels
    # keypoints / deformation
    salient_radius: float = 0.05
    nms_radius: float = 0.1
    match_radius: float = 0.15
    candidate_radius: float = 0.25
    sigma_th: float = 0.0            # 0 -> 0.25 * match radius
    arap_alpha: float = 0.02
    arap_max_iter: int = 100
    arap_tol: float = 1e-6
    deform_frames: str = "all"       # "all" or "rframe"
    strict_deform: bool = False
    # control
    stop_after: str = ""
    resume: bool = False

    def to_dict(self):
        return dataclasses.asdict(self)


def _coerce(value, typ):
    if isinstance(value, str):
        if typ is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        return value
    if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return int(value)
    if not isinstance(value, typ):
        raise ValueError(f"expected {typ.__name__}, got {type(value).__name__}")
    return value


_TYPES = {f.name: {"int": int, "float": float, "str": str, "bool": bool}[f.type]
          for f in dataclasses.fields(PipelineConfig)}


def validate_config(config=None, require_input=False):
    """Normalise a mapping (or :class:`PipelineConfig`) into a config.

    Missing keys take their defaults. Raises :class:`ConfigError` listing
    every violation.
    """
    if isinstance(config, PipelineConfig):
        config = config.to_dict()
    config = dict(config or {})
    errors, values = [], {}
    for key, raw in config.items():
        if key not in _TYPES:
            errors.append(f"unknown key {key!r}")
            continue
        try:
            values[key] = _coerce(raw, _TYPES[key])
        except (TypeError, ValueError) as exc:
            errors.append(f"{key}: {exc}")
    cfg = PipelineConfig(**values)
    checks = [
        (cfg.K >= 1, "K must be >= 1"),
        (cfg.tracking_resolution >= 2, "tracking_resolution must be >= 2"),
        (cfg.tracking_lambda >= 0, "tracking_lambda must be >= 0"),
        (cfg.tracking_max_iter >= 1, "tracking_max_iter must be >= 1"),
        (cfg.tracking_tol > 0, "tracking_tol must be > 0"),
        (cfg.tracking_supersample >= 1, "tracking_supersample must be >= 1"),
        (cfg.gof_size >= 1, "gof_size must be >= 1"),
        (cfg.mds_eps > 0, "mds_eps must be > 0"),
        (cfg.mds_max_iter >= 1, "mds_max_iter must be >= 1"),
        (cfg.kernel in KERNELS, f"kernel must be one of {sorted(KERNELS)}"),
        (cfg.iou_voxel_size > 0, "iou_voxel_size must be > 0"),
        (cfg.iou_resolution == 0 or cfg.iou_resolution >= 2, "iou_resolution must be 0 or >= 2"),
        (cfg.align_iters >= 0, "align_iters must be >= 0"),
        (cfg.consensus_voxels >= 0, "consensus_voxels must be >= 0"),
        (cfg.recon_resolution >= 8, "recon_resolution must be >= 8"),
        (cfg.merge_voxels >= 0, "merge_voxels must be >= 0"),
        (min(cfg.salient_radius, cfg.nms_radius, cfg.match_radius, cfg.candidate_radius) > 0,
         "keypoint radii must be > 0"),
        (cfg.sigma_th >= 0, "sigma_th must be >= 0"),
        (cfg.arap_alpha >= 0, "arap_alpha must be >= 0"),
        (cfg.arap_max_iter >= 1, "arap_max_iter must be >= 1"),
        (cfg.deform_frames in ("all", "rframe"), "deform_frames must be 'all' or 'rframe'"),
        (cfg.stop_after in ("",) + STAGES, f"stop_after must be one of {STAGES}"),
    ]
    for ok, msg in checks:
        if not ok:
            errors.append(msg)
    if require_input:
        if not cfg.input_dir:
            errors.append("input_dir is required")
        elif not Path(cfg.input_dir).is_dir():
            errors.append(f"input_dir {cfg.input_dir!r} is not a directory")
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config_file(path):
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"{path}:{n}: expected 'key = value'"])
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def derive_seed(root, *labels):
    """Stable per-stage seed from the root seed and a label path."""
    words = [int(root) & 0xFFFFFFFF] + [zlib.crc32(str(x).encode()) for x in labels]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def _natural_key(path):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", path.name)]


def load_sequence(input_dir):
    paths = sorted((p for p in Path(input_dir).iterdir()
                    if p.suffix.lower() in (".obj", ".ply")), key=_natural_key)
    if not paths:
        raise RefMeshError(f"no OBJ/PLY frames in {input_dir}")
    return MeshSequence(tuple(load_mesh(p, frame_index=i) for i, p in enumerate(paths)),
                        Path(input_dir).name)


def write_sequence(seq, out_dir, prefix="frame"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for m in seq:
        save_mesh(m, out / f"{prefix}_{m.frame_index:04d}.obj")


def _json_dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


@dataclass
class GroupState:
    plan: object
    ref_centers: ReferenceCenters = None
    xprime: dict = field(default_factory=dict)
    grid: object = None
    ref_mesh: object = None
    deformed: dict = field(default_factory=dict)
    deform_info: dict = field(default_factory=dict)


class Pipeline:
    def __init__(self, config, seq=None):
        self.cfg = config
        self.seq = seq
        self.run_dir = Path(config.output_dir) / config.run_name
        self.manifest = None
        self.timings = {}

    # -- bookkeeping -----------------------------------------------------
    def _config_hash(self, stage):
        """Hash of every setting that can influence ``stage`` or earlier."""
        d = self.cfg.to_dict()
        for k in ("output_dir", "run_name", "stop_after", "resume"):
            d.pop(k)
        d["stage_versions"] = {s: STAGE_VERSIONS[s] for s in STAGES[:STAGES.index(stage) + 1]}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def _can_resume(self, stage):
        if not self.cfg.resume or self.manifest is None:
            return False
        done = self.manifest.get("completed", {})
        return done.get(stage) == self._config_hash(stage)

    def _mark(self, stage):
        self.manifest["completed"][stage] = self._config_hash(stage)
        self._write_manifest()

    def _write_manifest(self):
        _json_dump(self.run_dir / "manifest.json", self.manifest)

    def _gdir(self, g):
        d = self.run_dir / f"group_{g}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    # -- stages ------------------------------------------------------------
    def stage_track(self):
        path = self.run_dir / "trajectories.bin"
        if self._can_resume("track"):
            pos = read_table(path)
            nb = json.loads((self.run_dir / "neighbors.json").read_text())
            self.traj = CenterTrajectories(pos, [np.array(n, dtype=np.int64) for n in nb])
            return
        c = self.cfg
        self.traj = track_sequence(self.seq, c.K, c.tracking_resolution,
                                   derive_seed(c.seed, "track"), c.tracking_lambda,
                                   c.tracking_max_iter, c.tracking_tol,
                                   supersample=c.tracking_supersample)
        write_table(path, self.traj.positions)
        _json_dump(self.run_dir / "neighbors.json", [n.tolist() for n in self.traj.neighbors])
        _json_dump(self.run_dir / "track_energy.json", self.traj.energy_history)

    def stage_mds(self):
        c = self.cfg
        self.groups = [GroupState(p) for p in make_groups(len(self.seq), c.gof_size)]
        resume = self._can_resume("mds")
        if c.global_centers:
            if resume:
                pts = read_table(self.run_dir / "refcenters.bin")[:, 0]
                info = json.loads((self.run_dir / "mds.json").read_text())
                shared = ReferenceCenters(pts, info["stress"], info["converged"], info["n_iter"])
            else:
                dm = build_distance_matrix(self.traj)
                shared = mds_embed(dm, c.mds_eps, c.mds_max_iter, derive_seed(c.seed, "mds"))
                write_table(self.run_dir / "dmatrix.bin", dm.d, kind="scalar")
                write_table(self.run_dir / "refcenters.bin", shared.points)
                _json_dump(self.run_dir / "mds.json", {"stress": shared.stress,
                           "converged": shared.converged, "n_iter": shared.n_iter})
        for gs in self.groups:
            p = gs.plan
            gdir = self._gdir(p.group_index)
            if resume:
                pts = read_table(gdir / "refcenters.bin")[:, 0]
                info = json.loads((gdir / "mds.json").read_text())
                gs.ref_centers = ReferenceCenters(pts, info["stress"], info["converged"],
                                                  info["n_iter"])
                continue
            if c.global_centers:
                rc = shared
            else:
                dm = build_distance_matrix(self.traj, p.frame_range)
                write_table(gdir / "dmatrix.bin", dm.d, kind="scalar")
                rc = mds_embed(dm, c.mds_eps, c.mds_max_iter,
                               derive_seed(c.seed, "mds", p.group_index))
            # place the embedding in the R-frame's coordinates
            pts = align_embedding(rc.points, self.traj.frame(p.r_frame))
            gs.ref_centers = ReferenceCenters(pts, rc.stress, rc.converged, rc.n_iter)
            write_table(gdir / "refcenters.bin", pts)
            _json_dump(gdir / "mds.json", {"stress": rc.stress, "converged": rc.converged,
                                           "n_iter": rc.n_iter})

    def _iou_grid(self, mapped):
        c = self.cfg
        if c.iou_resolution:
            return group_grid(mapped, resolution=c.iou_resolution)
        return group_grid(mapped, voxel_size=c.iou_voxel_size)

    def stage_align(self):
        c = self.cfg
        resume = self._can_resume("align")
        for gs in self.groups:
            p = gs.plan
            gdir = self._gdir(p.group_index)
            x = gs.ref_centers.points
            mapped = [mapped_mesh(self.seq[f], self.traj.frame(f), x, c.kernel) for f in p.frames]
            gs.grid = self._iou_grid(mapped)
            if resume:
                for f in p.frames:
                    gs.xprime[f] = read_table(gdir / f"xprime_f{f}.bin")[:, 0]
                info = json.loads((gdir / "align.json").read_text())
                p.iou_before = {int(k): v for k, v in info["iou_before"].items()}
                p.iou_after = {int(k): v for k, v in info["iou_after"].items()}
                continue
            target = voxelize_interior(mapped[p.r_frame - p.frame_range[0]], frame=gs.grid,
                                       check=False)
            for f in p.frames:
                if f == p.r_frame:
                    gs.xprime[f] = x.copy()
                    p.iou_before[f] = p.iou_after[f] = 1.0
                    p.traces[f] = [1.0]
                else:
                    try:
                        prob = FrameAlignment(self.seq[f], self.traj.frame(f), x, target,
                                              gs.grid, self.traj.neighbors, c.kernel)
                        res = optimize_frame_alignment(prob, c.align_iters,
                                                       derive_seed(c.seed, "align", f),
                                                       c.align_global_stage)
                    except RefMeshError as exc:
                        raise StageError("align", exc, p.group_index, f) from exc
                    gs.xprime[f] = res.centers
                    p.iou_before[f], p.iou_after[f] = res.iou_before, res.iou_after
                    p.traces[f] = res.trace
                    logger.info("group %d frame %d: IoU %.4f -> %.4f", p.group_index, f,
                                res.iou_before, res.iou_after)
                write_table(gdir / f"xprime_f{f}.bin", gs.xprime[f])
            p.optimized_centers = gs.xprime
            write_trace_csv(gdir / "trace.csv", p.traces)
            _json_dump(gdir / "align.json", {"iou_before": p.iou_before,
                                             "iou_after": p.iou_after,
                                             "voxel_size": gs.grid.voxel_size})

    def stage_recon(self):
        c = self.cfg
        resume = self._can_resume("recon")
        for gs in self.groups:
            p = gs.plan
            gdir = self._gdir(p.group_index)
            if resume:
                gs.ref_mesh = load_mesh(gdir / "ref.obj")
                continue
            h = gs.grid.voxel_size
            try:
                soup, _ = build_group_soup(
                    [self.seq[f] for f in p.frames], [self.traj.frame(f) for f in p.frames],
                    [gs.xprime[f] for f in p.frames], c.kernel,
                    consensus_tol=c.consensus_voxels * h if c.consensus_voxels else None)
                rec = SignedFieldReconstructor(merge_spacing=c.merge_voxels * h)
                gs.ref_mesh = rec.reconstruct(soup, c.recon_resolution)
            except RefMeshError as exc:
                raise StageError("recon", exc, p.group_index) from exc
            soup.dump_ply(gdir / "soup.ply")
            save_mesh(gs.ref_mesh, gdir / "ref.obj")
            shutil.copyfile(gdir / "ref.obj", self.run_dir / f"ref_g{p.group_index}.obj")

    def remesh_params(self):
        c = self.cfg
        return RemeshParams(salient_radius=c.salient_radius, nms_radius=c.nms_radius,
                            match_radius=c.match_radius, candidate_radius=c.candidate_radius,
                            sigma_th=c.sigma_th or None, alpha=c.arap_alpha,
                            max_iter=c.arap_max_iter, tol=c.arap_tol)

    def stage_deform(self):
        c = self.cfg
        resume = self._can_resume("deform")
        params = self.remesh_params()
        for gs in self.groups:
            p = gs.plan
            gdir = self._gdir(p.group_index)
            frames = [p.r_frame] if c.deform_frames == "rframe" else list(p.frames)
            if resume:
                info = json.loads((gdir / "deform.json").read_text())
                gs.deform_info = {int(k): v for k, v in info.items()}
                for f in frames:
                    if gs.deform_info[f]["status"] == "ok":
                        gs.deformed[f] = load_mesh(gdir / f"deformed_f{f}.obj", frame_index=f)
                continue
            for f in frames:
                try:
                    out = remesh_frame(gs.ref_mesh, self.seq[f], params)
                except InsufficientMatches as exc:
                    if c.strict_deform:
                        raise StageError("deform", exc, p.group_index, f) from exc
                    logger.warning("group %d frame %d: %s", p.group_index, f, exc)
                    gs.deform_info[f] = {"status": "insufficient_matches",
                                         "matches": exc.n_matches}
                    continue
                except RefMeshError as exc:
                    raise StageError("deform", exc, p.group_index, f) from exc
                gs.deformed[f] = out.mesh
                save_mesh(out.mesh, gdir / f"deformed_f{f}.obj")
                out.matches.write_csv(gdir / f"matches_f{f}.csv")
                gs.deform_info[f] = {"status": "ok", "matches": len(out.matches),
                                     "arap_iterations": out.deformation.n_iter,
                                     "arap_energy": out.deformation.energy_history[-1]}
            _json_dump(gdir / "deform.json", gs.deform_info)

    def stage_metrics(self):
        report = {"groups": [], "version": __version__}
        for gs in self.groups:
            p = gs.plan
            gdir = self._gdir(p.group_index)
            per_frame = {}
            for f, m in sorted(gs.deformed.items()):
                h = hausdorff(m, self.seq[f])
                write_error_field(gdir / f"error_f{f}.ply", m, vertex_error_field(m, self.seq[f]))
                per_frame[str(f)] = {"forward": h.forward, "backward": h.backward,
                                     "symmetric": h.symmetric}
            n_comp, _ = gs.ref_mesh.face_components()
            syms = [v["symmetric"] for v in per_frame.values()]
            others = [v for f, v in p.iou_after.items() if f != p.r_frame]
            d = build_distance_matrix(self.traj, p.frame_range).d
            report["groups"].append({
                "group": p.group_index,
                "frames": [p.frame_range[0], p.frame_range[1]],
                "r_frame": p.r_frame,
                "hausdorff_sym": max(syms) if syms else None,
                "hausdorff_per_frame": per_frame,
                "iou_final": float(np.mean(others)) if others else 1.0,
                "iou_initial": float(np.mean([v for f, v in p.iou_before.items()
                                              if f != p.r_frame])) if others else 1.0,
                "stress": gs.ref_centers.stress,
                "stress_recomputed": normalized_stress(d, gs.ref_centers.points),
                "ref_components": int(n_comp),
                "ref_vertices": gs.ref_mesh.n_vertices,
                "deform": {str(k): v for k, v in gs.deform_info.items()},
            })
        report["timings"] = self.timings
        _json_dump(self.run_dir / "report.json", report)
        self.report = report

    # -- driver ----------------------------------------------------------
    def run(self):
        c = self.cfg
        self.run_dir.mkdir(parents=True, exist_ok=True)
        old = None
        mpath = self.run_dir / "manifest.json"
        if c.resume and mpath.exists():
            old = json.loads(mpath.read_text())
        if self.seq is None:
            self.seq = load_sequence(c.input_dir)
        self.manifest = {
            "config": c.to_dict(),
            "seeds": {"root": c.seed, "track": derive_seed(c.seed, "track")},
            "stage_versions": STAGE_VERSIONS,
            "package_version": __version__,
            "n_frames": len(self.seq),
            "completed": dict(old.get("completed", {})) if old else {},
        }
        self._write_manifest()
        last = c.stop_after or STAGES[-1]
        for stage in STAGES[:STAGES.index(last) + 1]:
            t = time.perf_counter()
            resumed = self._can_resume(stage)
            try:
                getattr(self, f"stage_{stage}")()
            except StageError:
                raise
            except RefMeshError as exc:
                raise StageError(stage, exc, getattr(exc, "group", None),
                                 getattr(exc, "frame", None)) from exc
            self.timings[stage] = time.perf_counter() - t
            logger.info("stage %s %s in %.1fs", stage, "resumed" if resumed else "done",
                        self.timings[stage])
            if not resumed:
                # later stages are stale once an earlier one was recomputed
                for later in STAGES[STAGES.index(stage) + 1:]:
                    self.manifest["completed"].pop(later, None)
            self._mark(stage)
        return self.run_dir


def run_pipeline(config, seq=None):
    """Validate ``config`` and run the pipeline; returns the run directory.

    ``seq`` may supply the frames directly instead of ``input_dir``.
    """
    cfg = validate_config(config, require_input=seq is None)
    return Pipeline(cfg, seq).run()
