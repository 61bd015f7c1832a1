"""Batch command-line pipeline.

Subcommands: simulate (synthetic scene -> GT mesh, frame sequences, pin
files, pose log), register (camera-to-world transform), evaluate (error
fields -> metrics -> masks -> pooled tiles -> long table), stats (ART
ANOVA over the long table), report (per-condition grand means).

All outputs are deterministic given (inputs, seed); partially written
outputs are removed when a command fails.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errorfield import (MetricFields, VertexIndex3, aggregate,
                         shape_precision, signed_error_frame,
                         temporal_mean_cloud, write_heatmap_ppm,
                         write_metrics_csv)
from .geom import RigidTransform, axis_angle_matrix, compose, inverse
from .maskpool import (content_mask, footprint_of, pool, read_footprint,
                       viewfield_mask, write_footprint, write_tiles_csv)
from .meshio import (FormatError, read_correspondences, read_frames, read_ply,
                     read_pose_log, write_correspondences, write_frames,
                     write_ply, write_pose_log, PoseLog)
from .raycast import build_bvh
from .registration import (METHOD_KINE, METHOD_PINS, build_chain,
                           fit_rigid_svd, solve_kine)
from .sensorsim import (NoiseModel, SceneSpec, generate_scene, render_depth,
                        render_pin_observations)
from .stats import LongTable, append_long_rows, art_anova

POSE_LOG_HZ = 50.0
CONDITION_GAP_S = 1.0


class _Outputs:
    """Tracks files a command writes so they can be rolled back on
    failure. Files that already existed are restored from a snapshot."""

    def __init__(self):
        self._created = []
        self._snapshots = []

    def stage(self, path) -> Path:
        path = Path(path)
        if path.exists():
            self._snapshots.append((path, path.read_bytes()))
        else:
            self._created.append(path)
        return path

    def rollback(self):
        for path in self._created:
            try:
                path.unlink(missing_ok=True)
            except OSError:
                pass
        for path, blob in self._snapshots:
            try:
                path.write_bytes(blob)
            except OSError:
                pass


class RunConfig:
    """Evaluation run configuration (JSON). See README for the schema."""

    def __init__(self, data: dict, base: Path):
        def resolve(key, required=False):
            if key not in data or data[key] is None:
                if required:
                    raise ValueError(f"run config missing {key!r}")
                return None
            return (base / data[key]).resolve() if not Path(data[key]).is_absolute() \
                else Path(data[key])

        self.mesh = resolve("mesh", required=True)
        self.frames = resolve("frames", required=True)
        self.pose_log = resolve("pose_log")
        self.correspondences = resolve("correspondences")
        self.out = resolve("out") or (base / "out")
        reg = dict(data.get("registration", {}))
        self.reg_mode = reg.get("mode", METHOD_PINS)
        if self.reg_mode not in (METHOD_PINS, METHOD_KINE):
            raise ValueError(f"unknown registration mode {self.reg_mode!r}")
        self.t_p = reg.get("t_p")
        self.t_k = reg.get("t_k")
        masks = dict(data.get("masks", {}))
        self.mask_viewfield = bool(masks.get("viewfield", True))
        self.mask_content = bool(masks.get("content", True))
        fp = masks.get("partner_footprint")
        self.partner_footprint = None if fp is None else \
            ((base / fp) if not Path(fp).is_absolute() else Path(fp))
        tiles = dict(data.get("tiles", {}))
        self.tile_cols = int(tiles.get("cols", 6))
        self.tile_rows = int(tiles.get("rows", 5))
        self.pooling_threshold = float(data.get("pooling_threshold", 0.95))
        if not 0.0 < self.pooling_threshold <= 1.0:
            raise ValueError("pooling_threshold must be in (0, 1]")
        self.heatmap_range = float(data.get("heatmap_range_mm", 10.0)) / 1000.0
        self.factors = dict(data.get("factors", {}))
        self.long_table = resolve("long_table")
        for key, path in (("mesh", self.mesh), ("frames", self.frames),
                          ("pose_log", self.pose_log),
                          ("correspondences", self.correspondences)):
            if path is not None and not path.exists():
                raise FileNotFoundError(f"{key} file not found: {path}")

    @staticmethod
    def load(path) -> "RunConfig":
        path = Path(path)
        with open(path) as fh:
            return RunConfig(json.load(fh), path.parent)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _pin_noise(noise: NoiseModel, n_frames: int) -> NoiseModel:
    # pins are picked on the temporally averaged cloud, so their noise is
    # the per-frame sigma shrunk by sqrt(n); fiducials carry no tissue bias
    s = 1.0 / np.sqrt(max(n_frames, 1))
    return NoiseModel(noise.sigma_base * s, noise.sigma_per_meter * s,
                      {}, [], noise.illumination)


def _synthesize_pose_log(times_poses, t_ca: RigidTransform) -> PoseLog:
    """Dense 50 Hz log of T_AT(t) consistent with the camera path:
    T_AT(t) = inverse(T_CA) * T_CO(t), piecewise constant per condition
    with interpolated gaps."""
    from .registration import interpolate_pose
    knots_t = []
    knots_p = []
    for t0, t1, pose in times_poses:
        knots_t += [t0, t1]
        knots_p += [pose, pose]
    key_log = PoseLog(np.array(knots_t), knots_p)
    t_end = knots_t[-1]
    # one extra step past the last condition so every frame timestamp is
    # covered even when fps exceeds the log rate
    times = np.arange(0.0, t_end + 1.0 / POSE_LOG_HZ + 1e-9,
                      1.0 / POSE_LOG_HZ)
    inv_ca = inverse(t_ca)
    transforms = [compose(inv_ca, interpolate_pose(key_log, min(t, t_end)))
                  for t in times]
    return PoseLog(times, transforms)


def cmd_simulate(args) -> int:
    spec = SceneSpec.from_json(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tracker = _Outputs()
    try:
        mesh, pins = generate_scene(spec, args.seed)
        mesh_path = tracker.stage(out / "scene.ply")
        write_ply(mesh, mesh_path, binary=True)
        bvh = build_bvh(mesh.vertices, mesh.faces)

        conditions = spec.conditions or [
            {"name": name, "camera": name, "labels": {}}
            for name in sorted(spec.cameras)]
        seg = spec.frames / spec.fps
        manifest = {"mesh": mesh_path.name, "seed": args.seed,
                    "conditions": [], "pose_log": "pose_log.csv"}
        spans = []
        for i, cond in enumerate(conditions):
            name = cond.get("name", cond["camera"])
            cam = spec.camera(cond["camera"])
            noise = spec.condition_noise(cond)
            t0 = i * (seg + CONDITION_GAP_S)
            seq = render_depth(mesh, cam, noise, spec.frames,
                               seed=args.seed + i, bvh=bvh, t0=t0,
                               fps=spec.fps, camera_id=cond["camera"],
                               conditions=dict(cond.get("labels", {})))
            ocf_path = tracker.stage(out / f"{name}.ocf")
            write_frames(seq, ocf_path)
            entry = {"name": name, "frames": ocf_path.name,
                     "camera": cond["camera"], "t0": t0,
                     "labels": dict(cond.get("labels", {})), "pins": None}
            try:
                corr = render_pin_observations(
                    mesh, cam, _pin_noise(noise, spec.frames), pins,
                    seed=args.seed + i, bvh=bvh)
                pin_path = tracker.stage(out / f"{name}_pins.csv")
                write_correspondences(corr, pin_path)
                entry["pins"] = pin_path.name
            except ValueError as exc:
                print(f"note: {name}: {exc} (no pin file; use kine "
                      f"registration)", file=sys.stderr)
            manifest["conditions"].append(entry)
            spans.append((t0, t0 + seg, cam.pose))
        log = _synthesize_pose_log(spans, _simulated_mount())
        write_pose_log(log, tracker.stage(out / "pose_log.csv"))
        manifest_path = tracker.stage(out / "manifest.json")
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True)
                                 + "\n")
    except Exception:
        tracker.rollback()
        raise
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


def _simulated_mount() -> RigidTransform:
    # fixed camera-to-arm mount of the synthetic rig; cancels out of the
    # kinematic chain, so its exact value is arbitrary
    return RigidTransform(axis_angle_matrix([1.0, 0.3, -0.2], 0.3),
                          np.array([0.012, -0.007, 0.03]))


# ---------------------------------------------------------------------------
# register / evaluate
# ---------------------------------------------------------------------------

def _solve_registration(cfg: RunConfig, frame_times=None):
    """Returns (result, per-frame transforms or None)."""
    if cfg.correspondences is None:
        raise ValueError("registration requires a correspondences file")
    fit = fit_rigid_svd(read_correspondences(cfg.correspondences))
    if cfg.reg_mode == METHOD_PINS:
        return fit, None
    if cfg.pose_log is None:
        raise ValueError("kine registration requires a pose_log file")
    if cfg.t_p is None:
        raise ValueError("kine registration requires registration.t_p")
    log = read_pose_log(cfg.pose_log)
    chain = build_chain(float(cfg.t_p), fit, log)
    per_frame = None
    if cfg.t_k is not None:
        t_k = float(cfg.t_k)
    elif frame_times:
        t_k = float(frame_times[len(frame_times) // 2])
    else:
        t_k = float(cfg.t_p)
    result = solve_kine(chain, t_k, log)
    if frame_times is not None:
        per_frame = [solve_kine(chain, float(t), log).transform
                     for t in frame_times]
    return result, per_frame


def _registration_json(result) -> dict:
    return {"method": result.method,
            "T_CO": [float(v) for v in result.transform.matrix().ravel()],
            "rms_m": float(result.rms),
            "n_points": int(result.n_points)}


def cmd_register(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out) if args.out else cfg.out
    out.mkdir(parents=True, exist_ok=True)
    tracker = _Outputs()
    try:
        result, _ = _solve_registration(cfg)
        payload = json.dumps(_registration_json(result), indent=2,
                             sort_keys=True) + "\n"
        tracker.stage(out / "registration.json").write_text(payload)
    except Exception:
        tracker.rollback()
        raise
    print(payload, end="")
    return 0


def cmd_evaluate(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out) if args.out else cfg.out
    out.mkdir(parents=True, exist_ok=True)
    tracker = _Outputs()
    try:
        mesh = read_ply(cfg.mesh)
        seq = read_frames(cfg.frames)
        index = VertexIndex3(mesh)
        frame_times = [f.timestamp for f in seq.frames]
        result, per_frame = _solve_registration(cfg, frame_times)
        transforms = per_frame if per_frame is not None else result.transform

        fields = aggregate(seq, transforms, mesh, index,
                           exact_face=args.exact_face, threads=args.threads)
        mid = result.transform if per_frame is None else \
            per_frame[len(per_frame) // 2]
        ref_field = signed_error_frame(temporal_mean_cloud(seq), mid, mesh,
                                       index, exact_face=args.exact_face)

        analysis = fields.valid.copy()
        masks_applied = []
        if cfg.mask_viewfield and not args.no_viewfield_mask:
            if cfg.partner_footprint is not None:
                partner = read_footprint(cfg.partner_footprint)
                analysis &= viewfield_mask(ref_field, partner)
                masks_applied.append("viewfield")
            else:
                print("note: view-field mask enabled but no partner "
                      "footprint configured; skipping", file=sys.stderr)
        if cfg.mask_content and not args.no_content_mask:
            analysis &= content_mask(ref_field, mesh)
            masks_applied.append("content")
        if not analysis.any():
            raise ValueError("masking removed every pixel")

        # shape precision is defined relative to the analyzed region
        masked = MetricFields(fields.width, fields.height, analysis,
                              np.where(analysis, fields.mean, 0.0),
                              np.where(analysis, fields.sd, 0.0),
                              shape_precision(fields.mean, analysis),
                              np.where(analysis, fields.support, 0))
        grids = pool(masked, analysis, rows=cfg.tile_rows,
                     cols=cfg.tile_cols,
                     outlier_threshold=cfg.pooling_threshold)

        reg_payload = json.dumps(_registration_json(result), indent=2,
                                 sort_keys=True) + "\n"
        tracker.stage(out / "registration.json").write_text(reg_payload)
        write_metrics_csv(masked, tracker.stage(out / "metrics.csv"))
        for name in MetricFields.METRICS:
            write_heatmap_ppm(masked.metric(name), masked.valid,
                              tracker.stage(out / f"{name}.ppm"),
                              range_m=cfg.heatmap_range)
        write_footprint(footprint_of(ref_field, len(mesh.vertices)),
                        tracker.stage(out / "footprint.txt"))
        write_tiles_csv(grids, tracker.stage(out / "tiles.csv"))

        long_rows = 0
        if cfg.long_table is not None:
            if not all(k in cfg.factors for k in "ABC"):
                raise ValueError("long_table requires factors A, B, C in "
                                 "the run config")
            levels = []
            for k in "ABC":
                key = cfg.factors[k]
                if key not in seq.conditions:
                    raise ValueError(f"frames carry no condition {key!r} "
                                     f"for factor {k}")
                levels.append(seq.conditions[key])
            rows = []
            for metric in MetricFields.METRICS:
                grid = grids[metric]
                for r in range(grid.rows):
                    for c in range(grid.cols):
                        v = grid.value[r, c]
                        if not np.isnan(v):
                            rows.append((grid.tile_id(r, c), *levels,
                                         metric, float(v)))
            tracker.stage(cfg.long_table)
            append_long_rows(cfg.long_table, rows)
            long_rows = len(rows)

        manifest = {
            "frames": len(seq.frames),
            "resolution": [fields.width, fields.height],
            "registration": _registration_json(result),
            "masks_applied": masks_applied,
            "analysis_pixels": int(analysis.sum()),
            "retained_pixels": int(fields.valid.sum()),
            "degenerate_pixels": ref_field.degenerate_pixels,
            "boundary_pixels": ref_field.boundary_pixels,
            "grand_mean_mm": {
                m: float(np.mean(masked.metric(m)[analysis]) * 1000.0)
                for m in MetricFields.METRICS},
            "tiles_present": int(grids["mean"].present().sum()),
            "long_table_rows": long_rows,
        }
        payload = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        tracker.stage(out / "evaluate.json").write_text(payload)
    except Exception:
        tracker.rollback()
        raise
    print(payload, end="")
    return 0


# ---------------------------------------------------------------------------
# stats / report
# ---------------------------------------------------------------------------

def cmd_stats(args) -> int:
    table = LongTable.from_csv(args.long_table, collapse="mean")
    tracker = _Outputs()
    try:
        anova = art_anova(table, args.metric)
        out = Path(args.out) if args.out else \
            Path(args.long_table).parent / f"anova_{args.metric}.csv"
        anova.to_csv(tracker.stage(out))
    except Exception:
        tracker.rollback()
        raise
    if anova.dropped_tiles:
        print(f"note: dropped incomplete tiles: {anova.dropped_tiles}",
              file=sys.stderr)
    print("effect,F,df1,df2,p")
    for r in anova.rows:
        print(f"{r.effect},{r.f_stat:.6g},{r.df1},{r.df2},{r.p:.6g}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    table_path = run_dir / "long_table.csv"
    if not table_path.exists():
        raise FileNotFoundError(f"no long_table.csv under {run_dir}")
    table = LongTable.from_csv(table_path, collapse="mean")
    lines = [f"depthbench report: {table_path}",
             f"tiles with data: "
             f"{len(sorted(set(table.tile.tolist())))}"]
    combos = sorted(set(zip(table.a, table.b, table.c)))
    for metric in table.metrics():
        lines.append(f"\n{metric}:")
        sub = table.subset(metric)
        for combo in combos:
            sel = (sub.a == combo[0]) & (sub.b == combo[1]) & (sub.c == combo[2])
            if not sel.any():
                continue
            vals = sub.value[sel] * 1000.0
            lines.append(f"  {'/'.join(combo)}: grand mean "
                         f"{vals.mean():+.2f} ± {vals.std(ddof=1):.2f} mm "
                         f"(n={sel.sum()} tiles)")
    text = "\n".join(lines) + "\n"
    (run_dir / "report.txt").write_text(text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="depthbench",
        description="Depth-camera point-cloud evaluation pipeline")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="render a synthetic scene")
    ps.add_argument("--config", required=True, help="scene JSON")
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--out", required=True, help="output directory")
    ps.set_defaults(func=cmd_simulate)

    pr = sub.add_parser("register", help="solve camera-to-world")
    pr.add_argument("--config", required=True, help="run JSON")
    pr.add_argument("--out", default=None)
    pr.set_defaults(func=cmd_register)

    pe = sub.add_parser("evaluate", help="error fields, metrics, tiles")
    pe.add_argument("--config", required=True, help="run JSON")
    pe.add_argument("--out", default=None)
    pe.add_argument("--no-viewfield-mask", action="store_true")
    pe.add_argument("--no-content-mask", action="store_true")
    pe.add_argument("--exact-face", action="store_true",
                    help="true point-to-triangle distances (cross-check)")
    pe.add_argument("--threads", type=int, default=1)
    pe.set_defaults(func=cmd_evaluate)

    pt = sub.add_parser("stats", help="ART ANOVA over the long table")
    pt.add_argument("--long-table", required=True)
    pt.add_argument("--metric", required=True,
                    choices=list(MetricFields.METRICS))
    pt.add_argument("--out", default=None)
    pt.set_defaults(func=cmd_stats)

    pp = sub.add_parser("report", help="per-condition grand means")
    pp.add_argument("--run-dir", required=True)
    pp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, FormatError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
