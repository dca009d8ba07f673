"""``atdn`` command line: one subcommand per pipeline stage.

Outputs go under ``--out`` with fixed names. Inputs default to the outputs
of earlier stages in the same directory; ``paths.*`` keys point elsewhere.
Exit codes: 0 ok, 2 configuration or missing input, 3 numeric fault,
4 unreadable or inconsistent data.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import mapping as mp
from . import odometry as od
from . import relocalization as rl
from ._accel import USE_NUMBA
from .config import ConfigError, dump, read_flat, validate_config
from .dataio import formats as fm
from .dataio.synthetic import SyntheticWorld, flow_oracle, render, world_trajectory
from .geometry import Trajectory
from .tensor.checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger("atdn")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DATA = 0, 2, 3, 4

# fixed output names under --out
SEQUENCE_DIR = "sequence"
POSE_FILE = "sequence/poses.txt"
WORLD_FILE = "world.cfg"
FLOW_DIR = "flow"
VO_CKPT, VO_ARCH, VO_LOG = "vo.ckpt", "vo.cfg", "vo_log.csv"
MAP_CKPT, MAP_ARCH, MAP_LOG = "map.ckpt", "map.cfg", "map_log.csv"
KEYFRAMES = "keyframes.txt"
MAP_FILE = "map.bin"
EST_POSES = "est_poses.txt"
RELOC_CSV = "reloc.csv"
PROFILE_CURVE, PROFILE_HIST = "profile_curve.csv", "profile_hist.csv"
METRICS = "metrics.txt"
AXES_CSV, TRAJ_SVG = "axes.csv", "trajectory.svg"
REPORT = "report.md"
TIMINGS = "timings.csv"

_DEFAULT_INPUTS = {
    "sequence_dir": SEQUENCE_DIR, "pose_file": POSE_FILE, "flow_dir": FLOW_DIR,
    "world_file": WORLD_FILE, "vo_checkpoint": VO_CKPT, "map_checkpoint": MAP_CKPT,
    "map_file": MAP_FILE, "est_pose_file": EST_POSES, "metrics_file": METRICS,
}
_WORLD_KEYS = ("n_frames", "trajectory", "depth", "focal", "height", "width", "radius",
               "speed", "texture_scale", "octaves")


class InputMissing(ConfigError):
    pass


class Run:
    def __init__(self, cfg, out):
        self.cfg = cfg
        self.out = Path(out)

    def input(self, name, required=True):
        """Configured path for ``paths.<name>``, else the default under --out."""
        configured = self.cfg.path(name)
        p = Path(configured) if configured else self.out / _DEFAULT_INPUTS[name]
        if not p.exists():
            if required:
                where = f"{configured!r} does not exist" if configured else f"not set and {p} does not exist"
                raise InputMissing([f"paths.{name}: {where}"])
            return None
        return p

    def output(self, name):
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def time(self, command, seconds, frames):
        p = self.output(TIMINGS)
        new = not p.exists()
        with open(p, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(["command", "seconds", "frames", "seconds_per_frame"])
            w.writerow([command, f"{seconds:.6f}", frames, f"{seconds / max(frames, 1):.6g}"])


# ----------------------------------------------------------------- helpers

def _frame_name(fid):
    return f"frame_{fid:06d}.img"


def _flow_name(fid):
    return f"flow_{fid:06d}.flo"


def _load_poses(path):
    with open(path, encoding="utf-8") as fh:
        return fm.parse_pose_file(fh)


def _load_frames(run, ids=None, with_poses=True):
    seq = run.input("sequence_dir")
    traj = _load_poses(run.input("pose_file")) if with_poses else None
    files = sorted(seq.glob("frame_*.img"))
    if not files:
        raise fm.FormatError(f"no frame_*.img files in {seq}")
    frames = []
    wanted = None if ids is None else set(int(i) for i in ids)
    for f in files:
        fid = int(f.stem.split("_")[1])
        if wanted is not None and fid not in wanted:
            continue
        pose = None
        if traj is not None:
            try:
                pose = traj.pose_of(fid)
            except KeyError:
                raise fm.FormatError(f"frame {fid} has no pose") from None
        frames.append(fm.Frame(fid, fm.read_frame(f, "raw", fid).image, pose))
    return frames, traj


def _load_world(run):
    raw = read_flat(run.input("world_file"))
    kw = {}
    for k in _WORLD_KEYS:
        if k not in raw:
            raise fm.FormatError(f"world file lacks {k}")
        v = raw[k]
        kw[k] = v if k == "trajectory" else (int(v) if k in ("n_frames", "height", "width", "octaves") else float(v))
    return SyntheticWorld(**kw)


def _write_sidecar(path, values):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump(values))


def _vo_arch(cfg):
    c = cfg.vo_config()
    return {"flow_height": c.flow_height, "flow_width": c.flow_width, "pool": c.pool,
            "channels": c.channels, "hidden": c.hidden}


def _load_vo(run):
    ckpt = run.input("vo_checkpoint")
    raw = read_flat(ckpt.with_suffix(".cfg"))
    c = od.VoConfig(int(raw["flow_height"]), int(raw["flow_width"]), int(raw["pool"]),
                    tuple(int(x) for x in raw["channels"].split(",")), int(raw["hidden"]))
    model = od.VoModel(c)
    model.load_state_dict(load_checkpoint(ckpt))
    return model


def _map_arch(cfg):
    c = cfg.map_config()
    return {"input_size": c.input_size, "channels": c.channels, "latent_dim": c.latent_dim,
            "variational": c.variational, "unet": c.unet, "skip_channels": c.skip_channels}


def _load_map_model(run):
    ckpt = run.input("map_checkpoint")
    raw = read_flat(ckpt.with_suffix(".cfg"))
    c = mp.MapConfig(int(raw["input_size"]), tuple(int(x) for x in raw["channels"].split(",")),
                     int(raw["latent_dim"]), raw["variational"] == "true", raw["unet"] == "true",
                     int(raw["skip_channels"]))
    model = mp.MapModel(c)
    model.load_state_dict(load_checkpoint(ckpt))
    model.variational = False  # map build and queries are deterministic
    return model


def _load_flows(run, ids):
    d = run.input("flow_dir")
    flows = []
    for fid in ids:
        p = d / _flow_name(fid)
        if not p.exists():
            raise fm.FormatError(f"missing flow {p}")
        flows.append(fm.read_flow(p))
    return flows


def _keyframe_ids(run, traj):
    p = run.out / KEYFRAMES
    if p.exists():
        return [int(x) for x in p.read_text().split()]
    return mp.select_keyframes(traj, run.cfg["keyframe.policy"])


# ------------------------------------------------------------- subcommands

def cmd_synth(run):
    world = run.cfg.world()
    traj = world_trajectory(world)
    seq = run.output(SEQUENCE_DIR)
    seq.mkdir(exist_ok=True)
    for i, fid in enumerate(traj.frame_ids):
        with open(seq / _frame_name(int(fid)), "wb") as fh:
            fm.write_raw_image(render(world, traj[i], run.cfg.seed), fh)
    with open(run.output(POSE_FILE), "w", encoding="utf-8") as fh:
        fm.write_pose_file(traj, fh)
    _write_sidecar(run.output(WORLD_FILE), {k: getattr(world, k) for k in _WORLD_KEYS})
    return len(traj)


def cmd_flow_precompute(run):
    world = _load_world(run)
    traj = _load_poses(run.input("pose_file"))
    d = run.output(FLOW_DIR)
    d.mkdir(exist_ok=True)
    for i in range(len(traj) - 1):
        with open(d / _flow_name(int(traj.frame_ids[i])), "wb") as fh:
            fm.write_flow(flow_oracle(world, traj[i], traj[i + 1]), fh)
    return len(traj) - 1


def cmd_train_vo(run):
    cfg = run.cfg
    traj = _load_poses(run.input("pose_file"))
    flows = _load_flows(run, traj.frame_ids[:-1])
    vc = cfg.vo_config()
    seq = od.make_sequence(flows, traj.relatives(), vc)
    model = od.VoModel(vc, seed=cfg.seed)
    model, history = od.train_vo(model, [seq], cfg.plan(), seed=cfg.seed + 1, options=cfg.vo_options())
    save_checkpoint(model.state_dict(), run.output(VO_CKPT))
    _write_sidecar(run.output(VO_ARCH), _vo_arch(cfg))
    with open(run.output(VO_LOG), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "epoch", "loss", "step_loss", "comp_loss", "lr", "faults"])
        for r in history:
            w.writerow([r.stage, r.epoch, repr(r.loss), repr(r.step_loss), repr(r.comp_loss), repr(r.lr), r.faults])
    return len(flows)


def cmd_infer_vo(run):
    model = _load_vo(run)
    pose_path = run.input("pose_file", required=False)
    flow_dir = run.input("flow_dir")
    if pose_path is not None:
        traj = _load_poses(pose_path)
        ids, start = traj.frame_ids, traj[0]
    else:
        ids = sorted(int(p.stem.split("_")[1]) for p in flow_dir.glob("flow_*.flo"))
        ids, start = np.array(ids + [ids[-1] + 1]), None
    flows = _load_flows(run, ids[:-1])
    t0 = time.perf_counter()
    deltas = od.predict_deltas(model, flows)
    est = od.integrate(deltas, start)
    per = time.perf_counter() - t0
    est = Trajectory(ids, est.rotations, est.translations)
    with open(run.output(EST_POSES), "w", encoding="utf-8") as fh:
        fm.write_pose_file(est, fh)
    return len(flows), per


def cmd_train_map(run):
    cfg = run.cfg
    traj = _load_poses(run.input("pose_file"))
    kf = mp.select_keyframes(traj, cfg["keyframe.policy"])
    frames, _ = _load_frames(run, kf)
    model = mp.MapModel(cfg.map_config(), seed=cfg.seed)
    images = np.stack([f.image for f in frames])
    positions = np.array([f.pose.translation for f in frames])
    model, history = mp.train_map(model, images, positions, cfg.map_train())
    save_checkpoint(model.state_dict(), run.output(MAP_CKPT))
    _write_sidecar(run.output(MAP_ARCH), _map_arch(cfg))
    run.output(KEYFRAMES).write_text("".join(f"{k}\n" for k in kf))
    with open(run.output(MAP_LOG), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "recon", "kl", "edl", "lr", "faults"])
        for r in history:
            w.writerow([r.epoch, repr(r.loss), repr(r.recon), repr(r.kl), repr(r.edl), repr(r.lr), r.faults])
    return len(kf)


def cmd_build_map(run):
    model = _load_map_model(run)
    traj = _load_poses(run.input("pose_file"))
    frames, _ = _load_frames(run, _keyframe_ids(run, traj))
    emap = rl.build_map(model, frames)
    rl.save_map(emap, run.output(MAP_FILE))
    return len(frames)


def cmd_relocalize(run):
    cfg = run.cfg
    model = _load_map_model(run)
    emap = rl.load_map(run.input("map_file"))
    frames, _ = _load_frames(run)
    keyset = set(int(i) for i in emap.frame_ids)
    queries = [f for f in frames if f.frame_id not in keyset]
    if not queries:
        raise fm.FormatError("no non-keyframe frames to query")
    vo_model, source = None, None
    if cfg["reloc.refine"] and run.input("vo_checkpoint", required=False):
        vo_model = _load_vo(run)
        if run.input("world_file", required=False):
            source = rl.OracleFlowSource(_load_world(run), emap)
        elif run.input("flow_dir", required=False):
            source = rl.DirectoryFlowSource(run.input("flow_dir"))
    policy = rl.parse_candidate_policy(cfg["reloc.candidates"])
    rows = []
    for k, q in enumerate(queries):
        res = rl.query(emap, model, q.image, policy, cfg["reloc.metric"])
        if k == 0:
            ev.emit_distance_profile(res, run.output(PROFILE_CURVE), run.output(PROFILE_HIST),
                                     cfg["eval.hist_bins"])
        p = res.profile
        row = [q.frame_id, res.best_id, repr(res.best_distance), len(res.candidates),
               int(bool(p.min() < p.mean() - p.std()))]
        refined = None
        if vo_model is not None and source is not None:
            try:
                refined = rl.match_search(emap, vo_model, source, res, q)
            except rl.FlowUnavailableError as exc:
                log.warning("frame %d not refined: %s", q.frame_id, exc)
        if refined is not None:
            row += [refined.best_id] + [repr(float(x)) for x in refined.refined.translation]
        else:
            row += ["", "", "", ""]
        rows.append(row)
    with open(run.output(RELOC_CSV), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        # best_id is the embedding argmin; refined_id is the match-search choice
        w.writerow(["query_id", "best_id", "best_distance", "n_candidates", "min_below_mean_minus_std",
                    "refined_id", "refined_x", "refined_y", "refined_z"])
        w.writerows(rows)
    return len(queries)


def _gt_est(run):
    gt = _load_poses(run.input("pose_file"))
    est = _load_poses(run.input("est_pose_file"))
    return gt, est


def cmd_eval(run):
    gt, est = _gt_est(run)
    result = ev.kitti_errors(gt, est, run.cfg["eval.lengths"])
    run.output(METRICS).write_text(result.to_text())
    ev.emit_axes_csv(gt, est, run.output(AXES_CSV))
    return len(gt)


def cmd_plot(run):
    gt, est = _gt_est(run)
    ev.emit_axes_csv(gt, est, run.output(AXES_CSV))
    ev.emit_xz_svg(gt, est, run.output(TRAJ_SVG), axes=run.cfg["eval.svg_axes"])
    return len(gt)


def _read_metrics(path):
    raw = read_flat(path)
    return float(raw["translation_error_percent"]), float(raw["rotation_error_deg_per_m"])


def _per_frame(run, command):
    p = run.out / TIMINGS
    if not p.exists():
        return None
    with open(p, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["command"] == command]
    return float(rows[-1]["seconds_per_frame"]) if rows else None


def cmd_report(run):
    t, r = _read_metrics(run.input("metrics_file"))
    env = f"{os.cpu_count()} CPU core(s), numba {'on' if USE_NUMBA else 'off'}"
    vo_rt = _per_frame(run, "infer-vo:predict")
    flow_rt = _per_frame(run, "flow-precompute")
    rows = [ev.ReportRow.measured("This build, synthetic (oracle flow)", t, r,
                                  None if vo_rt is None or flow_rt is None else vo_rt + flow_rt, env),
            ev.ReportRow.measured("This build, synthetic (w/o flow)", None, None, vo_rt, env)]
    ev.table1_report(rows, run.output(REPORT), run.cfg["eval.lengths"])
    return 1


COMMANDS = {
    "synth": cmd_synth,
    "flow-precompute": cmd_flow_precompute,
    "train-vo": cmd_train_vo,
    "infer-vo": cmd_infer_vo,
    "train-map": cmd_train_map,
    "build-map": cmd_build_map,
    "relocalize": cmd_relocalize,
    "eval": cmd_eval,
    "plot": cmd_plot,
    "report": cmd_report,
}


def build_parser():
    p = argparse.ArgumentParser(prog="atdn", description="Desk-scale learned vSLAM pipeline.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--seed", type=int, help="overrides the seed in the config")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("--quiet", action="store_true", help="only print the seed/hash line and errors")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        cfg = validate_config(args.config, seed=args.seed)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    for w in cfg.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"atdn {args.command}: seed={cfg.seed} config_hash={cfg.hash}")
    run = Run(cfg, args.out)
    try:
        run.out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        result = COMMANDS[args.command](run)
        elapsed = time.perf_counter() - t0
        frames, inner = result if isinstance(result, tuple) else (result, None)
        run.time(args.command, elapsed, frames)
        if inner is not None:
            run.time(f"{args.command}:predict", inner, frames)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (od.NumericFault, mp.MapTrainingFault) as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (fm.FormatError, ValueError, KeyError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
