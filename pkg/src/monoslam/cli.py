"""Command-line interface: run, eval, simulate, plots."""

from __future__ import annotations

import argparse
import os
import sys

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="monoslam",
                                description="monocular keyframe SLAM engine")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the engine over a sequence")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--images", help="directory of image files")
    src.add_argument("--synthetic",
                     help="trajectory spec, e.g. kind=circle,n_frames=30")
    run.add_argument("--sidecar", help="precomputed keypoint sidecar file")
    run.add_argument("--config", help="key=value configuration file")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                     help="configuration override (repeatable)")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", required=True, help="output directory")

    ev = sub.add_parser("eval", help="compare a trajectory against ground truth")
    ev.add_argument("--est", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--mode", choices=["ate", "rel"], default="ate")
    ev.add_argument("--scale", action="store_true",
                    help="absorb a global scale during alignment")
    ev.add_argument("--fmt", choices=["tum", "kitti"], default="tum")

    si = sub.add_parser("simulate", help="generate a synthetic sequence")
    si.add_argument("--spec", required=True,
                    help="trajectory spec, e.g. kind=square-loop,n_frames=60")
    si.add_argument("--seed", type=int, default=0)
    si.add_argument("--out", required=True, help="output directory")

    pl = sub.add_parser("plots", help="emit plot data for a finished run")
    pl.add_argument("--run-dir", required=True)
    pl.add_argument("--gt", help="optional ground-truth trajectory (TUM)")
    return p


def _parse_spec(text: str):
    from .sim import TrajectorySpec
    kwargs: dict = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ValueError(f"spec item {item!r} is not key=value")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key == "kind":
            kwargs[key] = raw.strip()
        elif key == "n_frames":
            kwargs[key] = int(raw)
        elif key in ("radius", "deg_per_frame", "speed", "pixel_noise",
                     "drift_rate"):
            kwargs[key] = float(raw)
        else:
            raise ValueError(f"unknown spec key {key!r}")
    return TrajectorySpec(**kwargs)


def _cmd_run(args) -> int:
    from .config import load_config
    from .pipeline import SequenceSource, run_sequence, write_run_outputs
    from .sim import DEFAULT_INTRINSICS

    cfg = load_config(args.config, args.set)
    cfg["run.seed"] = args.seed
    if args.synthetic:
        spec = _parse_spec(args.synthetic)
        source = SequenceSource.synthetic(spec, seed=args.seed)
        if args.sidecar:
            from .features import load_sidecar
            source.sidecar = load_sidecar(args.sidecar)
    else:
        source = SequenceSource.from_image_dir(args.images, DEFAULT_INTRINSICS,
                                               sidecar_path=args.sidecar)
    result = run_sequence(source, cfg)
    paths = write_run_outputs(result, args.out)
    if source.gt_poses is not None:
        from .evaluate import export_trajectory
        gt = list(zip(source.timestamps, source.gt_poses))
        gt_path = os.path.join(args.out, "groundtruth.txt")
        export_trajectory(gt, gt_path, fmt="tum")
        paths["groundtruth"] = gt_path
    n_ok = sum(1 for _, _, s in result.statuses if s == "ok")
    print(f"frames={len(result.statuses)} tracked={n_ok} "
          f"lost={result.n_lost} keyframes={len(result.map.keyframes)} "
          f"points={len(result.map.points)} "
          f"loops_corrected={len(result.loops_corrected)}")
    print(f"trajectory={paths['trajectory']}")
    return 0


def _cmd_eval(args) -> int:
    from .evaluate import eval_ate, eval_rel, load_trajectory
    est = load_trajectory(args.est, fmt=args.fmt)
    gt = load_trajectory(args.gt, fmt=args.fmt)
    if args.mode == "ate":
        r = eval_ate(est, gt, monocular_scale=args.scale)
        print(f"ate_rmse={r.ate_rmse:.9g}")
    else:
        r = eval_rel(est, gt, scale_correct=args.scale)
        print(f"t_rel={r.t_rel:.9g} r_rel={r.r_rel:.9g}")
    return 0


def _cmd_simulate(args) -> int:
    import numpy as np

    from .evaluate import export_trajectory
    from .features import save_sidecar
    from .sim import (DEFAULT_INTRINSICS, gen_trajectory, gen_world,
                      make_sidecar_frames)

    spec = _parse_spec(args.spec)
    world = gen_world(args.seed, 800)
    poses = gen_trajectory(spec)
    frames, _ = make_sidecar_frames(world, poses, DEFAULT_INTRINSICS,
                                    jitter_px=spec.pixel_noise, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    sidecar_path = os.path.join(args.out, "keypoints.bin")
    save_sidecar(sidecar_path, frames,
                 descriptor_dim=world.descriptors.shape[1])
    gt_path = os.path.join(args.out, "groundtruth.txt")
    export_trajectory([(i / 10.0, p) for i, p in enumerate(poses)],
                      gt_path, fmt="tum")
    n_kp = int(np.mean([len(kps) for kps, _ in frames.values()]))
    print(f"frames={len(poses)} mean_keypoints={n_kp}")
    print(f"sidecar={sidecar_path}")
    print(f"groundtruth={gt_path}")
    return 0


def _cmd_plots(args) -> int:
    from .evaluate import emit_plots, load_trajectory

    traj_path = os.path.join(args.run_dir, "trajectory.txt")
    est = load_trajectory(traj_path, fmt="tum")
    gt = None
    gt_path = args.gt or os.path.join(args.run_dir, "groundtruth.txt")
    if os.path.exists(gt_path):
        gt = load_trajectory(gt_path, fmt="tum")
    pr_rows = None
    log_path = os.path.join(args.run_dir, "loop_log.txt")
    if os.path.exists(log_path):
        from .loops import pr_sweep
        scores, labels = [], []
        with open(log_path) as f:
            for line in f:
                if line.startswith("#") or not line.strip():
                    continue
                parts = line.split()
                scores.append(float(parts[2]))
                labels.append(parts[5] == "accepted")
        if scores and any(labels):
            pr_rows = pr_sweep(scores, labels)
    written = emit_plots(args.run_dir, est=est, gt=gt, pr_rows=pr_rows)
    for path in written:
        print(path)
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "eval": _cmd_eval,
    "simulate": _cmd_simulate,
    "plots": _cmd_plots,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:
        name = type(exc).__name__
        msg = str(exc).replace("\n", " ")
        print(f"error {name}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
