"""Trajectory metrics (ATE, KITTI-style relative errors) and trajectory I/O.

Trajectories are lists of (timestamp, SE3Pose) with world-to-camera poses;
files store the camera-in-world convention (TUM / KITTI formats).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import SE3Pose, Sim3Transform, compose, umeyama_align

__all__ = [
    "EvalResult",
    "TooShortError",
    "AssociationError",
    "associate",
    "eval_ate",
    "eval_rel",
    "export_trajectory",
    "load_trajectory",
    "emit_plots",
]

ASSOC_TOL_S = 0.02
KITTI_SUBLENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)
SYNTH_SUBLENGTHS = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0)


class TooShortError(ValueError):
    pass


class AssociationError(ValueError):
    pass


@dataclass
class EvalResult:
    ate_rmse: float | None = None
    t_rel: float | None = None        # translational RMSE, percent
    r_rel: float | None = None        # rotational error, deg per 100 length units
    alignment: Sim3Transform | None = None


def associate(traj_a, traj_b, tol: float = ASSOC_TOL_S):
    """Nearest-timestamp association within tol; returns paired pose lists."""
    out_a, out_b = [], []
    tb = np.array([t for t, _ in traj_b])
    used = set()
    for t, pa in traj_a:
        if len(tb) == 0:
            break
        j = int(np.argmin(np.abs(tb - t)))
        if abs(tb[j] - t) <= tol and j not in used:
            used.add(j)
            out_a.append(pa)
            out_b.append(traj_b[j][1])
    return out_a, out_b


def _positions(poses) -> np.ndarray:
    return np.array([p.inverse().t for p in poses])


def eval_ate(traj, gt, monocular_scale: bool = False, tol: float = ASSOC_TOL_S) -> EvalResult:
    """Umeyama-aligned absolute trajectory RMSE (scale absorbed iff flag set)."""
    est_p, gt_p = associate(traj, gt, tol)
    if len(est_p) < 3:
        raise AssociationError(f"only {len(est_p)} associated pairs")
    P_est = _positions(est_p)
    P_gt = _positions(gt_p)
    S = umeyama_align(P_est, P_gt, with_scale=monocular_scale)
    res = S.apply(P_est) - P_gt
    return EvalResult(ate_rmse=float(np.sqrt((res**2).sum(axis=1).mean())),
                      alignment=S)


def eval_rel(traj, gt, sub_lengths=KITTI_SUBLENGTHS, tol: float = ASSOC_TOL_S,
             scale_correct: bool = True) -> EvalResult:
    """KITTI odometry protocol: average endpoint errors over fixed sub-lengths.

    For every start frame and sub-length L the relative-pose discrepancy over
    the gt segment of length L yields a translational error (% of L) and a
    rotational error (deg per 100 length units). Errors are averaged over all
    segments. With scale_correct (monocular), the estimate is pre-scaled by
    the Umeyama scale against gt.
    """
    est_p, gt_p = associate(traj, gt, tol)
    if len(est_p) < 3:
        raise AssociationError(f"only {len(est_p)} associated pairs")
    P_gt = _positions(gt_p)
    dists = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(P_gt, axis=0), axis=1))])
    if dists[-1] < min(sub_lengths):
        raise TooShortError(
            f"trajectory spans {dists[-1]:.3g}, below the shortest sub-length")

    scale = 1.0
    if scale_correct:
        S = umeyama_align(_positions(est_p), P_gt, with_scale=True)
        scale = S.scale

    # camera-to-world matrices
    T_est = [p.inverse() for p in est_p]
    T_gt = [p.inverse() for p in gt_p]

    t_errs, r_errs = [], []
    for i in range(len(T_gt)):
        for L in sub_lengths:
            target = dists[i] + L
            j = int(np.searchsorted(dists, target))
            if j >= len(T_gt):
                continue
            gt_rel = compose(T_gt[i].inverse(), T_gt[j])
            est_rel = compose(T_est[i].inverse(), T_est[j])
            est_rel = SE3Pose(est_rel.quat, est_rel.t * scale)
            err = compose(gt_rel.inverse(), est_rel)
            t_errs.append(np.linalg.norm(err.t) / L * 100.0)
            ang = np.linalg.norm(Rotation.from_quat(err.quat).as_rotvec())
            r_errs.append(np.degrees(ang) / L * 100.0)
    if not t_errs:
        raise TooShortError("no complete sub-length segments")
    return EvalResult(t_rel=float(np.mean(t_errs)), r_rel=float(np.mean(r_errs)))


def _fmt(x: float) -> str:
    return f"{x + 0.0:.9g}"  # +0.0 canonicalizes negative zero


def export_trajectory(traj, path, fmt: str = "tum") -> None:
    """Write per-frame camera-in-world poses: TUM lines or KITTI 3x4 rows."""
    if fmt not in ("tum", "kitti"):
        raise ValueError(f"unknown trajectory format {fmt!r}")
    lines = []
    for ts, pose in traj:
        inv = pose.inverse()
        if fmt == "tum":
            tx, ty, tz = inv.t
            qx, qy, qz, qw = inv.quat
            lines.append(" ".join([f"{ts:.9f}"] + [_fmt(v) for v in
                                                   (tx, ty, tz, qx, qy, qz, qw)]))
        elif fmt == "kitti":
            T = inv.matrix()[:3].reshape(-1)
            lines.append(" ".join(_fmt(v) for v in T))
        else:
            raise ValueError(f"unknown trajectory format {fmt!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines))
        if lines:
            f.write("\n")


def load_trajectory(path, fmt: str = "tum"):
    """Inverse of export_trajectory; returns [(timestamp, world-to-camera pose)]."""
    if fmt not in ("tum", "kitti"):
        raise ValueError(f"unknown trajectory format {fmt!r}")
    traj = []
    with open(path) as f:
        for i, line in enumerate(f):
            parts = line.split()
            if not parts:
                continue
            if fmt == "tum":
                ts = float(parts[0])
                tx, ty, tz, qx, qy, qz, qw = map(float, parts[1:8])
                inv = SE3Pose([qx, qy, qz, qw], [tx, ty, tz])
            elif fmt == "kitti":
                vals = np.array(list(map(float, parts))).reshape(3, 4)
                T = np.eye(4)
                T[:3] = vals
                inv = SE3Pose.from_matrix(T)
                ts = float(i)
            else:
                raise ValueError(f"unknown trajectory format {fmt!r}")
            traj.append((ts, inv.inverse()))
    return traj


def emit_plots(out_dir, est=None, gt=None, pr_rows=None, aligned: bool = True) -> list:
    """Write plot-ready CSV series: xy trajectory overlay and PR sweep."""
    import os
    written = []
    if est is not None and gt is not None:
        est_p, gt_p = associate(est, gt)
        P_est = _positions(est_p)
        P_gt = _positions(gt_p)
        if aligned and len(est_p) >= 3:
            S = umeyama_align(P_est, P_gt, with_scale=True)
            P_est = S.apply(P_est)
        path = os.path.join(out_dir, "trajectory_xy.csv")
        with open(path, "w") as f:
            f.write("est_x,est_y,gt_x,gt_y\n")
            for pe, pg in zip(P_est, P_gt):
                f.write(f"{pe[0]:.9g},{pe[1]:.9g},{pg[0]:.9g},{pg[1]:.9g}\n")
        written.append(path)
    if pr_rows is not None:
        path = os.path.join(out_dir, "pr_curve.txt")
        with open(path, "w") as f:
            f.write("threshold precision recall\n")
            for thr, p, r in sorted(pr_rows):
                f.write(f"{thr:.9g} {p:.9g} {r:.9g}\n")
        written.append(path)
    return written
