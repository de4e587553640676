"""End-to-end sequence driver: features, tracking, mapping, loop closing."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .config import DEFAULTS
from .features import (
    ImagePyramid,
    Keypoint,
    binarize,
    build_pyramid,
    load_sidecar,
)
from .geometry import CameraIntrinsics, SE3Pose, compose
from .loops import (
    LoopCloser,
    LoopCorrectionError,
    brute_force_match,
    correct_loop,
    detect_loop,
    vocab_add,
)
from .mapping import (
    GlobalMap,
    SkippedBAError,
    create_map_points,
    cull_map_points,
    dump_map,
    insert_keyframe,
    local_bundle_adjust,
)
from .sim import DEFAULT_INTRINSICS, TrajectorySpec, gen_trajectory, gen_world, \
    make_sidecar_frames, render_frame
from .tracking import (
    Frame,
    TrackingConfig,
    TrackingState,
    need_keyframe,
    track_frame,
)

__all__ = [
    "PipelineError",
    "SequenceSource",
    "RunResult",
    "run_sequence",
    "write_run_outputs",
]


class PipelineError(RuntimeError):
    pass


@dataclass
class SequenceSource:
    """Uniform access to a frame sequence: optional images plus optional
    precomputed keypoints/descriptors (sidecar)."""

    K: CameraIntrinsics
    timestamps: list
    images: list | None = None          # per-frame float32 arrays, or None
    sidecar: dict | None = None         # frame id -> (keypoints, float descs)
    gt_poses: list | None = None        # synthetic ground truth, if known

    @property
    def n_frames(self) -> int:
        return len(self.timestamps)

    def frame_data(self, fid: int):
        image = self.images[fid] if self.images is not None else None
        kps = descs = None
        if self.sidecar is not None:
            if fid not in self.sidecar:
                raise PipelineError(f"sidecar has no entry for frame {fid}")
            kps, descs = self.sidecar[fid]
        return image, kps, descs

    @staticmethod
    def from_image_dir(path, K: CameraIntrinsics,
                       sidecar_path=None, fps: float = 10.0) -> "SequenceSource":
        import cv2
        names = sorted(
            n for n in os.listdir(path)
            if n.lower().endswith((".png", ".jpg", ".jpeg", ".pgm"))
        )
        if not names:
            raise PipelineError(f"no images found in {path}")
        images = []
        for n in names:
            img = cv2.imread(os.path.join(path, n), cv2.IMREAD_GRAYSCALE)
            if img is None:
                raise PipelineError(f"unreadable image {n}")
            images.append(img.astype(np.float32))
        sidecar = load_sidecar(sidecar_path) if sidecar_path else None
        ts = [i / fps for i in range(len(images))]
        return SequenceSource(K, ts, images, sidecar)

    @staticmethod
    def synthetic(spec: TrajectorySpec, seed: int = 0,
                  K: CameraIntrinsics = DEFAULT_INTRINSICS,
                  n_landmarks: int = 800, render: bool = True,
                  fps: float = 10.0) -> "SequenceSource":
        world = gen_world(seed, n_landmarks)
        gt = gen_trajectory(spec)
        frames, _ = make_sidecar_frames(
            world, gt, K, jitter_px=spec.pixel_noise, seed=seed)
        images = None
        if render:
            images = [render_frame(world, pose, K, noise_seed=seed + i)[0]
                      for i, pose in enumerate(gt)]
        ts = [i / fps for i in range(len(gt))]
        return SequenceSource(K, ts, images, frames, gt_poses=gt)


@dataclass
class RunResult:
    trajectory: list                    # (timestamp, SE3Pose) for tracked frames
    statuses: list                      # (frame id, timestamp, status) per frame
    map: GlobalMap
    closer: LoopCloser
    loops_corrected: list = field(default_factory=list)

    @property
    def n_lost(self) -> int:
        return sum(1 for _, _, s in self.statuses if s == "lost")


def _cfg(config: dict | None) -> dict:
    cfg = dict(DEFAULTS)
    if config:
        cfg.update(config)
    return cfg


def _make_frame(fid: int, ts: float, image, kps, fdesc, cfg) -> Frame:
    pyramid = None
    if image is not None:
        pyramid = build_pyramid(image, cfg["features.pyramid_levels"],
                                cfg["features.scale_factor"])
    if kps is None:
        if pyramid is None:
            raise PipelineError(
                f"frame {fid} has neither an image nor sidecar keypoints")
        from .features import detect_fallback
        kps, fdesc = detect_fallback(pyramid, cfg["features.total_keypoints"],
                                     cfg["features.descriptor_dim"])
    packed = binarize(np.asarray(fdesc, dtype=np.float32))
    return Frame(fid, ts, pyramid, list(kps), packed,
                 float_descriptors=np.asarray(fdesc, dtype=np.float32))


def _try_bootstrap(f0: Frame, fi: Frame, K: CameraIntrinsics, cfg):
    """Two-view initialization; returns (pose_i, matches, points) or None.

    The map scale is fixed so the median triangulated depth in the first
    camera equals one.
    """
    import cv2
    matches = brute_force_match(f0.descriptors, fi.descriptors,
                                cfg["tracking.hamming_max"])
    if len(matches) < cfg["run.min_bootstrap_matches"]:
        return None
    p0 = np.array([[f0.keypoints[a].x, f0.keypoints[a].y] for a, _ in matches])
    p1 = np.array([[fi.keypoints[b].x, fi.keypoints[b].y] for _, b in matches])
    disp = np.linalg.norm(p1 - p0, axis=1)
    if np.median(disp) < cfg["run.min_bootstrap_parallax_px"]:
        return None

    cv2.setRNGSeed(cfg["run.seed"])
    Km = K.matrix()
    E, mask = cv2.findEssentialMat(p0, p1, Km, method=cv2.RANSAC,
                                   prob=0.999, threshold=1.0)
    if E is None:
        return None
    n_pose, R, t, mask = cv2.recoverPose(E, p0, p1, Km, mask=mask)
    if n_pose < cfg["run.min_bootstrap_matches"] // 2:
        return None
    pose0 = SE3Pose.identity()
    pose_i = SE3Pose.from_rt(R, t.ravel())

    from .geometry import DegenerateBaselineError, triangulate
    pts, kept = [], []
    for j, (a, b) in enumerate(matches):
        if not mask[j]:
            continue
        try:
            X = triangulate(pose0, pose_i, K, p0[j], p1[j])
        except DegenerateBaselineError:
            continue
        if X[2] <= 0 or pose_i.apply(X)[2] <= 0:
            continue
        pts.append(X)
        kept.append((a, b))
    if len(pts) < cfg["run.min_bootstrap_matches"] // 2:
        return None
    pts = np.array(pts)
    s = 1.0 / np.median(pts[:, 2])
    pts *= s
    pose_i = SE3Pose(pose_i.quat, pose_i.t * s)
    return pose_i, kept, pts


def _process_keyframe(m: GlobalMap, closer: LoopCloser, frame: Frame,
                      K: CameraIntrinsics, cfg, loops_corrected: list):
    kf_id = insert_keyframe(m, frame)
    kf = m.keyframes[kf_id]
    create_map_points(m, kf_id, K)
    cull_map_points(m)
    try:
        local_bundle_adjust(m, kf_id, K,
                            max_iter=cfg["mapping.local_ba_iters"])
    except SkippedBAError:
        pass
    vocab_add(closer.vocab, kf)
    if cfg["loop.enabled"]:
        cand = detect_loop(closer, m, kf, K,
                           min_matches=cfg["loop.min_matches"])
        if cand is not None:
            try:
                correct_loop(m, cand, K,
                             global_ba_iters=cfg["loop.global_ba_iters"])
                loops_corrected.append((cand.kf_id, cand.candidate_id,
                                        cand.n_inliers))
            except LoopCorrectionError:
                pass  # map was rolled back; continue on odometry
    return kf


def run_sequence(source: SequenceSource, config: dict | None = None) -> RunResult:
    """Run the full engine over a sequence.

    Deterministic for a fixed source and configuration. Frames that cannot
    be tracked are flagged in the result rather than aborting the run.
    """
    cfg = _cfg(config)
    K = source.K
    use_coarse = cfg["tracking.use_coarse"] and source.images is not None
    tcfg = TrackingConfig(
        search_radius=cfg["tracking.search_radius"],
        hamming_max=cfg["tracking.hamming_max"],
        use_coarse=use_coarse,
        max_kf_interval=cfg["tracking.max_kf_interval"],
        kf_tracked_ratio=cfg["tracking.kf_tracked_ratio"],
        min_tracked=cfg["tracking.min_tracked"],
    )

    m = GlobalMap()
    closer = LoopCloser()
    loops_corrected: list = []
    trajectory: list = []
    statuses: list = []
    state: TrackingState | None = None
    first: Frame | None = None

    for fid in range(source.n_frames):
        ts = source.timestamps[fid]
        image, kps, fdesc = source.frame_data(fid)
        frame = _make_frame(fid, ts, image, kps, fdesc, cfg)

        if state is None:
            # still initializing: hold the first frame, attempt two-view
            # bootstrap against each newcomer
            if first is None:
                first = frame
                statuses.append((fid, ts, "initializing"))
                continue
            boot = _try_bootstrap(first, frame, K, cfg)
            if boot is None:
                statuses.append((fid, ts, "initializing"))
                continue
            pose_i, kept, pts = boot
            first.pose = SE3Pose.identity()
            frame.pose = pose_i
            for (a, b), X in zip(kept, pts):
                pid = m.add_point(X, descriptor=first.descriptors[a])
                first.map_point_links[a] = pid
                frame.map_point_links[b] = pid
            kf0 = _process_keyframe(m, closer, first, K, cfg, loops_corrected)
            kf1 = _process_keyframe(m, closer, frame, K, cfg, loops_corrected)
            rel = compose(kf1.pose, kf0.pose.inverse())
            state = TrackingState(last_frame=kf1, ref_keyframe=kf1,
                                  coarse_rel=rel, n_tracked=len(kept),
                                  status="ok", frames_since_kf=0)
            trajectory.append((source.timestamps[first.id], kf0.pose))
            trajectory.append((ts, kf1.pose))
            statuses.append((fid, ts, "ok"))
            continue

        state = track_frame(state, frame, m.point_positions(), K, tcfg)
        if state.status != "ok":
            statuses.append((fid, ts, "lost"))
            continue

        ref_count = sum(1 for p in state.ref_keyframe.map_point_links
                        if p is not None)
        if need_keyframe(state, frame, ref_count, tcfg):
            kf = _process_keyframe(m, closer, frame, K, cfg, loops_corrected)
            state = TrackingState(last_frame=kf, ref_keyframe=kf,
                                  coarse_rel=state.coarse_rel,
                                  n_tracked=state.n_tracked,
                                  status="ok", frames_since_kf=0)
            frame = kf
        trajectory.append((ts, frame.pose))
        statuses.append((fid, ts, "ok"))

    if state is None:
        raise PipelineError("sequence too short or featureless to initialize")
    return RunResult(trajectory, statuses, m, closer, loops_corrected)


def write_run_outputs(result: RunResult, out_dir) -> dict:
    """Write trajectory, per-frame status flags, map dump, and loop log."""
    from .evaluate import export_trajectory
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "trajectory": os.path.join(out_dir, "trajectory.txt"),
        "frames": os.path.join(out_dir, "frames.txt"),
        "map": os.path.join(out_dir, "map.txt"),
        "loop_log": os.path.join(out_dir, "loop_log.txt"),
    }
    export_trajectory(result.trajectory, paths["trajectory"], fmt="tum")
    with open(paths["frames"], "w") as f:
        f.write("# frame_id timestamp status\n")
        for fid, ts, status in result.statuses:
            f.write(f"{fid} {ts:.9f} {status}\n")
    with open(paths["map"], "w") as f:
        f.write(dump_map(result.map))
    with open(paths["loop_log"], "w") as f:
        f.write("# query_kf candidate_kf score n_matches n_inliers verdict\n")
        for row in result.closer.log:
            f.write(" ".join(str(x) for x in row) + "\n")
    return paths
