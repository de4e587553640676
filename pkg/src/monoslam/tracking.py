"""Two-stage coarse-to-fine frame tracking.

Stage one estimates the relative pose between adjacent frames by minimizing
patch photometric residuals of projected map points over the image pyramid
(top level first). Stage two composes the initial pose, matches keypoints by
projection radius + Hamming distance, and refines the pose over reprojection
residuals with outlier reclassification.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .features import ImagePyramid, Keypoint, hamming_matrix
from .geometry import CameraIntrinsics, SE3Pose, compose
from .optim import Parameter, ParameterStore, ResidualBlock, SolveOptions, solve

__all__ = [
    "Frame",
    "TrackingState",
    "TrackingConfig",
    "CoarseAlignmentError",
    "TrackingLostError",
    "bilinear_sample",
    "sample_patch",
    "coarse_align",
    "predict_initial_pose",
    "match_by_projection",
    "refine_pose",
    "track_frame",
    "need_keyframe",
]

PATCH_SIDE = 4
PHOTO_HUBER = 20.0
REPROJ_HUBER = 2.45
CHI2_2DOF = 5.99
MIN_TRACKED = 10
HAMMING_MATCH_MAX = 64


class CoarseAlignmentError(RuntimeError):
    """Too few photometric residuals survive to align the frame pair."""


class TrackingLostError(RuntimeError):
    """Pose refinement has fewer matches/inliers than the survival minimum."""


@dataclass
class Frame:
    id: int
    timestamp: float
    pyramid: ImagePyramid | None
    keypoints: list[Keypoint]
    descriptors: np.ndarray                 # packed binary (N, D/8)
    float_descriptors: np.ndarray | None = None
    pose: SE3Pose | None = None             # world -> camera
    map_point_links: list = field(default_factory=list)

    def __post_init__(self):
        if not self.map_point_links:
            self.map_point_links = [None] * len(self.keypoints)
        if len(self.map_point_links) != len(self.keypoints):
            raise ValueError("map_point_links length mismatch")


@dataclass
class TrackingConfig:
    search_radius: float = 7.0
    hamming_max: int = HAMMING_MATCH_MAX
    patch_side: int = PATCH_SIDE
    use_coarse: bool = True        # False = constant-velocity baseline (ablation)
    max_kf_interval: int = 20
    kf_tracked_ratio: float = 0.9
    min_tracked: int = MIN_TRACKED


@dataclass
class TrackingState:
    last_frame: Frame | None = None
    ref_keyframe: Frame | None = None
    coarse_rel: SE3Pose = field(default_factory=SE3Pose.identity)
    n_tracked: int = 0
    status: str = "initializing"   # initializing | ok | lost
    frames_since_kf: int = 0


def bilinear_sample(img: np.ndarray, x, y):
    """Bilinear interpolation; x/y may be arrays. Caller guarantees bounds."""
    x = np.asarray(x)
    y = np.asarray(y)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx = x - x0
    fy = y - y0
    return (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x0 + 1] * fx * (1 - fy)
        + img[y0 + 1, x0] * (1 - fx) * fy
        + img[y0 + 1, x0 + 1] * fx * fy
    )


def _patch_offsets(side: int) -> tuple[np.ndarray, np.ndarray]:
    o = np.arange(side) - (side - 1) / 2.0
    ox, oy = np.meshgrid(o, o)
    return ox.ravel(), oy.ravel()


def sample_patch(img: np.ndarray, cx: float, cy: float, side: int = PATCH_SIDE):
    """side x side bilinear patch centered at (cx, cy); None if it clips the border."""
    ox, oy = _patch_offsets(side)
    xs = cx + ox
    ys = cy + oy
    h, w = img.shape
    if xs.min() < 0 or ys.min() < 0 or xs.max() >= w - 1 or ys.max() >= h - 1:
        return None
    return bilinear_sample(img, xs, ys)


def _proj_jacobian(K: CameraIntrinsics, p_cam: np.ndarray) -> np.ndarray:
    x, y, z = p_cam
    return np.array([
        [K.fx / z, 0.0, -K.fx * x / z**2],
        [0.0, K.fy / z, -K.fy * y / z**2],
    ])


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0, -v[2], v[1]],
        [v[2], 0, -v[0]],
        [-v[1], v[0], 0],
    ])


def coarse_align(last: Frame, current: Frame, init: SE3Pose,
                 points: Mapping[int, np.ndarray], K: CameraIntrinsics,
                 patch_side: int = PATCH_SIDE, min_points: int = MIN_TRACKED) -> SE3Pose:
    """Photometric relative pose last->current, solved coarse-to-fine.

    `points` maps map-point ids to world positions; only last-frame keypoints
    linked to a map point contribute. Raises CoarseAlignmentError when fewer
    than min_points patches survive on the finest level.
    """
    if last.pose is None:
        raise ValueError("last frame has no pose")
    entries = []
    for idx, pid in enumerate(last.map_point_links):
        if pid is None or pid not in points:
            continue
        p_l = last.pose.apply(points[pid])
        if p_l[2] <= 0:
            continue
        entries.append((idx, p_l))
    if len(entries) < min_points:
        raise CoarseAlignmentError(f"only {len(entries)} map-point links")

    ox, oy = _patch_offsets(patch_side)
    store = ParameterStore()
    store.add("xi", init)

    xi = init
    n_levels = last.pyramid.n_levels
    survivors = 0
    for level in range(n_levels - 1, -1, -1):
        img_l = last.pyramid.levels[level]
        img_c = current.pyramid.levels[level]
        s = last.pyramid.scale(level)
        # gradient images for the analytic Jacobian
        gy, gx = np.gradient(img_c)
        h, w = img_c.shape

        blocks = []
        for _, p_l in entries:
            u_l = (K.fx * p_l[0] / p_l[2] + K.cx) / s
            v_l = (K.fy * p_l[1] / p_l[2] + K.cy) / s
            ref = sample_patch(img_l, u_l, v_l, patch_side)
            if ref is None:
                continue

            def residual(pose, p_l=p_l, ref=ref):
                p_c = pose.apply(p_l)
                if p_c[2] <= 1e-6:
                    return np.zeros(patch_side * patch_side)
                u = (K.fx * p_c[0] / p_c[2] + K.cx) / s
                v = (K.fy * p_c[1] / p_c[2] + K.cy) / s
                cur = sample_patch(img_c, u, v, patch_side)
                if cur is None:
                    return np.zeros(patch_side * patch_side)
                return cur - ref

            def jac(pose, p_l=p_l):
                p_c = pose.apply(p_l)
                if p_c[2] <= 1e-6:
                    return [np.zeros((patch_side * patch_side, 6))]
                u = (K.fx * p_c[0] / p_c[2] + K.cx) / s
                v = (K.fy * p_c[1] / p_c[2] + K.cy) / s
                xs = u + ox
                ys = v + oy
                if xs.min() < 1 or ys.min() < 1 or xs.max() >= w - 2 or ys.max() >= h - 2:
                    return [np.zeros((patch_side * patch_side, 6))]
                gI = np.stack([bilinear_sample(gx, xs, ys),
                               bilinear_sample(gy, xs, ys)], axis=1)  # (P, 2)
                Jproj = _proj_jacobian(K, p_c) / s                     # (2, 3)
                Jpose = np.hstack([np.eye(3), -_skew(p_c)])            # (3, 6)
                return [gI @ (Jproj @ Jpose)]

            blocks.append(ResidualBlock(residual, ("xi",), jac=jac,
                                        huber_delta=PHOTO_HUBER))
        survivors = len(blocks)
        if survivors < min_points:
            continue
        store["xi"] = Parameter(xi, "se3")
        solve(blocks, store, SolveOptions(max_iter=10))
        xi = store.value("xi")

    if survivors < min_points:
        raise CoarseAlignmentError(
            f"only {survivors} surviving patches on the finest level")
    return xi


def predict_initial_pose(coarse: SE3Pose, last_pose: SE3Pose) -> SE3Pose:
    """Initial current-frame pose: relative coarse pose left-composed onto the last pose."""
    return compose(coarse, last_pose)


def match_by_projection(last: Frame, current: Frame, pose_init: SE3Pose,
                        points: Mapping[int, np.ndarray], K: CameraIntrinsics,
                        radius: float = 7.0,
                        hamming_max: int = HAMMING_MATCH_MAX) -> list[tuple[int, int]]:
    """Match last-frame map points to current keypoints by projection radius.

    Returns (map point id, current keypoint index) pairs, one-to-one in both;
    conflicts keep the lower Hamming distance.
    """
    if not current.keypoints:
        return []
    cur_xy = np.array([[kp.x, kp.y] for kp in current.keypoints])
    cur_oct = np.array([kp.octave for kp in current.keypoints])

    claims: dict[int, tuple[int, int]] = {}  # cur idx -> (dist, pid)
    for idx, pid in enumerate(last.map_point_links):
        if pid is None or pid not in points:
            continue
        p_c = pose_init.apply(points[pid])
        if p_c[2] <= 0:
            continue
        u = K.fx * p_c[0] / p_c[2] + K.cx
        v = K.fy * p_c[1] / p_c[2] + K.cy
        d2 = (cur_xy[:, 0] - u) ** 2 + (cur_xy[:, 1] - v) ** 2
        near = np.where((d2 <= radius * radius)
                        & (np.abs(cur_oct - last.keypoints[idx].octave) <= 1))[0]
        if near.size == 0:
            continue
        dists = hamming_matrix(last.descriptors[idx], current.descriptors[near])[0]
        best = int(np.argmin(dists))
        dist = int(dists[best])
        if dist > hamming_max:
            continue
        j = int(near[best])
        if j not in claims or dist < claims[j][0]:
            claims[j] = (dist, pid)

    seen_pids = {}
    for j, (dist, pid) in claims.items():
        if pid not in seen_pids or dist < seen_pids[pid][0]:
            seen_pids[pid] = (dist, j)
    return [(pid, j) for pid, (_, j) in sorted(seen_pids.items())]


def _reproj_blocks(current: Frame, matches, points, K, inlier_mask):
    blocks = []
    for m, (pid, kidx) in enumerate(matches):
        if not inlier_mask[m]:
            continue
        X = np.asarray(points[pid], dtype=np.float64)
        obs = np.array([current.keypoints[kidx].x, current.keypoints[kidx].y])

        def residual(pose, X=X, obs=obs):
            p_c = pose.apply(X)
            if p_c[2] <= 1e-9:
                return np.array([1e3, 1e3])
            u = K.fx * p_c[0] / p_c[2] + K.cx
            v = K.fy * p_c[1] / p_c[2] + K.cy
            return obs - np.array([u, v])

        def jac(pose, X=X):
            p_c = pose.apply(X)
            if p_c[2] <= 1e-9:
                return [np.zeros((2, 6))]
            return [-_proj_jacobian(K, p_c) @ np.hstack([np.eye(3), -_skew(p_c)])]

        blocks.append(ResidualBlock(residual, ("xi",), jac=jac,
                                    huber_delta=REPROJ_HUBER))
    return blocks


def refine_pose(current: Frame, matches: list[tuple[int, int]], pose_init: SE3Pose,
                points: Mapping[int, np.ndarray], K: CameraIntrinsics,
                min_inliers: int = MIN_TRACKED,
                rounds: int = 4) -> tuple[SE3Pose, int, np.ndarray]:
    """Pose-only reprojection refinement with outlier reclassification.

    Four optimize-then-reclassify rounds; residual chi2 above 5.99 marks a
    match outlier for the next round (it may re-enter later). Returns
    (pose, inlier count, inlier mask). Raises TrackingLostError below the
    inlier minimum.
    """
    if len(matches) < min_inliers:
        raise TrackingLostError(f"only {len(matches)} matches")
    pose = pose_init
    inlier = np.ones(len(matches), dtype=bool)
    pts = {pid: np.asarray(points[pid], dtype=np.float64) for pid, _ in matches}
    for _ in range(rounds):
        blocks = _reproj_blocks(current, matches, pts, K, inlier)
        if len(blocks) < min_inliers:
            raise TrackingLostError("too few inliers during refinement")
        store = ParameterStore()
        store.add("xi", pose)
        solve(blocks, store, SolveOptions(max_iter=20))
        pose = store.value("xi")
        # reclassify everything against the new pose
        for m, (pid, kidx) in enumerate(matches):
            p_c = pose.apply(pts[pid])
            if p_c[2] <= 1e-9:
                inlier[m] = False
                continue
            u = K.fx * p_c[0] / p_c[2] + K.cx
            v = K.fy * p_c[1] / p_c[2] + K.cy
            e2 = (current.keypoints[kidx].x - u) ** 2 + (current.keypoints[kidx].y - v) ** 2
            inlier[m] = e2 <= CHI2_2DOF
    n = int(inlier.sum())
    if n < min_inliers:
        raise TrackingLostError(f"{n} inliers after refinement")
    return pose, n, inlier


def track_frame(state: TrackingState, current: Frame,
                points: Mapping[int, np.ndarray], K: CameraIntrinsics,
                cfg: TrackingConfig | None = None) -> TrackingState:
    """Run the two-stage tracker on one frame and return the updated state.

    On coarse-alignment failure the matcher retries against the reference
    keyframe with doubled radius. Updates current.pose and map_point_links.
    """
    cfg = cfg or TrackingConfig()
    if state.last_frame is None:
        raise ValueError("tracking state not initialized")
    last = state.last_frame

    coarse = None
    if cfg.use_coarse and current.pyramid is not None and last.pyramid is not None:
        try:
            coarse = coarse_align(last, current, state.coarse_rel, points, K,
                                  patch_side=cfg.patch_side,
                                  min_points=cfg.min_tracked)
        except CoarseAlignmentError:
            coarse = None

    try:
        if coarse is not None:
            pose_init = predict_initial_pose(coarse, last.pose)
            matches = match_by_projection(last, current, pose_init, points, K,
                                          radius=cfg.search_radius,
                                          hamming_max=cfg.hamming_max)
        else:
            # constant-velocity fallback, reference keyframe, doubled radius
            pose_init = predict_initial_pose(state.coarse_rel, last.pose)
            ref = state.ref_keyframe or last
            matches = match_by_projection(ref, current, pose_init, points, K,
                                          radius=2 * cfg.search_radius,
                                          hamming_max=cfg.hamming_max)
        pose, n_inliers, inlier = refine_pose(
            current, matches, pose_init, points, K, min_inliers=cfg.min_tracked)
    except TrackingLostError:
        return replace(state, status="lost", n_tracked=0,
                       frames_since_kf=state.frames_since_kf + 1)

    current.pose = pose
    current.map_point_links = [None] * len(current.keypoints)
    for m, (pid, kidx) in enumerate(matches):
        if inlier[m]:
            current.map_point_links[kidx] = pid
    rel = compose(pose, last.pose.inverse())
    return TrackingState(
        last_frame=current,
        ref_keyframe=state.ref_keyframe,
        coarse_rel=rel,
        n_tracked=n_inliers,
        status="ok",
        frames_since_kf=state.frames_since_kf + 1,
    )


def need_keyframe(state: TrackingState, current: Frame,
                  ref_point_count: int | None = None,
                  cfg: TrackingConfig | None = None) -> bool:
    """Interval rule OR tracked-fraction rule against the reference keyframe."""
    cfg = cfg or TrackingConfig()
    if state.status != "ok":
        return False
    if state.frames_since_kf >= cfg.max_kf_interval:
        return True
    if ref_point_count is None:
        ref = state.ref_keyframe
        ref_point_count = (sum(1 for p in ref.map_point_links if p is not None)
                           if ref is not None else 0)
    return state.n_tracked < cfg.kf_tracked_ratio * ref_point_count
