"""Synthetic-world generator: landmarks, trajectories, rendered frames.

Everything is deterministic from integer seeds via numpy's PCG64 generator,
so expected values frozen in tests are reproducible across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, SE3Pose, compose, se3_exp, se3_log
from .features import Keypoint

__all__ = [
    "SyntheticWorld",
    "TrajectorySpec",
    "DEFAULT_INTRINSICS",
    "gen_world",
    "gen_trajectory",
    "look_at",
    "render_frame",
    "perturb_odometry",
    "make_sidecar_frames",
]

DEFAULT_INTRINSICS = CameraIntrinsics(fx=300.0, fy=300.0, cx=160.0, cy=120.0,
                                      width=320, height=240)

_TEX_SIZE = 16


@dataclass(frozen=True)
class SyntheticWorld:
    seed: int
    landmarks: np.ndarray      # (N, 3) world positions
    textures: np.ndarray       # (N, 16, 16) float32 intensities
    descriptors: np.ndarray    # (N, D) unit-norm float32

    @property
    def n(self) -> int:
        return len(self.landmarks)


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str                  # circle | square-loop | straight | fast-rotation
    n_frames: int
    radius: float = 6.0
    deg_per_frame: float = 2.0
    speed: float = 0.05        # scene units per frame (straight)
    pixel_noise: float = 0.0
    drift_rate: float = 0.0

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")


def gen_world(seed: int, n_landmarks: int, bounds=((-2.5, -2.5, -2.5), (2.5, 2.5, 2.5)),
              descriptor_dim: int = 256) -> SyntheticWorld:
    """Uniform landmarks in an axis-aligned box, each with a smooth 16x16 texture."""
    if n_landmarks <= 0:
        raise ValueError("n_landmarks must be positive")
    rng = np.random.default_rng(seed)
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    pts = rng.uniform(lo, hi, size=(n_landmarks, 3))

    # low-frequency texture: 4x4 random grid upsampled bilinearly
    base = rng.uniform(90.0, 190.0, size=n_landmarks)
    coarse = rng.uniform(-60.0, 60.0, size=(n_landmarks, 4, 4))
    xs = np.linspace(0, 3, _TEX_SIZE)
    i0 = np.clip(xs.astype(int), 0, 2)
    f = (xs - i0)[None, :]
    tex = np.empty((n_landmarks, _TEX_SIZE, _TEX_SIZE), dtype=np.float32)
    rows = coarse[:, i0, :] * (1 - f.T)[None] + coarse[:, i0 + 1, :] * f.T[None]
    tex[:] = rows[:, :, i0] * (1 - f)[:, None] + rows[:, :, i0 + 1] * f[:, None]
    tex += base[:, None, None]
    tex = np.clip(tex, 0, 255).astype(np.float32)

    desc = rng.standard_normal((n_landmarks, descriptor_dim)).astype(np.float32)
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    return SyntheticWorld(seed, pts, tex, desc)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> SE3Pose:
    """World-to-camera pose for a camera at `eye` looking at `target` (z forward, y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, dtype=np.float64))
    rn = np.linalg.norm(r)
    if rn < 1e-9:  # looking along up: pick an arbitrary right vector
        r = np.cross(f, np.array([1.0, 0.0, 0.0]))
        rn = np.linalg.norm(r)
    r = r / rn
    d = np.cross(f, r)
    R_wc = np.stack([r, d, f], axis=1)
    return SE3Pose.from_rt(R_wc.T, -R_wc.T @ eye)


def _square_perimeter(t: float, radius: float) -> np.ndarray:
    """Point on the square with corners (+-r, +-r), parameterized t in [0, 1)."""
    t = t % 1.0
    s = t * 4.0
    r = radius
    if s < 1:
        return np.array([r, -r + 2 * r * s, 0.0])
    if s < 2:
        return np.array([r - 2 * r * (s - 1), r, 0.0])
    if s < 3:
        return np.array([-r, r - 2 * r * (s - 2), 0.0])
    return np.array([-r + 2 * r * (s - 3), -r, 0.0])


def gen_trajectory(spec: TrajectorySpec) -> list[SE3Pose]:
    """Ground-truth world-to-camera pose sequence for the requested motion."""
    n = spec.n_frames
    poses: list[SE3Pose] = []
    if spec.kind == "circle":
        for i in range(n):
            a = 2 * np.pi * i / n
            eye = np.array([spec.radius * np.cos(a), spec.radius * np.sin(a), 0.0])
            poses.append(look_at(eye, (0, 0, 0)))
    elif spec.kind == "square-loop":
        for i in range(n):
            t = i / (n - 1)  # first and last pose coincide
            poses.append(look_at(_square_perimeter(t, spec.radius), (0, 0, 0)))
    elif spec.kind == "straight":
        for i in range(n):
            eye = np.array([0.0, -spec.radius + spec.speed * i, 0.0])
            poses.append(look_at(eye, (0, 100.0, 0)))
    elif spec.kind == "fast-rotation":
        for i in range(n):
            a = np.radians(spec.deg_per_frame) * i
            eye = np.array([spec.radius * np.cos(a), spec.radius * np.sin(a), 0.0])
            poses.append(look_at(eye, (0, 0, 0)))
    else:
        raise ValueError(f"unknown trajectory kind {spec.kind!r}")
    return poses


MIN_SPLAT_SEPARATION = 12.0


def visible_landmarks(world: SyntheticWorld, pose: SE3Pose, K: CameraIntrinsics,
                      min_depth: float = 0.5, margin: float = 8.0,
                      min_sep: float = MIN_SPLAT_SEPARATION):
    """Unoccluded in-bounds landmarks for a view: (ids, exact pixels).

    A landmark is occluded when a nearer landmark projects within min_sep
    pixels of it (splats are treated as opaque sprites).
    """
    p_cam = pose.apply(world.landmarks)
    z = p_cam[:, 2]
    ids = []
    uvs = []
    for lid in np.argsort(z):  # near to far; nearer wins occlusion
        if z[lid] < min_depth:
            continue
        u = K.fx * p_cam[lid, 0] / z[lid] + K.cx
        v = K.fy * p_cam[lid, 1] / z[lid] + K.cy
        if not (margin <= u < K.width - margin and margin <= v < K.height - margin):
            continue
        occluded = any((u - q[0]) ** 2 + (v - q[1]) ** 2 < min_sep**2 for q in uvs)
        if occluded:
            continue
        ids.append(int(lid))
        uvs.append(np.array([u, v]))
    return ids, uvs


def render_frame(world: SyntheticWorld, pose: SE3Pose, K: CameraIntrinsics,
                 noise_sigma: float = 0.0, noise_seed: int = 0,
                 min_depth: float = 0.5):
    """Render landmark texture splats over a textured background.

    Returns (image float32 HxW, correspondences) where correspondences is a
    list of (landmark id, exact projected pixel) for unoccluded landmarks.
    Rendering is deterministic for a given (world, pose, noise_seed).
    """
    h, w = K.height, K.width
    bg_rng = np.random.default_rng(world.seed + 1)
    bg = bg_rng.uniform(-8.0, 8.0, size=(h // 8 + 2, w // 8 + 2))
    import cv2
    img = 128.0 + cv2.resize(bg, (w, h), interpolation=cv2.INTER_LINEAR)
    img = img.astype(np.float32)

    half = _TEX_SIZE // 2
    ids, uvs = visible_landmarks(world, pose, K, min_depth=min_depth, margin=half)
    corr = []
    for lid, (u, v) in zip(ids, uvs):
        x0, y0 = int(np.floor(u)) - half + 1, int(np.floor(v)) - half + 1
        # sample texture at subpixel offsets so intensity tracks the projection
        px = np.arange(x0, x0 + _TEX_SIZE - 1)
        py = np.arange(y0, y0 + _TEX_SIZE - 1)
        tx = px - (u - half)
        ty = py - (v - half)
        ix = np.minimum(np.floor(tx).astype(int), _TEX_SIZE - 2)
        iy = np.minimum(np.floor(ty).astype(int), _TEX_SIZE - 2)
        fx = tx - ix
        fy = ty - iy
        T = world.textures[lid]
        patch = (
            T[np.ix_(iy, ix)] * ((1 - fy)[:, None] * (1 - fx)[None, :])
            + T[np.ix_(iy, ix + 1)] * ((1 - fy)[:, None] * fx[None, :])
            + T[np.ix_(iy + 1, ix)] * (fy[:, None] * (1 - fx)[None, :])
            + T[np.ix_(iy + 1, ix + 1)] * (fy[:, None] * fx[None, :])
        )
        img[y0:y0 + _TEX_SIZE - 1, x0:x0 + _TEX_SIZE - 1] = patch
        corr.append((int(lid), np.array([u, v])))

    if noise_sigma > 0:
        nrng = np.random.default_rng(noise_seed)
        img = img + nrng.normal(0, noise_sigma, size=img.shape).astype(np.float32)
    return np.clip(img, 0, 255).astype(np.float32), corr


def perturb_odometry(gt_poses: list[SE3Pose], drift_rate: float,
                     seed: int = 0) -> list[SE3Pose]:
    """Compound per-frame multiplicative pose noise scaled by the true motion."""
    if drift_rate < 0:
        raise ValueError("drift rate must be >= 0")
    if drift_rate == 0:
        return list(gt_poses)
    rng = np.random.default_rng(seed)
    out = [gt_poses[0]]
    for i in range(1, len(gt_poses)):
        rel = compose(gt_poses[i], gt_poses[i - 1].inverse())
        tw = se3_log(rel)
        tmag = np.linalg.norm(tw[:3])
        rmag = np.linalg.norm(tw[3:])
        eps = np.concatenate([
            rng.normal(0, drift_rate * max(tmag, 1e-6), 3),
            rng.normal(0, drift_rate * max(rmag, 1e-6), 3),
        ])
        out.append(compose(compose(se3_exp(eps), rel), out[-1]))
    return out


def make_sidecar_frames(world: SyntheticWorld, poses: list[SE3Pose],
                        K: CameraIntrinsics, jitter_px: float = 0.0,
                        desc_noise: float = 0.0, seed: int = 0,
                        min_depth: float = 0.5, margin: float = 8.0):
    """Sidecar-style keypoints from exact projections of visible landmarks.

    Returns (frames, truth): frames maps frame id -> (keypoints, float
    descriptors); truth maps frame id -> landmark id per keypoint.
    """
    rng = np.random.default_rng(seed)
    frames = {}
    truth = {}
    for fid, pose in enumerate(poses):
        ids, uvs = visible_landmarks(world, pose, K, min_depth=min_depth,
                                     margin=margin)
        kps = []
        descs = np.empty((len(ids), world.descriptors.shape[1]), dtype=np.float32)
        for j, (lid, (x, y)) in enumerate(zip(ids, uvs)):
            if jitter_px > 0:
                x += rng.normal(0, jitter_px)
                y += rng.normal(0, jitter_px)
            kps.append(Keypoint(float(x), float(y), 0, 1.0))
            d = world.descriptors[lid].copy()
            if desc_noise > 0:
                d = d + rng.normal(0, desc_noise, d.shape).astype(np.float32)
                d /= np.linalg.norm(d)
            descs[j] = d
        frames[fid] = (kps, descs)
        truth[fid] = np.array(ids, dtype=int)
    return frames, truth
