"""Rigid/similarity transforms, pinhole projection, triangulation, alignment.

Conventions:
  - Quaternions are stored [x, y, z, w] (scalar last), unit norm.
  - A camera pose T_cw maps world coordinates into camera coordinates:
    p_cam = R p_world + t.  Composition compose(a, b) applies b first.
  - se3 twists are 6-vectors [rho, phi]: translation part first, rotation
    (axis-angle) part last.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

__all__ = [
    "SE3Pose",
    "Sim3Transform",
    "CameraIntrinsics",
    "GeometryError",
    "BehindCameraError",
    "DegenerateBaselineError",
    "DegenerateAlignmentError",
    "NonUniqueLogarithmError",
    "compose",
    "se3_exp",
    "se3_log",
    "project",
    "unproject",
    "triangulate",
    "umeyama_align",
]


class GeometryError(ValueError):
    """Base class for geometric failure conditions."""


class BehindCameraError(GeometryError):
    """Point has non-positive depth in the camera frame."""


class DegenerateBaselineError(GeometryError):
    """Two-view geometry is too weak to triangulate (no baseline / parallax)."""


class DegenerateAlignmentError(GeometryError):
    """Point sets are too few or collinear for alignment."""


class NonUniqueLogarithmError(GeometryError):
    """Rotation angle at pi: the logarithm is not unique."""


def _as_unit_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise GeometryError("zero-norm quaternion")
    q = q / n
    if q[3] < 0:  # canonical hemisphere
        q = -q
    q.setflags(write=False)
    return q


def _as_vec3(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(3).copy()
    t.setflags(write=False)
    return t


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform: p_out = R p_in + t, rotation stored as a unit quaternion."""

    quat: np.ndarray = field(default_factory=lambda: _as_unit_quat([0, 0, 0, 1]))
    t: np.ndarray = field(default_factory=lambda: _as_vec3([0, 0, 0]))

    def __post_init__(self):
        object.__setattr__(self, "quat", _as_unit_quat(self.quat))
        object.__setattr__(self, "t", _as_vec3(self.t))

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose()

    @staticmethod
    def from_rt(R: np.ndarray, t) -> "SE3Pose":
        return SE3Pose(Rotation.from_matrix(R).as_quat(), t)

    @staticmethod
    def from_matrix(T: np.ndarray) -> "SE3Pose":
        T = np.asarray(T, dtype=np.float64)
        return SE3Pose.from_rt(T[:3, :3], T[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.quat).as_matrix()

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack (N, 3)."""
        p = np.asarray(p, dtype=np.float64)
        return p @ self.R.T + self.t

    def inverse(self) -> "SE3Pose":
        Rinv = Rotation.from_quat(self.quat).inv()
        return SE3Pose(Rinv.as_quat(), -Rinv.apply(self.t))

    def __mul__(self, other: "SE3Pose") -> "SE3Pose":
        return compose(self, other)


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """Transform applying b first, then a."""
    ra = Rotation.from_quat(a.quat)
    rb = Rotation.from_quat(b.quat)
    return SE3Pose((ra * rb).as_quat(), ra.apply(b.t) + a.t)


def _so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    W = np.array([
        [0, -phi[2], phi[1]],
        [phi[2], 0, -phi[0]],
        [-phi[1], phi[0], 0],
    ])
    if theta < 1e-8:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * W
        + (theta - np.sin(theta)) / theta**3 * (W @ W)
    )


def se3_exp(twist) -> SE3Pose:
    """Exponential map: twist [rho, phi] -> SE3Pose."""
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    rho, phi = twist[:3], twist[3:]
    rot = Rotation.from_rotvec(phi)
    V = _so3_left_jacobian(phi)
    return SE3Pose(rot.as_quat(), V @ rho)


def se3_log(p: SE3Pose) -> np.ndarray:
    """Logarithm map; rotation angle must be < pi for uniqueness."""
    rot = Rotation.from_quat(p.quat)
    phi = rot.as_rotvec()
    theta = np.linalg.norm(phi)
    if theta > np.pi - 1e-9:
        raise NonUniqueLogarithmError(f"rotation angle {theta} at/above pi")
    V = _so3_left_jacobian(phi)
    rho = np.linalg.solve(V, p.t)
    return np.concatenate([rho, phi])


@dataclass(frozen=True)
class Sim3Transform:
    """Similarity transform: p_out = s R p_in + t."""

    scale: float = 1.0
    quat: np.ndarray = field(default_factory=lambda: _as_unit_quat([0, 0, 0, 1]))
    t: np.ndarray = field(default_factory=lambda: _as_vec3([0, 0, 0]))

    def __post_init__(self):
        if not (self.scale > 0):
            raise GeometryError(f"non-positive Sim3 scale {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "quat", _as_unit_quat(self.quat))
        object.__setattr__(self, "t", _as_vec3(self.t))

    @staticmethod
    def identity() -> "Sim3Transform":
        return Sim3Transform()

    @staticmethod
    def from_se3(p: SE3Pose, scale: float = 1.0) -> "Sim3Transform":
        return Sim3Transform(scale, p.quat, p.t)

    @property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.quat).as_matrix()

    def se3(self) -> SE3Pose:
        """The rigid part (scale dropped)."""
        return SE3Pose(self.quat, self.t)

    def apply(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return self.scale * (p @ self.R.T) + self.t

    def inverse(self) -> "Sim3Transform":
        Rinv = Rotation.from_quat(self.quat).inv()
        return Sim3Transform(
            1.0 / self.scale, Rinv.as_quat(), -Rinv.apply(self.t) / self.scale
        )

    def __mul__(self, other: "Sim3Transform") -> "Sim3Transform":
        ra = Rotation.from_quat(self.quat)
        rb = Rotation.from_quat(other.quat)
        return Sim3Transform(
            self.scale * other.scale,
            (ra * rb).as_quat(),
            self.scale * ra.apply(other.t) + self.t,
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside image")

    def matrix(self) -> np.ndarray:
        return np.array([
            [self.fx, 0, self.cx],
            [0, self.fy, self.cy],
            [0, 0, 1.0],
        ])

    def contains(self, uv: np.ndarray, margin: float = 0.0) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        u, v = uv[..., 0], uv[..., 1]
        return (
            (u >= margin)
            & (u <= self.width - 1 - margin)
            & (v >= margin)
            & (v <= self.height - 1 - margin)
        )


def project(K: CameraIntrinsics, p_cam) -> np.ndarray:
    """Pinhole projection of camera-frame points; depth must be positive."""
    p = np.asarray(p_cam, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("non-positive depth")
    u = K.fx * p[..., 0] / z + K.cx
    v = K.fy * p[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


def unproject(K: CameraIntrinsics, uv, depth) -> np.ndarray:
    """Inverse of project at the given depth."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (uv[..., 0] - K.cx) / K.fx * depth
    y = (uv[..., 1] - K.cy) / K.fy * depth
    return np.stack([x, y, depth], axis=-1)


MIN_PARALLAX_DEG = 0.5


def triangulate(
    pose_a: SE3Pose,
    pose_b: SE3Pose,
    K: CameraIntrinsics,
    uv_a,
    uv_b,
    min_parallax_deg: float = MIN_PARALLAX_DEG,
) -> np.ndarray:
    """DLT triangulation of one correspondence; returns the world point.

    Poses are world-to-camera. Raises DegenerateBaselineError when the rays
    are closer to parallel than min_parallax_deg or the baseline vanishes.
    """
    uv_a = np.asarray(uv_a, dtype=np.float64)
    uv_b = np.asarray(uv_b, dtype=np.float64)
    Km = K.matrix()
    Pa = Km @ pose_a.matrix()[:3]
    Pb = Km @ pose_b.matrix()[:3]

    ca = pose_a.inverse().t
    cb = pose_b.inverse().t
    if np.linalg.norm(ca - cb) < 1e-9:
        raise DegenerateBaselineError("identical camera centers")

    A = np.stack([
        uv_a[0] * Pa[2] - Pa[0],
        uv_a[1] * Pa[2] - Pa[1],
        uv_b[0] * Pb[2] - Pb[0],
        uv_b[1] * Pb[2] - Pb[1],
    ])
    _, _, vt = np.linalg.svd(A)
    Xh = vt[-1]
    if abs(Xh[3]) < 1e-12:
        raise DegenerateBaselineError("point at infinity")
    X = Xh[:3] / Xh[3]

    ra = X - ca
    rb = X - cb
    denom = np.linalg.norm(ra) * np.linalg.norm(rb)
    if denom < 1e-12:
        raise DegenerateBaselineError("point at a camera center")
    cosang = np.clip(ra @ rb / denom, -1.0, 1.0)
    if np.degrees(np.arccos(cosang)) < min_parallax_deg:
        raise DegenerateBaselineError("insufficient parallax")
    return X


def umeyama_align(est: np.ndarray, gt: np.ndarray, with_scale: bool = True) -> Sim3Transform:
    """Least-squares similarity transform S with gt ~ S(est).

    Closed-form Umeyama solution; with_scale=False fixes scale to 1.
    """
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise DegenerateAlignmentError("point sets must both be (N, 3)")
    n = est.shape[0]
    if n < 3:
        raise DegenerateAlignmentError("need at least 3 point pairs")

    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    de = est - mu_e
    dg = gt - mu_g

    cov = dg.T @ de / n
    U, d, Vt = np.linalg.svd(cov)
    if d[1] < 1e-12 * max(d[0], 1e-300):
        raise DegenerateAlignmentError("collinear or coincident points")

    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt

    if with_scale:
        var_e = (de**2).sum() / n
        s = float(np.trace(np.diag(d) @ S) / var_e)
        if s <= 0:
            raise DegenerateAlignmentError("non-positive recovered scale")
    else:
        s = 1.0
    t = mu_g - s * R @ mu_e
    return Sim3Transform(s, Rotation.from_matrix(R).as_quat(), t)
