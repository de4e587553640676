"""Keyframe map: insertion, point creation/culling, covisibility, local BA."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import hamming, hamming_matrix
from .geometry import (CameraIntrinsics, DegenerateBaselineError, SE3Pose,
                       compose, se3_exp, triangulate)
from .optim import ParameterStore, ResidualBlock, SolveOptions, SolveReport, solve
from .tracking import Frame, _proj_jacobian, _skew

__all__ = [
    "MapPoint",
    "KeyFrame",
    "GlobalMap",
    "SkippedBAError",
    "insert_keyframe",
    "create_map_points",
    "cull_map_points",
    "local_bundle_adjust",
    "global_bundle_adjust",
    "check_integrity",
    "dump_map",
]

COVIS_MIN_SHARED = 15
EPIPOLAR_MAX_PX = 3.84
CHI2_2DOF = 5.99
CREATION_HAMMING_MAX = 64
CULL_FOUND_RATIO = 0.25
CULL_GRACE_KEYFRAMES = 3
REPROJ_HUBER = 2.45


class SkippedBAError(RuntimeError):
    """Local BA had no fixed anchors / not enough structure to be well-posed."""


@dataclass
class MapPoint:
    id: int
    position: np.ndarray                      # world frame
    observations: dict = field(default_factory=dict)  # kf id -> keypoint index
    descriptor: np.ndarray | None = None      # representative packed binary
    found: int = 0
    visible: int = 0
    created_at: int = 0                       # keyframe id at creation


class KeyFrame(Frame):
    def __init__(self, frame: Frame, kf_id: int):
        self.__dict__.update(frame.__dict__)
        self.kf_id = kf_id
        self.frame_id = frame.id
        self.covisibility: dict[int, int] = {}
        self.bow: dict[int, float] | None = None
        self.parent: int | None = None


@dataclass
class GlobalMap:
    keyframes: dict = field(default_factory=dict)   # kf id -> KeyFrame
    points: dict = field(default_factory=dict)      # point id -> MapPoint
    next_kf_id: int = 0
    next_point_id: int = 0

    def point_positions(self) -> dict:
        return {pid: mp.position for pid, mp in self.points.items()}

    def add_point(self, position, descriptor=None, created_at: int = 0) -> int:
        pid = self.next_point_id
        self.next_point_id += 1
        self.points[pid] = MapPoint(pid, np.asarray(position, dtype=np.float64),
                                    descriptor=descriptor, created_at=created_at)
        return pid


def _recompute_descriptor(m: GlobalMap, mp: MapPoint) -> None:
    """Representative = the observation descriptor with minimal median Hamming."""
    descs = []
    for kf_id, idx in mp.observations.items():
        kf = m.keyframes.get(kf_id)
        if kf is not None and idx < len(kf.descriptors):
            descs.append(kf.descriptors[idx])
    if not descs:
        return
    if len(descs) == 1:
        mp.descriptor = descs[0]
        return
    D = np.stack(descs)
    dm = hamming_matrix(D, D).astype(float)
    medians = np.median(dm, axis=1)
    mp.descriptor = descs[int(np.argmin(medians))]


def insert_keyframe(m: GlobalMap, frame: Frame) -> int:
    """Store a tracked frame as a keyframe; register observations, covisibility."""
    if frame.pose is None:
        raise ValueError("keyframe must have a valid pose")
    kf_id = m.next_kf_id
    m.next_kf_id += 1
    kf = KeyFrame(frame, kf_id)
    m.keyframes[kf_id] = kf

    shared: dict[int, int] = {}
    for idx, pid in enumerate(kf.map_point_links):
        if pid is None or pid not in m.points:
            continue
        mp = m.points[pid]
        mp.observations[kf_id] = idx
        mp.found += 1
        mp.visible += 1
        _recompute_descriptor(m, mp)
        for other in mp.observations:
            if other != kf_id:
                shared[other] = shared.get(other, 0) + 1

    best_parent, best_w = None, 0
    for other, w in shared.items():
        if w > best_w:
            best_parent, best_w = other, w
        if w >= COVIS_MIN_SHARED:
            kf.covisibility[other] = w
            m.keyframes[other].covisibility[kf_id] = w
    kf.parent = best_parent
    return kf_id


def _fundamental(K: CameraIntrinsics, pose_a: SE3Pose, pose_b: SE3Pose) -> np.ndarray:
    """F such that x_b^T F x_a = 0 for pixel correspondences (x in homogeneous px)."""
    rel = compose(pose_b, pose_a.inverse())  # a-cam -> b-cam
    E = _skew(rel.t) @ rel.R
    Kinv = np.linalg.inv(K.matrix())
    return Kinv.T @ E @ Kinv


def create_map_points(m: GlobalMap, kf_id: int, K: CameraIntrinsics) -> int:
    """Triangulate new points from kf's unmatched keypoints vs covisible neighbors."""
    kf = m.keyframes[kf_id]
    created = 0
    for other_id in sorted(kf.covisibility, key=kf.covisibility.get, reverse=True):
        other = m.keyframes[other_id]
        free_a = [i for i, p in enumerate(kf.map_point_links) if p is None]
        free_b = [i for i, p in enumerate(other.map_point_links) if p is None]
        if not free_a or not free_b:
            continue
        da = kf.descriptors[free_a]
        db = other.descriptors[free_b]
        dm = hamming_matrix(da, db)
        F = _fundamental(K, kf.pose, other.pose)
        best_b = np.argmin(dm, axis=1)
        best_a = np.argmin(dm, axis=0)
        for ai, bi in enumerate(best_b):
            if best_a[bi] != ai:  # mutual nearest only
                continue
            if dm[ai, bi] > CREATION_HAMMING_MAX:
                continue
            ia, ib = free_a[ai], free_b[bi]
            if kf.map_point_links[ia] is not None or other.map_point_links[ib] is not None:
                continue
            kpa, kpb = kf.keypoints[ia], other.keypoints[ib]
            xa = np.array([kpa.x, kpa.y, 1.0])
            xb = np.array([kpb.x, kpb.y, 1.0])
            line = F @ xa
            norm = np.hypot(line[0], line[1])
            if norm < 1e-12:  # degenerate epipolar geometry (zero baseline)
                continue
            if abs(xb @ line) / norm > EPIPOLAR_MAX_PX:
                continue
            try:
                X = triangulate(kf.pose, other.pose, K, (kpa.x, kpa.y), (kpb.x, kpb.y))
            except DegenerateBaselineError:
                continue
            ok = True
            for pose, kp in ((kf.pose, kpa), (other.pose, kpb)):
                pc = pose.apply(X)
                if pc[2] <= 0:
                    ok = False
                    break
                u = K.fx * pc[0] / pc[2] + K.cx
                v = K.fy * pc[1] / pc[2] + K.cy
                if (kp.x - u) ** 2 + (kp.y - v) ** 2 > CHI2_2DOF:
                    ok = False
                    break
            if not ok:
                continue
            pid = m.add_point(X, created_at=kf_id)
            mp = m.points[pid]
            mp.observations[kf_id] = ia
            mp.observations[other_id] = ib
            mp.found = mp.visible = 2
            kf.map_point_links[ia] = pid
            other.map_point_links[ib] = pid
            _recompute_descriptor(m, mp)
            w = kf.covisibility.get(other_id, 0) + 1
            kf.covisibility[other_id] = w
            other.covisibility[kf_id] = w
            created += 1
    return created


def remove_point(m: GlobalMap, pid: int) -> None:
    mp = m.points.pop(pid, None)
    if mp is None:
        return
    for kf_id, idx in mp.observations.items():
        kf = m.keyframes.get(kf_id)
        if kf is not None and kf.map_point_links[idx] == pid:
            kf.map_point_links[idx] = None
    # covisibility recount for affected pairs
    kfs = [k for k in mp.observations if k in m.keyframes]
    for i, a in enumerate(kfs):
        for b in kfs[i + 1:]:
            w = _shared_count(m, a, b)
            ka, kb = m.keyframes[a], m.keyframes[b]
            if w >= COVIS_MIN_SHARED or (a in kb.covisibility):
                if w > 0:
                    ka.covisibility[b] = w
                    kb.covisibility[a] = w
                else:
                    ka.covisibility.pop(b, None)
                    kb.covisibility.pop(a, None)


def _shared_count(m: GlobalMap, a: int, b: int) -> int:
    ka = m.keyframes[a]
    pts_a = {p for p in ka.map_point_links if p is not None}
    return sum(1 for p in m.keyframes[b].map_point_links if p in pts_a)


def cull_map_points(m: GlobalMap) -> int:
    """Drop weak points after a grace period; restores referential integrity."""
    latest = m.next_kf_id - 1
    doomed = []
    for pid, mp in m.points.items():
        if latest - mp.created_at < CULL_GRACE_KEYFRAMES:
            continue
        ratio = mp.found / mp.visible if mp.visible else 0.0
        if ratio < CULL_FOUND_RATIO or len(mp.observations) < 2:
            doomed.append(pid)
    for pid in doomed:
        remove_point(m, pid)
    return len(doomed)


def _reproj_block(kf_key, pt_key, obs, K, pose_fixed=None):
    obs = np.asarray(obs, dtype=np.float64)

    if pose_fixed is None:
        def residual(pose, X):
            pc = pose.apply(X)
            if pc[2] <= 1e-9:
                return np.array([1e3, 1e3])
            return obs - np.array([K.fx * pc[0] / pc[2] + K.cx,
                                   K.fy * pc[1] / pc[2] + K.cy])

        def jac(pose, X):
            pc = pose.apply(X)
            if pc[2] <= 1e-9:
                return [np.zeros((2, 6)), np.zeros((2, 3))]
            Jp = -_proj_jacobian(K, pc)
            return [Jp @ np.hstack([np.eye(3), -_skew(pc)]), Jp @ pose.R]

        return ResidualBlock(residual, (kf_key, pt_key), jac=jac,
                             huber_delta=REPROJ_HUBER)

    def residual_pt(X):
        pc = pose_fixed.apply(X)
        if pc[2] <= 1e-9:
            return np.array([1e3, 1e3])
        return obs - np.array([K.fx * pc[0] / pc[2] + K.cx,
                               K.fy * pc[1] / pc[2] + K.cy])

    def jac_pt(X):
        pc = pose_fixed.apply(X)
        if pc[2] <= 1e-9:
            return [np.zeros((2, 3))]
        return [-_proj_jacobian(K, pc) @ pose_fixed.R]

    return ResidualBlock(residual_pt, (pt_key,), jac=jac_pt,
                         huber_delta=REPROJ_HUBER)


def local_bundle_adjust(m: GlobalMap, center: int, K: CameraIntrinsics,
                        max_iter: int = 10) -> SolveReport:
    """Jointly refine the center keyframe, its covisible neighbors, and their points.

    Keyframes outside the neighborhood observing those points act as fixed
    anchors. With no anchors, the two oldest neighborhood keyframes are fixed
    as gauge; a lone keyframe raises SkippedBAError.
    """
    ckf = m.keyframes[center]
    local_ids = {center} | set(ckf.covisibility)
    point_ids = set()
    for kid in local_ids:
        for pid in m.keyframes[kid].map_point_links:
            if pid is not None and pid in m.points:
                point_ids.add(pid)
    anchor_ids = set()
    for pid in point_ids:
        for kid in m.points[pid].observations:
            if kid not in local_ids and kid in m.keyframes:
                anchor_ids.add(kid)

    if not anchor_ids:
        if len(local_ids) < 2:
            raise SkippedBAError("single keyframe with no anchors")
        fixed_gauge = set(sorted(local_ids)[:2])
    else:
        fixed_gauge = set()

    store = ParameterStore()
    for kid in local_ids:
        store.add(("kf", kid), m.keyframes[kid].pose)
        store[("kf", kid)].fixed = kid in fixed_gauge
    for kid in anchor_ids:
        store.add(("kf", kid), m.keyframes[kid].pose)
        store[("kf", kid)].fixed = True
    for pid in point_ids:
        store.add(("pt", pid), m.points[pid].position.copy())

    blocks = []
    for pid in point_ids:
        mp = m.points[pid]
        for kid, idx in mp.observations.items():
            if kid not in local_ids and kid not in anchor_ids:
                continue
            kf = m.keyframes[kid]
            kp = kf.keypoints[idx]
            blocks.append(_reproj_block(("kf", kid), ("pt", pid), (kp.x, kp.y), K))

    report = solve(blocks, store, SolveOptions(max_iter=max_iter))
    for kid in local_ids - fixed_gauge:
        m.keyframes[kid].pose = store.value(("kf", kid))
    for pid in point_ids:
        m.points[pid].position = store.value(("pt", pid))
    return report


def _ba_residuals(K, Rs, ts, P, pose_of_obs, pt_of_obs, uv):
    """Vectorized reprojection residuals for all observations."""
    pc = np.einsum("nij,nj->ni", Rs[pose_of_obs], P[pt_of_obs]) + ts[pose_of_obs]
    valid = pc[:, 2] > 1e-9
    z = np.where(valid, pc[:, 2], 1.0)
    proj = np.stack([K.fx * pc[:, 0] / z + K.cx,
                     K.fy * pc[:, 1] / z + K.cy], axis=1)
    r = uv - proj
    r[~valid] = 1e3
    return r, pc, valid


def _ba_cost(r: np.ndarray, delta: float) -> float:
    rn = np.linalg.norm(r, axis=1)
    out = rn > delta
    c = 0.5 * rn**2
    c[out] = delta * rn[out] - 0.5 * delta**2
    return float(c.sum())


def global_bundle_adjust(m: GlobalMap, K: CameraIntrinsics,
                         max_iter: int = 10,
                         fixed: set[int] | None = None) -> SolveReport:
    """Levenberg-Marquardt over every keyframe pose and map point.

    Exploits the sparsity of the reprojection problem: the point-point
    Hessian is block diagonal, so each step solves only the pose system
    after eliminating points (Schur complement). Keyframes in `fixed`
    (default: the oldest) keep their poses and serve as gauge.
    """
    if fixed is None:
        fixed = {min(m.keyframes)} if m.keyframes else set()
    kf_ids = sorted(m.keyframes)
    pt_ids = sorted(m.points)
    if not kf_ids or not pt_ids:
        raise SkippedBAError("empty map")
    free_kf = [k for k in kf_ids if k not in fixed]
    kf_index = {k: i for i, k in enumerate(free_kf)}  # -1 below means fixed
    pt_index = {p: i for i, p in enumerate(pt_ids)}

    pose_all = {k: m.keyframes[k].pose for k in kf_ids}
    obs_kf, obs_pt, obs_uv = [], [], []
    for pid in pt_ids:
        for kid, idx in m.points[pid].observations.items():
            kp = m.keyframes[kid].keypoints[idx]
            obs_kf.append(kid)
            obs_pt.append(pt_index[pid])
            obs_uv.append((kp.x, kp.y))
    if not obs_kf:
        raise SkippedBAError("no observations")
    pose_of_obs = np.array([kf_index.get(k, -1) for k in obs_kf])
    # index into the dense pose arrays (fixed poses appended after free ones)
    all_index = dict(kf_index)
    for i, k in enumerate(f for f in kf_ids if f in fixed):
        all_index[k] = len(free_kf) + i
    arr_of_obs = np.array([all_index[k] for k in obs_kf])
    pt_of_obs = np.array(obs_pt)
    uv = np.asarray(obs_uv, dtype=np.float64)
    n_free = len(free_kf)
    n_pts = len(pt_ids)
    delta = REPROJ_HUBER

    def pose_arrays(poses):
        ordered = [poses[k] for k in free_kf] + [poses[k] for k in kf_ids
                                                 if k in fixed]
        Rs = np.stack([p.R for p in ordered])
        ts = np.stack([p.t for p in ordered])
        return Rs, ts

    P = np.stack([m.points[p].position for p in pt_ids]).astype(np.float64)
    Rs, ts = pose_arrays(pose_all)
    r, pc, valid = _ba_residuals(K, Rs, ts, P, arr_of_obs, pt_of_obs, uv)
    cost = _ba_cost(r, delta)
    initial_cost = cost

    # observations grouped by point, for the Schur off-diagonal fill
    order = np.argsort(pt_of_obs, kind="stable")
    bounds = np.searchsorted(pt_of_obs[order], np.arange(n_pts + 1))

    lam = 1e-4
    iterations = 0
    termination = "max-iter"
    for _ in range(max_iter):
        # robust (IRLS) weights and Jacobians at the current estimate
        rn = np.linalg.norm(r, axis=1)
        w = np.ones_like(rn)
        out = rn > delta
        w[out] = delta / rn[out]
        z = np.where(valid, pc[:, 2], 1.0)
        inv_z = 1.0 / z
        # d(proj)/d(pc)
        Jproj = np.zeros((len(uv), 2, 3))
        Jproj[:, 0, 0] = K.fx * inv_z
        Jproj[:, 0, 2] = -K.fx * pc[:, 0] * inv_z**2
        Jproj[:, 1, 1] = K.fy * inv_z
        Jproj[:, 1, 2] = -K.fy * pc[:, 1] * inv_z**2
        Jproj[~valid] = 0.0
        # residual = uv - proj: J = -Jproj @ d(pc)/d(param)
        Jl = -np.einsum("nij,njk->nik", Jproj, Rs[arr_of_obs])
        sk = np.zeros((len(uv), 3, 3))
        sk[:, 0, 1], sk[:, 0, 2] = -pc[:, 2], pc[:, 1]
        sk[:, 1, 0], sk[:, 1, 2] = pc[:, 2], -pc[:, 0]
        sk[:, 2, 0], sk[:, 2, 1] = -pc[:, 1], pc[:, 0]
        Jp = np.zeros((len(uv), 2, 6))
        Jp[:, :, :3] = -Jproj
        Jp[:, :, 3:] = np.einsum("nij,njk->nik", Jproj, sk)
        Jp[pose_of_obs < 0] = 0.0
        sw = np.sqrt(w)[:, None, None]
        Jp *= sw
        Jl *= sw
        rw = r * np.sqrt(w)[:, None]

        gp = np.zeros((n_free, 6))
        Hpp = np.zeros((n_free, 6, 6))
        free_obs = pose_of_obs >= 0
        np.add.at(gp, pose_of_obs[free_obs],
                  -np.einsum("nij,ni->nj", Jp[free_obs], rw[free_obs]))
        np.add.at(Hpp, pose_of_obs[free_obs],
                  np.einsum("nij,nik->njk", Jp[free_obs], Jp[free_obs]))
        gl = np.zeros((n_pts, 3))
        Hll = np.zeros((n_pts, 3, 3))
        np.add.at(gl, pt_of_obs, -np.einsum("nij,ni->nj", Jl, rw))
        np.add.at(Hll, pt_of_obs, np.einsum("nij,nik->njk", Jl, Jl))
        W_obs = np.einsum("nij,nik->njk", Jp, Jl)  # (n,6,3)

        Hll_d = Hll + lam * np.eye(3)
        Hll_inv = np.linalg.inv(Hll_d)
        Y = np.einsum("njk,nkl->njl", W_obs, Hll_inv[pt_of_obs])

        S = np.zeros((n_free * 6, n_free * 6))
        for i in range(n_free):
            S[6 * i:6 * i + 6, 6 * i:6 * i + 6] = Hpp[i] + lam * np.eye(6)
        bp = gp.copy()
        np.add.at(bp, pose_of_obs[free_obs],
                  -np.einsum("njl,nl->nj", Y[free_obs], gl[pt_of_obs[free_obs]]))
        for j in range(n_pts):
            seg = order[bounds[j]:bounds[j + 1]]
            seg = seg[pose_of_obs[seg] >= 0]
            if len(seg) < 1:
                continue
            rows = pose_of_obs[seg]
            YW = np.einsum("ajk,blk->abjl", Y[seg], W_obs[seg])
            for a in range(len(seg)):
                for b in range(len(seg)):
                    ia, ib = rows[a], rows[b]
                    S[6 * ia:6 * ia + 6, 6 * ib:6 * ib + 6] -= YW[a, b]
        try:
            dp = np.linalg.solve(S, bp.reshape(-1)).reshape(n_free, 6)
        except np.linalg.LinAlgError:
            lam = min(lam * 10.0, 1e12)
            continue
        # back-substitute the point update
        rhs = gl.copy()
        np.add.at(rhs, pt_of_obs[free_obs],
                  -np.einsum("nkj,nk->nj", W_obs[free_obs], dp[pose_of_obs[free_obs]]))
        dl = np.einsum("njk,nk->nj", Hll_inv, rhs)

        trial_poses = dict(pose_all)
        for k, i in kf_index.items():
            trial_poses[k] = compose(se3_exp(dp[i]), pose_all[k])
        P_trial = P + dl
        Rs_t, ts_t = pose_arrays(trial_poses)
        r_t, pc_t, valid_t = _ba_residuals(K, Rs_t, ts_t, P_trial,
                                           arr_of_obs, pt_of_obs, uv)
        cost_t = _ba_cost(r_t, delta)
        if cost_t < cost:
            step = max(np.abs(dp).max() if n_free else 0.0, np.abs(dl).max())
            rel = (cost - cost_t) / max(cost, 1e-300)
            pose_all, P = trial_poses, P_trial
            Rs, ts, r, pc, valid = Rs_t, ts_t, r_t, pc_t, valid_t
            cost = cost_t
            iterations += 1
            lam = max(lam / 3.0, 1e-12)
            if rel < 1e-12 or step < 1e-10:
                termination = "converged"
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                termination = "stalled"
                break

    for k in free_kf:
        m.keyframes[k].pose = pose_all[k]
    for p, i in pt_index.items():
        m.points[p].position = P[i]
    return SolveReport(initial_cost=initial_cost, final_cost=cost,
                       iterations=iterations, termination=termination)


def check_integrity(m: GlobalMap) -> list[str]:
    """Full-map audit; returns a list of violations (empty = consistent)."""
    problems = []
    for pid, mp in m.points.items():
        if not mp.observations:
            problems.append(f"point {pid} has no observations")
        for kf_id, idx in mp.observations.items():
            kf = m.keyframes.get(kf_id)
            if kf is None:
                problems.append(f"point {pid} observes dead keyframe {kf_id}")
                continue
            if idx >= len(kf.map_point_links) or kf.map_point_links[idx] != pid:
                problems.append(f"point {pid} link mismatch at kf {kf_id}[{idx}]")
    for kf_id, kf in m.keyframes.items():
        for idx, pid in enumerate(kf.map_point_links):
            if pid is None:
                continue
            if pid not in m.points:
                problems.append(f"kf {kf_id}[{idx}] links dead point {pid}")
            elif m.points[pid].observations.get(kf_id) != idx:
                problems.append(f"kf {kf_id}[{idx}] not in point {pid} observations")
        for other, w in kf.covisibility.items():
            if other not in m.keyframes:
                problems.append(f"kf {kf_id} covisible with dead kf {other}")
            elif _shared_count(m, kf_id, other) != w:
                problems.append(
                    f"covisibility weight kf {kf_id}-{other}: {w} != recount")
    return problems


def dump_map(m: GlobalMap) -> str:
    """Diagnostic text dump: map points then keyframes (camera-in-world pose)."""
    lines = []
    for pid in sorted(m.points):
        mp = m.points[pid]
        x, y, z = mp.position
        lines.append(f"point {pid} {x:.9g} {y:.9g} {z:.9g} {len(mp.observations)}")
    for kid in sorted(m.keyframes):
        kf = m.keyframes[kid]
        inv = kf.pose.inverse()
        tx, ty, tz = inv.t
        qx, qy, qz, qw = inv.quat
        lines.append(
            f"keyframe {kid} {kf.timestamp:.9g} {tx:.9g} {ty:.9g} {tz:.9g} "
            f"{qx:.9g} {qy:.9g} {qz:.9g} {qw:.9g}")
    return "\n".join(lines) + "\n"
