"""Loop closure: online incremental binary BoW, GMS verification, Sim3, correction.

The vocabulary is grown from the sequence itself: each binarized descriptor
joins its nearest leaf when within the join threshold, otherwise it becomes a
new leaf. Keyframes are scored by L1 similarity of tf-idf vectors gathered
through the inverted index.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .features import hamming_matrix
from .geometry import (CameraIntrinsics, SE3Pose, Sim3Transform, compose,
                       umeyama_align, DegenerateAlignmentError)
from .mapping import GlobalMap, KeyFrame, _shared_count, remove_point
from .optim import (IllPosedError, ParameterStore, ResidualBlock, SolveOptions,
                    SolveReport, sim3_local, solve)

__all__ = [
    "Vocabulary",
    "LoopCandidate",
    "LoopCorrectionError",
    "vocab_add",
    "vocab_query",
    "bow_similarity",
    "gms_filter",
    "brute_force_match",
    "detect_loop",
    "compute_sim3",
    "correct_loop",
    "pr_sweep",
    "LoopCloser",
]

JOIN_THRESHOLD = 48
MIN_LOOP_MATCHES = 20
MIN_SIM3_INLIERS = 20
TEMPORAL_EXCLUSION = 10
CONSISTENT_KEYFRAMES = 3
GMS_GRID = (20, 20)
GMS_ALPHA = 6.0
ESSENTIAL_COVIS_MIN = 100
RANSAC_ITERS = 200
CHI2_2DOF = 5.99


class LoopCorrectionError(RuntimeError):
    """Loop correction optimizer failed; the map was rolled back."""


@dataclass
class Vocabulary:
    """Flat leaf set with exhaustive nearest-leaf search (desk scale)."""

    join_threshold: int = JOIN_THRESHOLD
    centroids: np.ndarray | None = None        # (L, D/8) packed
    inverted: list = field(default_factory=list)   # node id -> [(kf, kp idx)]
    node_kfs: list = field(default_factory=list)   # node id -> set of kf ids
    kf_bows: dict = field(default_factory=dict)    # kf id -> {node: weight}
    kf_count: int = 0

    @property
    def n_leaves(self) -> int:
        return 0 if self.centroids is None else len(self.centroids)


def vocab_add(vocab: Vocabulary, kf: KeyFrame) -> dict:
    """Assign every descriptor of kf to a leaf (or spawn one); return tf-idf vector."""
    desc = np.atleast_2d(kf.descriptors)
    n = len(desc)
    assignment = np.empty(n, dtype=int)
    # distances to pre-existing leaves in one pass; leaves spawned while
    # processing this keyframe are checked incrementally so the result is
    # identical to fully sequential nearest-leaf assignment
    n_old = vocab.n_leaves
    if n_old and n:
        dist_old = hamming_matrix(desc, vocab.centroids)
        best_old = np.argmin(dist_old, axis=1)
    new_rows: list[np.ndarray] = []
    for i in range(n):
        best, best_d = -1, 1 << 30
        if n_old:
            best, best_d = int(best_old[i]), int(dist_old[i, best_old[i]])
        if new_rows:
            dn = hamming_matrix(desc[i], np.stack(new_rows))[0]
            j = int(np.argmin(dn))
            if dn[j] < best_d:
                best, best_d = n_old + j, int(dn[j])
        if best >= 0 and best_d <= vocab.join_threshold:
            assignment[i] = best
            continue
        node = n_old + len(new_rows)
        new_rows.append(desc[i].copy())
        vocab.inverted.append([])
        vocab.node_kfs.append(set())
        assignment[i] = node
    if new_rows:
        stacked = np.stack(new_rows)
        vocab.centroids = stacked if vocab.centroids is None else np.vstack(
            [vocab.centroids, stacked])

    vocab.kf_count += 1
    for i, node in enumerate(assignment):
        vocab.inverted[node].append((kf.kf_id, i))
        vocab.node_kfs[node].add(kf.kf_id)

    counts: dict[int, int] = {}
    for node in assignment:
        counts[node] = counts.get(node, 0) + 1
    bow = {}
    for node, c in counts.items():
        tf = c / n
        idf = math.log(vocab.kf_count / len(vocab.node_kfs[node])) if vocab.node_kfs[node] else 0.0
        bow[node] = tf * max(idf, 1e-6)  # keep ubiquitous words barely alive
    total = sum(bow.values())
    if total > 0:
        bow = {k: v / total for k, v in bow.items()}
    vocab.kf_bows[kf.kf_id] = bow
    kf.bow = bow
    return bow


def bow_similarity(v: dict, w: dict) -> float:
    """1 - 0.5 * L1 distance of the L1-normalized sparse vectors."""
    sv = sum(v.values()) or 1.0
    sw = sum(w.values()) or 1.0
    l1 = 0.0
    for k in v.keys() | w.keys():
        l1 += abs(v.get(k, 0.0) / sv - w.get(k, 0.0) / sw)
    return 1.0 - 0.5 * l1


def vocab_query(vocab: Vocabulary, kf: KeyFrame,
                exclude: set | None = None) -> list[tuple[int, float]]:
    """Ranked (keyframe id, similarity) over keyframes sharing inverted-index nodes."""
    if kf.bow is None:
        raise ValueError("keyframe has no BoW vector; call vocab_add first")
    exclude = exclude or set()
    cand_ids = set()
    for node in kf.bow:
        cand_ids.update(vocab.node_kfs[node])
    cand_ids -= exclude
    cand_ids.discard(kf.kf_id) if kf.kf_id in exclude else None
    scored = [(kid, bow_similarity(kf.bow, vocab.kf_bows[kid]))
              for kid in cand_ids if kid in vocab.kf_bows]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored


def brute_force_match(desc_a: np.ndarray, desc_b: np.ndarray,
                      hamming_max: int = 64) -> list[tuple[int, int]]:
    """Mutual-nearest Hamming matches between two packed descriptor sets."""
    if len(desc_a) == 0 or len(desc_b) == 0:
        return []
    dm = hamming_matrix(desc_a, desc_b)
    best_b = np.argmin(dm, axis=1)
    best_a = np.argmin(dm, axis=0)
    out = []
    for ia, ib in enumerate(best_b):
        if best_a[ib] == ia and dm[ia, ib] <= hamming_max:
            out.append((int(ia), int(ib)))
    return out


def gms_filter(matches: list, kps_a, kps_b, size_a, size_b,
               grid: tuple[int, int] = GMS_GRID,
               alpha: float = GMS_ALPHA) -> list:
    """Grid-based motion statistics: keep matches in well-supported cell pairs.

    matches are (index into kps_a, index into kps_b); sizes are (width, height).
    A cell pair is supported when the number of matches joining the two cells'
    3x3 neighborhoods exceeds alpha * sqrt(n_i), n_i = matches starting in
    cell i's neighborhood.
    """
    if not matches:
        return []
    rows, cols = grid
    wa, ha = size_a
    wb, hb = size_b

    def cell(kp, w, h):
        c = min(int(kp.x * cols / w), cols - 1)
        r = min(int(kp.y * rows / h), rows - 1)
        return r, c

    ca = np.array([cell(kps_a[ia], wa, ha) for ia, _ in matches])
    cb = np.array([cell(kps_b[ib], wb, hb) for _, ib in matches])

    def box3(a, axis):
        """Sum over the 3-cell neighborhood along one axis (zero-padded)."""
        out = a.copy()
        lo = [slice(None)] * a.ndim
        hi = [slice(None)] * a.ndim
        lo[axis], hi[axis] = slice(None, -1), slice(1, None)
        out[tuple(lo)] += a[tuple(hi)]
        out[tuple(hi)] += a[tuple(lo)]
        return out

    # support: matches joining the 3x3 neighborhoods of both cells
    cnt = np.zeros((rows, cols, rows, cols), dtype=np.int64)
    np.add.at(cnt, (ca[:, 0], ca[:, 1], cb[:, 0], cb[:, 1]), 1)
    for axis in range(4):
        cnt = box3(cnt, axis)
    support = cnt[ca[:, 0], ca[:, 1], cb[:, 0], cb[:, 1]]

    # n_i: matches originating in cell i's 3x3 neighborhood
    na = np.zeros((rows, cols), dtype=np.int64)
    np.add.at(na, (ca[:, 0], ca[:, 1]), 1)
    na = box3(box3(na, 0), 1)
    origin = na[ca[:, 0], ca[:, 1]]

    keep = support > alpha * np.sqrt(origin)
    return [m for m, k in zip(matches, keep) if k]


@dataclass
class LoopCandidate:
    kf_id: int
    candidate_id: int
    score: float
    matches: list = field(default_factory=list)   # (kp idx in kf, kp idx in cand)
    t_sim: Sim3Transform | None = None            # candidate-cam -> current-cam
    n_inliers: int = 0
    verdict: str = "pending"                      # pending | rejected | accepted


@dataclass
class LoopCloser:
    """Vocabulary plus candidate-consistency bookkeeping and the loop log."""

    vocab: Vocabulary = field(default_factory=Vocabulary)
    consistency_required: int = CONSISTENT_KEYFRAMES
    _streak_region: set = field(default_factory=set)
    _streak: int = 0
    log: list = field(default_factory=list)       # loop-log rows


def detect_loop(closer: LoopCloser, m: GlobalMap, kf: KeyFrame,
                K: CameraIntrinsics,
                min_matches: int = MIN_LOOP_MATCHES) -> LoopCandidate | None:
    """Query, consistency-check, GMS-verify, and Sim3-verify one keyframe.

    Returns an accepted LoopCandidate or None; rejected candidates are logged.
    """
    vocab = closer.vocab
    exclude = set(kf.covisibility) | {kf.kf_id}
    exclude.update(range(max(0, kf.kf_id - TEMPORAL_EXCLUSION), kf.kf_id + 1))
    ranked = vocab_query(vocab, kf, exclude)
    if not ranked:
        closer._streak = 0
        closer._streak_region = set()
        return None
    cand_id, score = ranked[0]
    cand = m.keyframes[cand_id]

    region = {cand_id} | set(cand.covisibility)
    if closer._streak and (region & closer._streak_region):
        closer._streak += 1
        closer._streak_region |= region
    else:
        closer._streak = 1
        closer._streak_region = region
    if closer._streak < closer.consistency_required:
        return None

    raw = brute_force_match(kf.descriptors, cand.descriptors)
    size = (K.width, K.height)
    gms = gms_filter(raw, kf.keypoints, cand.keypoints, size, size)
    lc = LoopCandidate(kf.kf_id, cand_id, score, gms)
    if len(gms) < min_matches:
        lc.verdict = "rejected"
        closer.log.append((kf.kf_id, cand_id, score, len(gms), 0, "rejected"))
        return None
    lc = compute_sim3(m, lc, K)
    closer.log.append((kf.kf_id, cand_id, score, len(gms), lc.n_inliers, lc.verdict))
    return lc if lc.verdict == "accepted" else None


def _sim3_inlier_mask(S: Sim3Transform, P_h: np.ndarray, OBS_c: np.ndarray,
                      P_c: np.ndarray, OBS_h: np.ndarray,
                      K: CameraIntrinsics) -> np.ndarray:
    """Both-view reprojection check of 3D-3D pairs under S (cand -> current)."""
    mask = np.ones(len(P_h), dtype=bool)
    for pts, obs, T in ((P_h, OBS_c, S), (P_c, OBS_h, S.inverse())):
        q = T.apply(pts)
        z = q[:, 2]
        ok = z > 0
        zs = np.where(ok, z, 1.0)
        u = K.fx * q[:, 0] / zs + K.cx
        v = K.fy * q[:, 1] / zs + K.cy
        e2 = (obs[:, 0] - u) ** 2 + (obs[:, 1] - v) ** 2
        mask &= ok & (e2 <= CHI2_2DOF)
    return mask


SIM3_REFINE_MAX_PAIRS = 200
SCALE_ANCHOR_WEIGHT = 50.0


def _refine_sim3(S: Sim3Transform, P_c, P_h, OBS_c, OBS_h,
                 K: CameraIntrinsics) -> Sim3Transform:
    """LM refinement of S over both-view reprojection residuals.

    When the loop baseline is near zero, perspective division cancels the
    scale and reprojection alone leaves it unobservable, so the log-scale is
    softly anchored to its 3D-3D (Umeyama) estimate.
    """
    n = len(P_c)
    idx = np.unique(np.linspace(0, n - 1, min(n, SIM3_REFINE_MAX_PAIRS)).astype(int))
    store = ParameterStore()
    store.add("S", S)
    blocks = []
    for i in idx:
        def res(S, i=i):
            out = np.zeros(4)
            q = S.apply(P_h[i])
            if q[2] > 1e-9:
                out[0] = OBS_c[i][0] - (K.fx * q[0] / q[2] + K.cx)
                out[1] = OBS_c[i][1] - (K.fy * q[1] / q[2] + K.cy)
            else:
                out[0] = out[1] = 1e3
            r = S.inverse().apply(P_c[i])
            if r[2] > 1e-9:
                out[2] = OBS_h[i][0] - (K.fx * r[0] / r[2] + K.cx)
                out[3] = OBS_h[i][1] - (K.fy * r[1] / r[2] + K.cy)
            else:
                out[2] = out[3] = 1e3
            return out

        blocks.append(ResidualBlock(res, ("S",), huber_delta=2.45))

    log_s0 = math.log(S.scale)
    blocks.append(ResidualBlock(
        lambda S: np.array([SCALE_ANCHOR_WEIGHT * (math.log(S.scale) - log_s0)]),
        ("S",)))
    solve(blocks, store, SolveOptions(max_iter=15))
    return store.value("S")


def compute_sim3(m: GlobalMap, cand: LoopCandidate, K: CameraIntrinsics,
                 min_inliers: int = MIN_SIM3_INLIERS,
                 ransac_iters: int = RANSAC_ITERS,
                 seed: int = 0) -> LoopCandidate:
    """RANSAC + LM similarity transform between the candidate pair's map points.

    T_sim maps candidate-keyframe camera coordinates into current-keyframe
    camera coordinates. Accepts when refined inliers reach the threshold.
    """
    kfc = m.keyframes[cand.kf_id]
    kfh = m.keyframes[cand.candidate_id]

    pairs = []  # (p_c cam, p_h cam, obs_c px, obs_h px)
    for ia, ib in cand.matches:
        pa = kfc.map_point_links[ia]
        pb = kfh.map_point_links[ib]
        if pa is None or pb is None or pa not in m.points or pb not in m.points:
            continue
        p_c = kfc.pose.apply(m.points[pa].position)
        p_h = kfh.pose.apply(m.points[pb].position)
        obs_c = np.array([kfc.keypoints[ia].x, kfc.keypoints[ia].y])
        obs_h = np.array([kfh.keypoints[ib].x, kfh.keypoints[ib].y])
        pairs.append((p_c, p_h, obs_c, obs_h))
    if len(pairs) < 3:
        cand.verdict = "rejected"
        return cand

    rng = np.random.default_rng(seed)
    n = len(pairs)
    P_c = np.array([p[0] for p in pairs])
    P_h = np.array([p[1] for p in pairs])
    OBS_c = np.array([p[2] for p in pairs])
    OBS_h = np.array([p[3] for p in pairs])
    best_mask = np.zeros(n, dtype=bool)
    for _ in range(ransac_iters):
        idx = rng.choice(n, size=3, replace=False)
        try:
            S = umeyama_align(P_h[idx], P_c[idx], with_scale=True)
        except (DegenerateAlignmentError, ValueError):
            continue
        mask = _sim3_inlier_mask(S, P_h, OBS_c, P_c, OBS_h, K)
        if mask.sum() > best_mask.sum():
            best_mask = mask
    if best_mask.sum() < 3:
        cand.verdict = "rejected"
        return cand

    S = umeyama_align(P_h[best_mask], P_c[best_mask], with_scale=True)
    S = _refine_sim3(S, P_c[best_mask], P_h[best_mask],
                     OBS_c[best_mask], OBS_h[best_mask], K)

    # guided second pass: project unmatched candidate-side map points through S
    matched_b = {ib for _, ib in cand.matches}
    free_b = [ib for ib, pid in enumerate(kfh.map_point_links)
              if pid is not None and ib not in matched_b and pid in m.points]
    link_a = [(ia, pid) for ia, pid in enumerate(kfc.map_point_links)
              if pid is not None and pid in m.points]
    if free_b and link_a:
        G_h = kfh.pose.apply(np.array(
            [m.points[kfh.map_point_links[ib]].position for ib in free_b]))
        q = S.apply(G_h)
        front = q[:, 2] > 0
        zs = np.where(front, q[:, 2], 1.0)
        proj = np.stack([K.fx * q[:, 0] / zs + K.cx,
                         K.fy * q[:, 1] / zs + K.cy], axis=1)
        kp_a = np.array([[kfc.keypoints[ia].x, kfc.keypoints[ia].y]
                         for ia, _ in link_a])
        d2 = np.sum((proj[:, None, :] - kp_a[None, :, :]) ** 2, axis=2)
        nearest = np.argmin(d2, axis=1)
        add_c, add_h, add_oc, add_oh = [], [], [], []
        for j, ib in enumerate(free_b):
            if not front[j] or d2[j, nearest[j]] >= 7.5**2:
                continue
            ia = link_a[nearest[j]][0]
            add_c.append(kfc.pose.apply(m.points[link_a[nearest[j]][1]].position))
            add_h.append(G_h[j])
            add_oc.append([kfc.keypoints[ia].x, kfc.keypoints[ia].y])
            add_oh.append([kfh.keypoints[ib].x, kfh.keypoints[ib].y])
        if add_c:
            P_c = np.vstack([P_c, add_c])
            P_h = np.vstack([P_h, add_h])
            OBS_c = np.vstack([OBS_c, add_oc])
            OBS_h = np.vstack([OBS_h, add_oh])

    mask = _sim3_inlier_mask(S, P_h, OBS_c, P_c, OBS_h, K)
    if mask.sum() >= 3:
        S = _refine_sim3(S, P_c[mask], P_h[mask], OBS_c[mask], OBS_h[mask], K)
        mask = _sim3_inlier_mask(S, P_h, OBS_c, P_c, OBS_h, K)

    cand.t_sim = S
    cand.n_inliers = int(mask.sum())
    cand.verdict = "accepted" if cand.n_inliers >= min_inliers else "rejected"
    return cand


def _sim3_of_pose(pose: SE3Pose, scale: float = 1.0) -> Sim3Transform:
    return Sim3Transform(scale, pose.quat, pose.t)


def correct_loop(m: GlobalMap, cand: LoopCandidate, K: CameraIntrinsics,
                 global_ba_iters: int = 10) -> SolveReport:
    """Propagate the loop Sim3, fuse duplicates, optimize the essential graph,
    then run global BA. Transactional: any optimizer failure restores the map.
    """
    if cand.verdict != "accepted" or cand.t_sim is None:
        raise ValueError("loop candidate not accepted")
    snapshot = copy.deepcopy((m.keyframes, m.points))
    try:
        report = _correct_loop_inner(m, cand, K, global_ba_iters)
        if not np.isfinite(report.final_cost):
            raise IllPosedError("non-finite cost after correction")
        return report
    except Exception as exc:
        m.keyframes, m.points = snapshot
        raise LoopCorrectionError(str(exc)) from exc


def _correct_loop_inner(m: GlobalMap, cand: LoopCandidate, K: CameraIntrinsics,
                        global_ba_iters: int) -> SolveReport:
    kfc = m.keyframes[cand.kf_id]
    kfm = m.keyframes[cand.candidate_id]
    S_cm = cand.t_sim  # matched-kf cam -> current cam
    pre_poses = {kid: kf.pose for kid, kf in m.keyframes.items()}
    # essential-graph edges from the pre-fusion graph: covis edges created by
    # duplicate fusion would carry drifted measurements that fight the loop
    edges = set()
    for kid, kf in m.keyframes.items():
        if kf.parent is not None:
            edges.add(tuple(sorted((kid, kf.parent))))
        for oid, w in kf.covisibility.items():
            if w >= ESSENTIAL_COVIS_MIN:
                edges.add(tuple(sorted((kid, oid))))
    # sequential odometry chain keeps the graph connected even where
    # covisibility breaks (e.g. sharp turns or duplicated revisit points)
    kids = sorted(m.keyframes)
    for a, b in zip(kids, kids[1:]):
        edges.add((a, b))
    edges.add(tuple(sorted((cand.kf_id, cand.candidate_id))))

    # (1) corrected Sim3 poses for the current keyframe and its neighbors
    S_cw_corr = S_cm * _sim3_of_pose(kfm.pose)
    corrected: dict[int, Sim3Transform] = {cand.kf_id: S_cw_corr}
    pose_c_old = kfc.pose
    for nid in kfc.covisibility:
        rel = compose(m.keyframes[nid].pose, pose_c_old.inverse())
        corrected[nid] = _sim3_of_pose(rel) * S_cw_corr

    # move co-observed points with their (corrected) reference keyframes
    moved = set()
    old_sim3 = {kid: _sim3_of_pose(m.keyframes[kid].pose) for kid in corrected}
    for kid, S_new in corrected.items():
        kf = m.keyframes[kid]
        for pid in kf.map_point_links:
            if pid is None or pid in moved or pid not in m.points:
                continue
            mp = m.points[pid]
            mp.position = S_new.inverse().apply(old_sim3[kid].apply(mp.position))
            moved.add(pid)
        S = S_new
        kf.pose = SE3Pose(S.quat, S.t / S.scale)

    # (2) fuse duplicate map points across the loop (keep the matched side)
    for ia, ib in cand.matches:
        pa = kfc.map_point_links[ia]
        pb = kfm.map_point_links[ib]
        if pa is None or pb is None or pa == pb:
            continue
        if pa not in m.points or pb not in m.points:
            continue
        keep, drop = m.points[pb], m.points[pa]
        for kid, idx in list(drop.observations.items()):
            kf = m.keyframes[kid]
            if kid in keep.observations:
                kf.map_point_links[idx] = None
            else:
                keep.observations[kid] = idx
                kf.map_point_links[idx] = keep.id
        keep.found += drop.found
        keep.visible += drop.visible
        drop.observations = {}
        del m.points[drop.id]
    _recount_covisibility(m, {cand.kf_id, cand.candidate_id}
                          | set(kfc.covisibility) | set(kfm.covisibility))

    # (3) essential-graph Sim3 pose-graph optimization, matched side fixed
    store = ParameterStore()
    for kid, kf in m.keyframes.items():
        S = corrected.get(kid, _sim3_of_pose(kf.pose))
        store.add(("kf", kid), S)
    store[("kf", cand.candidate_id)].fixed = True

    loop_edge = tuple(sorted((cand.kf_id, cand.candidate_id)))
    blocks = []
    for a, b in sorted(edges):
        if (a, b) == loop_edge:
            # loop constraint: S_current = S_cm * S_matched
            ia, ib = cand.kf_id, cand.candidate_id
            meas = S_cm
        else:
            # odometry constraint from the pre-correction poses
            ia, ib = a, b
            meas = _sim3_of_pose(compose(pre_poses[a], pre_poses[b].inverse()))

        def res(Sa, Sb, meas=meas):
            return sim3_local(meas.inverse() * (Sa * Sb.inverse()))

        blocks.append(ResidualBlock(res, (("kf", ia), ("kf", ib))))

    graph_report = solve(blocks, store, SolveOptions(max_iter=20))
    if not np.isfinite(graph_report.final_cost):
        raise IllPosedError("essential graph diverged")

    old_poses = {kid: _sim3_of_pose(kf.pose) if kid not in corrected else corrected[kid]
                 for kid, kf in m.keyframes.items()}
    moved = set()
    for kid, kf in m.keyframes.items():
        S_new = store.value(("kf", kid))
        for pid in kf.map_point_links:
            if pid is None or pid in moved or pid not in m.points:
                continue
            mp = m.points[pid]
            mp.position = S_new.inverse().apply(old_poses[kid].apply(mp.position))
            moved.add(pid)
        kf.pose = SE3Pose(S_new.quat, S_new.t / S_new.scale)

    # (4) global bundle adjustment, first keyframe fixed
    if global_ba_iters <= 0:
        return graph_report
    from .mapping import global_bundle_adjust
    return global_bundle_adjust(m, K, max_iter=global_ba_iters)


def _recount_covisibility(m: GlobalMap, kf_ids: set) -> None:
    for a in kf_ids:
        if a not in m.keyframes:
            continue
        ka = m.keyframes[a]
        for b in list(ka.covisibility):
            if b not in m.keyframes:
                del ka.covisibility[b]
                continue
            w = _shared_count(m, a, b)
            if w > 0:
                ka.covisibility[b] = w
                m.keyframes[b].covisibility[a] = w
            else:
                ka.covisibility.pop(b, None)
                m.keyframes[b].covisibility.pop(a, None)
        # fusion can create fresh strong pairs
        for b in kf_ids:
            if b == a or b in ka.covisibility or b not in m.keyframes:
                continue
            w = _shared_count(m, a, b)
            if w >= 15:
                ka.covisibility[b] = w
                m.keyframes[b].covisibility[a] = w


def pr_sweep(scores: list[float], labels: list[bool]) -> list[tuple[float, float, float]]:
    """Precision/recall at every distinct score threshold (descending).

    A detection fires when score >= threshold; labels mark true loops.
    """
    rows = []
    n_pos = sum(labels)
    for thr in sorted(set(scores), reverse=True):
        tp = sum(1 for s, l in zip(scores, labels) if s >= thr and l)
        fp = sum(1 for s, l in zip(scores, labels) if s >= thr and not l)
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / n_pos if n_pos else 0.0
        rows.append((thr, precision, recall))
    return rows
