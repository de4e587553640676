import numpy as np
import pytest

from monoslam.features import Keypoint, binarize
from monoslam.geometry import SE3Pose, compose, se3_exp
from monoslam.mapping import (
    GlobalMap,
    SkippedBAError,
    check_integrity,
    create_map_points,
    cull_map_points,
    dump_map,
    insert_keyframe,
    local_bundle_adjust,
    remove_point,
)
from monoslam.sim import (
    DEFAULT_INTRINSICS,
    TrajectorySpec,
    gen_trajectory,
    gen_world,
    visible_landmarks,
)
from monoslam.tracking import Frame

K = DEFAULT_INTRINSICS


def build_frames(world, poses, link_pred=None):
    """Frames with exact keypoints; link_pred(lid) gates map-point linking.

    Returns (frames, per-frame landmark ids). Frame links hold landmark ids;
    build_map remaps them to map-point ids.
    """
    frames = []
    all_ids = []
    for fid, pose in enumerate(poses):
        ids, uvs = visible_landmarks(world, pose, K)
        kps = [Keypoint(float(u), float(v), 0, 1.0) for u, v in uvs]
        desc = binarize(world.descriptors[ids])
        links = [lid if (link_pred is None or link_pred(lid)) else None
                 for lid in ids]
        frames.append(Frame(fid, float(fid), None, kps, desc, pose=pose,
                            map_point_links=links))
        all_ids.append(ids)
    return frames, all_ids


def build_map(world, poses, link_pred=None):
    """GlobalMap with one keyframe per pose; returns (map, lid->pid mapping)."""
    frames, _ = build_frames(world, poses, link_pred)
    m = GlobalMap()
    lid2pid = {}
    for f in frames:
        for i, lid in enumerate(f.map_point_links):
            if lid is None:
                continue
            if lid not in lid2pid:
                lid2pid[lid] = m.add_point(world.landmarks[lid])
            f.map_point_links[i] = lid2pid[lid]
        insert_keyframe(m, f)
    return m, lid2pid


@pytest.fixture(scope="module")
def world():
    return gen_world(seed=55, n_landmarks=250)


@pytest.fixture(scope="module")
def circle_poses():
    return gen_trajectory(TrajectorySpec(kind="circle", n_frames=40))


class TestInsertKeyframe:
    def test_observations_registered(self, world, circle_poses):
        m, lid2pid = build_map(world, circle_poses[:1])
        kf = m.keyframes[0]
        for idx, pid in enumerate(kf.map_point_links):
            assert m.points[pid].observations[0] == idx
            assert m.points[pid].found == 1
            assert m.points[pid].visible == 1

    def test_covisibility_edge_above_threshold(self, world, circle_poses):
        m, _ = build_map(world, circle_poses[:2])
        shared = sum(1 for p in m.keyframes[1].map_point_links
                     if p is not None and p in
                     {q for q in m.keyframes[0].map_point_links if q is not None})
        assert shared >= 15
        assert m.keyframes[0].covisibility[1] == shared
        assert m.keyframes[1].covisibility[0] == shared

    def test_covisibility_boundary(self, world):
        # two identical views sharing exactly 14 linked points: no edge
        pose = circle_pose = gen_trajectory(
            TrajectorySpec(kind="circle", n_frames=4))[0]
        ids, _ = visible_landmarks(world, pose, K)
        kept = set(ids[:14])
        m14, _ = build_map(world, [pose, pose], link_pred=lambda l: l in kept)
        assert 1 not in m14.keyframes[0].covisibility
        kept = set(ids[:15])
        m15, _ = build_map(world, [pose, pose], link_pred=lambda l: l in kept)
        assert m15.keyframes[0].covisibility[1] == 15

    def test_parent_is_most_shared(self, world, circle_poses):
        m, _ = build_map(world, [circle_poses[0], circle_poses[5],
                                 circle_poses[1]])
        # frame 2 (adjacent view) shares more with frame 0 than frame 1 does
        assert m.keyframes[2].parent == 0
        assert m.keyframes[0].parent is None

    def test_pose_required(self):
        m = GlobalMap()
        with pytest.raises(ValueError):
            insert_keyframe(m, Frame(0, 0.0, None, [],
                                     np.zeros((0, 32), np.uint8)))

    def test_integrity_after_insertion(self, world, circle_poses):
        m, _ = build_map(world, circle_poses[:4])
        assert check_integrity(m) == []


class TestCreateMapPoints:
    def _half_linked(self, world, circle_poses):
        return build_map(world, circle_poses[:2], link_pred=lambda l: l % 2 == 0)

    def test_triangulates_true_positions(self, world, circle_poses):
        m, _ = self._half_linked(world, circle_poses)
        n_before = len(m.points)
        created = create_map_points(m, 1, K)
        assert created > 0
        assert len(m.points) == n_before + created
        for pid, mp in m.points.items():
            if mp.created_at != 1:
                continue
            # new points correspond to odd landmark ids; find truth by position
            d = np.linalg.norm(world.landmarks - mp.position, axis=1)
            assert d.min() < 1e-6
            assert int(np.argmin(d)) % 2 == 1

    def test_new_points_fully_wired(self, world, circle_poses):
        m, _ = self._half_linked(world, circle_poses)
        create_map_points(m, 1, K)
        assert check_integrity(m) == []
        for mp in m.points.values():
            if mp.created_at == 1:
                assert len(mp.observations) == 2
                assert mp.descriptor is not None

    def test_no_free_keypoints_no_points(self, world, circle_poses):
        m, _ = build_map(world, circle_poses[:2])
        assert create_map_points(m, 1, K) == 0

    def test_rejects_zero_baseline(self, world, circle_poses):
        pose = circle_poses[0]
        m, _ = build_map(world, [pose, pose], link_pred=lambda l: l % 2 == 0)
        if 1 in m.keyframes[1].covisibility or 0 in m.keyframes[1].covisibility:
            assert create_map_points(m, 1, K) == 0


class TestCullAndRemove:
    def test_remove_point_restores_integrity(self, world, circle_poses):
        m, _ = build_map(world, circle_poses[:3])
        pid = next(iter(m.points))
        remove_point(m, pid)
        assert pid not in m.points
        assert check_integrity(m) == []

    def test_cull_weak_ratio(self, world, circle_poses):
        m, _ = build_map(world, circle_poses[:5])
        victim = next(iter(m.points))
        m.points[victim].visible = 10
        m.points[victim].found = 1   # ratio 0.1 < 0.25
        n = cull_map_points(m)
        assert victim not in m.points
        assert n >= 1
        assert check_integrity(m) == []

    def test_grace_period_spares_young_points(self, world, circle_poses):
        m, _ = build_map(world, circle_poses[:5])
        young = m.add_point(np.zeros(3), created_at=4)  # no observations
        m.points[young].visible = 10
        cull_map_points(m)
        assert young in m.points

    def test_cull_under_observed(self, world, circle_poses):
        m, _ = build_map(world, circle_poses[:5])
        lone = m.add_point(np.zeros(3), created_at=0)
        m.points[lone].found = m.points[lone].visible = 10
        cull_map_points(m)
        assert lone not in m.points

    def test_healthy_map_not_culled(self, world, circle_poses):
        m, _ = build_map(world, circle_poses[:5])
        multi = [pid for pid, mp in m.points.items()
                 if len(mp.observations) >= 2]
        cull_map_points(m)
        assert all(pid in m.points for pid in multi)


class TestLocalBA:
    def test_noise_free_fixed_point(self, world, circle_poses):
        m, _ = build_map(world, circle_poses[:3])
        poses_before = {k: kf.pose for k, kf in m.keyframes.items()}
        report = local_bundle_adjust(m, 2, K)
        assert report.final_cost < 1e-12
        for k, kf in m.keyframes.items():
            assert np.allclose(kf.pose.t, poses_before[k].t, atol=1e-8)

    def test_reduces_planted_error(self, world, circle_poses):
        m, lid2pid = build_map(world, circle_poses[:3])
        rng = np.random.default_rng(1)
        perturbed = [pid for pid, mp in m.points.items()
                     if len(mp.observations) >= 2]
        before = {}
        for pid in perturbed:
            true = m.points[pid].position.copy()
            m.points[pid].position = true + rng.normal(0, 0.02, 3)
            before[pid] = true
        true_pose = m.keyframes[2].pose
        m.keyframes[2].pose = compose(
            se3_exp([0.01, -0.01, 0.005, 0.002, 0.002, -0.002]), true_pose)

        err0_pts = np.sqrt(np.mean([np.sum((m.points[p].position - before[p]) ** 2)
                                    for p in perturbed]))
        local_bundle_adjust(m, 2, K, max_iter=30)
        err1_pts = np.sqrt(np.mean([np.sum((m.points[p].position - before[p]) ** 2)
                                    for p in perturbed]))
        err1_pose = np.linalg.norm(m.keyframes[2].pose.t - true_pose.t)
        assert err1_pts < err0_pts / 5
        assert err1_pose < 0.002

    def test_lone_keyframe_skipped(self, world, circle_poses):
        m, _ = build_map(world, circle_poses[:1])
        with pytest.raises(SkippedBAError):
            local_bundle_adjust(m, 0, K)


class TestIntegrityAudit:
    def test_detects_dangling_link(self, world, circle_poses):
        m, _ = build_map(world, circle_poses[:2])
        kf = m.keyframes[0]
        idx = next(i for i, p in enumerate(kf.map_point_links) if p is not None)
        kf.map_point_links[idx] = 99999
        assert any("dead point" in p for p in check_integrity(m))

    def test_detects_asymmetric_observation(self, world, circle_poses):
        m, _ = build_map(world, circle_poses[:2])
        pid = next(iter(m.points))
        m.points[pid].observations[0] = 10_000
        assert check_integrity(m) != []

    def test_detects_bad_covis_weight(self, world, circle_poses):
        m, _ = build_map(world, circle_poses[:2])
        m.keyframes[0].covisibility[1] += 3
        assert any("covisibility" in p for p in check_integrity(m))


class TestDumpMap:
    def test_format_and_content(self, world, circle_poses):
        m, _ = build_map(world, circle_poses[:2])
        text = dump_map(m)
        lines = text.strip().split("\n")
        n_pts = sum(1 for ln in lines if ln.startswith("point "))
        n_kfs = sum(1 for ln in lines if ln.startswith("keyframe "))
        assert n_pts == len(m.points)
        assert n_kfs == 2
        for ln in lines:
            tok = ln.split()
            if tok[0] == "point":
                assert len(tok) == 6
                pid = int(tok[1])
                assert np.allclose([float(t) for t in tok[2:5]],
                                   m.points[pid].position, atol=1e-6)
            else:
                assert len(tok) == 10
                kid = int(tok[1])
                inv = m.keyframes[kid].pose.inverse()
                assert np.allclose([float(t) for t in tok[3:6]], inv.t, atol=1e-6)
