"""Pipeline driver, configuration, and command-line interface."""

import os

import numpy as np
import pytest

from monoslam.config import ConfigError, DEFAULTS, load_config, parse_overrides
from monoslam.cli import main
from monoslam.evaluate import eval_ate, load_trajectory
from monoslam.mapping import check_integrity
from monoslam.pipeline import (
    PipelineError,
    SequenceSource,
    run_sequence,
    write_run_outputs,
)
from monoslam.sim import TrajectorySpec


# ---------------------------------------------------------------- config


def test_config_defaults():
    cfg = load_config()
    assert cfg == DEFAULTS
    assert cfg is not DEFAULTS  # caller gets a copy


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# comment\n"
        "tracking.search_radius = 9.5\n"
        "loop.enabled = false   # inline comment\n"
        "\n"
        "features.total_keypoints=500\n"
    )
    cfg = load_config(path, overrides=["features.total_keypoints=800"])
    assert cfg["tracking.search_radius"] == 9.5
    assert cfg["loop.enabled"] is False
    assert cfg["features.total_keypoints"] == 800  # override wins over file


def test_config_bool_forms():
    for raw, want in [("1", True), ("true", True), ("ON", True),
                      ("0", False), ("no", False), ("off", False)]:
        assert parse_overrides([f"loop.enabled={raw}"])["loop.enabled"] is want


@pytest.mark.parametrize("bad", [
    "nonsense.key=1",            # unknown key
    "tracking.search_radius",    # missing =
    "run.seed=abc",              # bad int
    "loop.enabled=maybe",        # bad bool
])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        parse_overrides([bad])


def test_config_file_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("who.knows=1\n")
    with pytest.raises(ConfigError):
        load_config(path)


# ---------------------------------------------------------------- pipeline


def _gt_traj(src):
    return list(zip(src.timestamps, src.gt_poses))


def test_two_frame_sequence_initializes_only():
    src = SequenceSource.synthetic(
        TrajectorySpec(kind="straight", n_frames=2, speed=0.3),
        seed=5, render=False)
    res = run_sequence(src, {"loop.enabled": False})
    assert len(res.trajectory) == 2
    assert len(res.map.keyframes) == 2
    assert res.n_lost == 0
    assert res.loops_corrected == []
    # monocular gauge: first pose is the identity, scale is median depth 1
    t0, p0 = res.trajectory[0]
    assert np.allclose(p0.matrix(), np.eye(4))


def test_circle_run_tracks_and_maps():
    src = SequenceSource.synthetic(
        TrajectorySpec(kind="circle", n_frames=12), seed=5, render=False)
    res = run_sequence(src, {"loop.enabled": False})
    assert res.n_lost == 0
    assert len(res.trajectory) == 12
    assert len(res.map.keyframes) >= 2
    assert len(res.map.points) > 100
    assert check_integrity(res.map) == []
    r = eval_ate(res.trajectory, _gt_traj(src), monocular_scale=True)
    assert r.ate_rmse < 0.01


def test_rendered_run_with_coarse_stage():
    src = SequenceSource.synthetic(
        TrajectorySpec(kind="circle", n_frames=6), seed=5, render=True)
    assert src.images is not None
    res = run_sequence(src, {"loop.enabled": False})
    assert res.n_lost == 0
    r = eval_ate(res.trajectory, _gt_traj(src), monocular_scale=True)
    assert r.ate_rmse < 0.01


def test_statuses_cover_every_frame():
    src = SequenceSource.synthetic(
        TrajectorySpec(kind="circle", n_frames=12), seed=5, render=False)
    res = run_sequence(src, {"loop.enabled": False})
    assert [fid for fid, _, _ in res.statuses] == list(range(12))
    assert res.statuses[0][2] == "initializing"
    assert all(s in ("initializing", "ok", "lost") for _, _, s in res.statuses)


def test_missing_sidecar_frame_raises():
    src = SequenceSource.synthetic(
        TrajectorySpec(kind="circle", n_frames=12), seed=5, render=False)
    del src.sidecar[7]
    with pytest.raises(PipelineError):
        run_sequence(src, {"loop.enabled": False})


def test_too_short_sequence_raises():
    src = SequenceSource.synthetic(
        TrajectorySpec(kind="straight", n_frames=2, speed=1e-5),
        seed=5, render=False)
    with pytest.raises(PipelineError):
        run_sequence(src, {"loop.enabled": False})


def test_run_outputs_written(tmp_path):
    src = SequenceSource.synthetic(
        TrajectorySpec(kind="circle", n_frames=12), seed=5, render=False)
    res = run_sequence(src, {"loop.enabled": False})
    paths = write_run_outputs(res, tmp_path)
    for p in paths.values():
        assert os.path.exists(p)
    traj = load_trajectory(paths["trajectory"], fmt="tum")
    assert len(traj) == len(res.trajectory)
    lines = [ln for ln in open(paths["frames"]) if not ln.startswith("#")]
    assert len(lines) == 12


def test_determinism_bitwise(tmp_path):
    spec = TrajectorySpec(kind="circle", n_frames=12)
    blobs = []
    for run in ("a", "b"):
        src = SequenceSource.synthetic(spec, seed=9, render=False)
        res = run_sequence(src, {"loop.enabled": False})
        out = tmp_path / run
        paths = write_run_outputs(res, out)
        blobs.append(open(paths["trajectory"], "rb").read())
    assert blobs[0] == blobs[1]


# ---------------------------------------------------------------- cli


def test_cli_simulate_run_eval_plots(tmp_path, capsys):
    sim_dir = tmp_path / "sim"
    rc = main(["simulate", "--spec", "kind=circle,n_frames=10",
               "--seed", "4", "--out", str(sim_dir)])
    assert rc == 0
    assert (sim_dir / "keypoints.bin").exists()
    assert (sim_dir / "groundtruth.txt").exists()

    run_dir = tmp_path / "run"
    rc = main(["run", "--synthetic", "kind=circle,n_frames=10", "--seed", "4",
               "--set", "loop.enabled=false", "--out", str(run_dir)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "frames=10" in out
    assert (run_dir / "trajectory.txt").exists()

    rc = main(["eval", "--est", str(run_dir / "trajectory.txt"),
               "--gt", str(run_dir / "groundtruth.txt"),
               "--mode", "ate", "--scale"])
    assert rc == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("ate_rmse=")
    assert float(line.split("=")[1]) < 0.01

    rc = main(["plots", "--run-dir", str(run_dir)])
    assert rc == 0
    assert (run_dir / "trajectory_xy.csv").exists()


def test_cli_error_is_one_line_and_nonzero(tmp_path, capsys):
    rc = main(["eval", "--est", str(tmp_path / "missing.txt"),
               "--gt", str(tmp_path / "missing.txt")])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("error ")
    assert err.count("\n") == 1  # exactly one line


def test_cli_rejects_unknown_config_key(tmp_path, capsys):
    rc = main(["run", "--synthetic", "kind=circle,n_frames=4",
               "--set", "bogus.key=1", "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "error ConfigError" in capsys.readouterr().err


def test_cli_rejects_bad_spec(tmp_path, capsys):
    rc = main(["run", "--synthetic", "kind=circle,warp=9",
               "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "error ValueError" in capsys.readouterr().err


def test_cli_rejects_corrupt_sidecar(tmp_path, capsys):
    img_dir = tmp_path / "imgs"
    img_dir.mkdir()
    import cv2
    rng = np.random.default_rng(0)
    for i in range(2):
        cv2.imwrite(str(img_dir / f"{i:04d}.png"),
                    rng.integers(0, 255, (60, 80)).astype(np.uint8))
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOPE" + b"\x00" * 16)
    rc = main(["run", "--images", str(img_dir), "--sidecar", str(bad),
               "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "error MalformedSidecarError" in capsys.readouterr().err
