from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from fisheye_depth import io as fio
from fisheye_depth.camera import format_calibration, parse_calibration, project, unproject
from fisheye_depth.cli import main
from fisheye_depth.pose import RigidTransform, Trajectory, format_poses
from fisheye_depth.ray_cache import build_ray_table, load
from fisheye_depth.synth import demo_camera, demo_scene, format_scene

from test_io import kitti_yaml

QUICK = ["--hyps", "16", "--levels", "1"]


def run(argv, capsys) -> tuple[int, str, str]:
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Calibration, scene and a three-frame trajectory moving along x by 0.3 m."""
    root = tmp_path_factory.mktemp("cli")
    (root / "calib.txt").write_text(format_calibration(demo_camera()))
    (root / "scene.ini").write_text(format_scene(demo_scene()))
    trajectory = Trajectory([(k, RigidTransform.from_translation([0.3 * k, 0.0, 0.0])) for k in range(3)])
    (root / "poses.txt").write_text(format_poses(trajectory))
    code = main(
        ["synth", "--scene", str(root / "scene.ini"), "--calib", str(root / "calib.txt"),
         "--poses", str(root / "poses.txt"), "--out-dir", str(root / "data")]
    )
    assert code == 0
    return root


def estimate_args(root, out, extra=()):
    images = root / "data" / "cam0" / "images"
    return [
        "estimate", "--target", images / "000001.png",
        "--sources", f"{images / '000000.png'},{images / '000002.png'}",
        "--poses", root / "poses.txt", "--calib", root / "calib.txt", "--out", out, *extra,
    ]


class TestUsage:
    def test_help(self, capsys):
        code, out, _ = run(["--help"], capsys)
        assert code == 0 and "estimate" in out and "convert-calib" in out

    @pytest.mark.parametrize(
        "command", ["project", "unproject", "build-cache", "convert-calib", "synth", "warp", "estimate", "eval", "fuse-head"]
    )
    def test_help_per_command(self, command, capsys):
        code, out, _ = run([command, "--help"], capsys)
        assert code == 0 and out.startswith("usage:")

    def test_unknown_command(self, capsys):
        assert run(["sharpen"], capsys)[0] == 2

    def test_estimate_missing_arguments(self, capsys):
        code, _, err = run(["estimate", "--target", "t.png"], capsys)
        assert code == 2 and "--sources" in err

    def test_coordinate_arity(self, capsys, workspace):
        assert run(["project", "--calib", workspace / "calib.txt", "1", "2"], capsys)[0] == 2

    def test_module_entry_point(self):
        result = subprocess.run([sys.executable, "-m", "fisheye_depth", "--help"], capture_output=True, text=True)
        assert result.returncode == 0 and "usage:" in result.stdout


class TestDomainErrors:
    def test_single_machine_parsable_line(self, capsys, workspace):
        code, out, err = run(["project", "--calib", workspace / "calib.txt", "0", "0", "0"], capsys)
        assert code == 1 and out == ""
        assert err.count("\n") == 1 and err.startswith("error: ZeroNormPoint: ")

    def test_missing_file(self, capsys, tmp_path):
        code, _, err = run(["project", "--calib", tmp_path / "absent.txt", "0", "0", "1"], capsys)
        assert code == 1 and err.startswith("error: IoFailure: ")

    def test_missing_pose(self, capsys, workspace, tmp_path):
        (tmp_path / "poses.txt").write_text((workspace / "poses.txt").read_text().splitlines()[0] + "\n")
        argv = estimate_args(workspace, tmp_path / "d.pfm", QUICK)
        argv[argv.index("--poses") + 1] = tmp_path / "poses.txt"
        code, _, err = run(argv, capsys)
        assert code == 1 and err.startswith("error: MissingFrame: ")


class TestGeometryCommands:
    def test_project(self, capsys, workspace):
        code, out, _ = run(["project", "--calib", workspace / "calib.txt", "0.3", "-0.2", "1.5"], capsys)
        u, v = (float(x) for x in out.split())
        assert code == 0
        assert (u, v) == tuple(project(np.array([0.3, -0.2, 1.5]), demo_camera()))

    def test_unproject_principal_point(self, capsys, workspace):
        code, out, _ = run(["unproject", "--calib", workspace / "calib.txt", "80", "80"], capsys)
        np.testing.assert_allclose([float(x) for x in out.split()], [0, 0, 1], atol=1e-15)

    def test_batch_files(self, capsys, workspace, tmp_path):
        (tmp_path / "uv.txt").write_text("20 30\n100.5 70.25\n")
        code, out, _ = run(["unproject", "--calib", workspace / "calib.txt", "--pixels", tmp_path / "uv.txt"], capsys)
        rows = [[float(x) for x in line.split()] for line in out.splitlines()]
        np.testing.assert_array_equal(rows[1], unproject(100.5, 70.25, demo_camera()))

    def test_build_cache(self, capsys, workspace, tmp_path):
        code, out, _ = run(["build-cache", "--calib", workspace / "calib.txt", "--out", tmp_path / "rays.bin"], capsys)
        assert code == 0 and out.strip() == str(tmp_path / "rays.bin")
        assert np.array_equal(load(tmp_path / "rays.bin").rays, build_ray_table(demo_camera()).rays, equal_nan=True)

    def test_build_cache_directory(self, capsys, workspace, tmp_path):
        args = ["build-cache", "--calib", workspace / "calib.txt", "--ray-cache-dir", tmp_path]
        code, out, _ = run(args, capsys)
        assert code == 0 and out.strip().startswith(str(tmp_path))
        assert run(args, capsys)[1] == out

    def test_convert_calib(self, capsys, tmp_path):
        (tmp_path / "image_02.yaml").write_text(kitti_yaml(p1=1e-4))
        argv = ["convert-calib", "--kitti360", tmp_path / "image_02.yaml", "--out", tmp_path / "calib.txt"]
        code, _, err = run(argv, capsys)
        assert code == 1 and err.startswith("error: LossyConversion: ")
        assert not (tmp_path / "calib.txt").exists()
        assert run(argv + ["--allow-lossy"], capsys)[0] == 0
        converted = parse_calibration((tmp_path / "calib.txt").read_text())
        assert converted == fio.parse_kitti360_fisheye(kitti_yaml())


class TestPipeline:
    def test_synth_layout(self, workspace):
        index = fio.load_dataset(workspace / "data")
        assert index.warnings == () and index["cam0"].frames == (0, 1, 2)

    def test_warp_with_ground_truth(self, capsys, workspace, tmp_path):
        cam_dir = workspace / "data" / "cam0"
        code, out, _ = run(
            ["warp", "--source", cam_dir / "images" / "000002.png", "--distance", cam_dir / "gt" / "000001.pfm",
             "--calib", workspace / "calib.txt", "--poses", workspace / "poses.txt", "--frames", "1,2",
             "--out", tmp_path / "w.png", "--mask-out", tmp_path / "m.png",
             "--target", cam_dir / "images" / "000001.png"],
            capsys,
        )
        lines = dict(line.split() for line in out.splitlines())
        assert code == 0 and float(lines["photometric_loss"]) < 0.01
        assert int(lines["valid_pixels"]) == fio.read_mask(tmp_path / "m.png").sum()

    def test_estimate_then_eval(self, capsys, workspace, tmp_path):
        assert run(estimate_args(workspace, tmp_path / "d.pfm"), capsys)[0] == 0
        gt = workspace / "data" / "cam0" / "gt" / "000001.pfm"
        code, out, _ = run(["eval", "--pred", tmp_path / "d.pfm", "--gt", gt, "--report", tmp_path / "r.json"], capsys)
        report = json.loads((tmp_path / "r.json").read_text())
        assert code == 0 and out.split()[0] == "abs_rel"
        assert report["mean"]["abs_rel"] < 0.05
        assert report["clamp"] == [0.3, 80.0]

    def test_repeat_runs_byte_identical(self, capsys, workspace, tmp_path):
        for name in ("a.pfm", "b.pfm"):
            assert run(estimate_args(workspace, tmp_path / name, QUICK), capsys)[0] == 0
        assert (tmp_path / "a.pfm").read_bytes() == (tmp_path / "b.pfm").read_bytes()

    def test_dataset_mode_parallel_matches_serial(self, capsys, workspace, tmp_path):
        for jobs, out_dir in ((1, "serial"), (2, "parallel")):
            argv = ["estimate", "--dataset", workspace / "data", "--out-dir", tmp_path / out_dir, "--jobs", jobs, *QUICK]
            code, out, _ = run(argv, capsys)
            assert code == 0 and len(out.splitlines()) == 3
        for frame in ("000000.pfm", "000001.pfm", "000002.pfm"):
            serial = (tmp_path / "serial" / "cam0" / frame).read_bytes()
            assert serial == (tmp_path / "parallel" / "cam0" / frame).read_bytes()

    def test_dataset_neighbor_offsets(self, capsys, workspace, tmp_path):
        argv = ["estimate", "--dataset", workspace / "data", "--out-dir", tmp_path, "--neighbors=-2,2", *QUICK]
        code, out, _ = run(argv, capsys)
        # only frames 0 and 2 have a source two frames away
        assert code == 0 and [line[-10:] for line in out.splitlines()] == ["000000.pfm", "000002.pfm"]
        (tmp_path / "run.cfg").write_text("[run]\nneighbors = 0\n")
        code, _, err = run(["estimate", "--dataset", workspace / "data", "--out-dir", tmp_path,
                            "--config", tmp_path / "run.cfg", *QUICK], capsys)
        assert code == 1 and "neighbor offsets" in err

    def test_eval_directories(self, capsys, workspace, tmp_path):
        gt_dir = workspace / "data" / "cam0" / "gt"
        code, out, _ = run(["eval", "--pred", gt_dir, "--gt", gt_dir], capsys)
        report = json.loads(out[out.index("{"):])
        assert code == 0 and sorted(report["images"]) == ["000000", "000001", "000002"]
        assert report["mean"]["abs_rel"] == 0.0 and report["mean"]["delta1"] == 1.0

    def test_no_temp_files_left(self, workspace):
        assert list(workspace.rglob("*.tmp")) == []


class TestFuseHead:
    def test_writes_finest_scale(self, capsys, tmp_path, rng):
        np.savez(tmp_path / "f.npz", **{"stage.0": rng.normal(size=(4, 16, 16)), "stage.1": rng.normal(size=(8, 8, 8))})
        argv = ["fuse-head", "--features", tmp_path / "f.npz", "--out", tmp_path / "d.pfm",
                "--all-scales", tmp_path / "scales", "--d-min", "0.1", "--d-max", "5"]
        code, _, _ = run(argv, capsys)
        fused = fio.read_distance_map(tmp_path / "d.pfm")
        assert code == 0 and fused.shape == (16, 16)
        assert (fused >= 1 / 5 * (1 - 1e-6)).all() and (fused <= 10 * (1 + 1e-6)).all()
        np.testing.assert_array_equal(fio.read_distance_map(tmp_path / "scales" / "scale0.pfm"), fused)
        assert fio.read_distance_map(tmp_path / "scales" / "scale1.pfm").shape == (8, 8)

    def test_seeded_and_deterministic(self, capsys, tmp_path, rng):
        np.savez(tmp_path / "f.npz", **{"stage.0": rng.normal(size=(3, 6, 6))})
        for name in ("a.pfm", "b.pfm"):
            run(["fuse-head", "--features", tmp_path / "f.npz", "--out", tmp_path / name], capsys)
        assert (tmp_path / "a.pfm").read_bytes() == (tmp_path / "b.pfm").read_bytes()

    def test_bad_features(self, capsys, tmp_path):
        np.savez(tmp_path / "f.npz", **{"stage.1": np.zeros((2, 4, 4))})
        code, _, err = run(["fuse-head", "--features", tmp_path / "f.npz", "--out", tmp_path / "d.pfm"], capsys)
        assert code == 1 and err.startswith("error: IoFailure: ")
