import numpy as np
import pytest

from rtkfuse import io_formats
from rtkfuse.cli import main

SCENARIO_TOML = """
seed = 9
duration = 30.0
trajectory_radius = 8.0
noise_scale = 0.0
drift_scale = 0.0
true_t_ia = [0.1, 0.0, 0.05]
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scn = root / "scenario.toml"
    scn.write_text(SCENARIO_TOML)
    assert main(["simulate", str(scn), "-o", str(root / "data")]) == 0
    return root


class TestSimulate:
    def test_outputs_exist(self, workspace):
        data = workspace / "data"
        for name in ("user.obs", "reference.obs", "vio.txt", "truth.txt"):
            assert (data / name).exists()

    def test_reference_carries_station(self, workspace):
        _, station = io_formats.read_observations(
            workspace / "data" / "reference.obs")
        assert station is not None

    def test_bad_toml_exits_usage(self, workspace, capsys):
        bad = workspace / "bad.toml"
        bad.write_text("unknown_key = 5\n")
        assert main(["simulate", str(bad), "-o", str(workspace / "x")]) == 2


class TestCalibrate:
    def test_truth_calibration(self, workspace, capsys):
        data = workspace / "data"
        out = workspace / "align.json"
        rc = main(["calibrate", "--gnss", str(data / "truth.txt"),
                   "--vio", str(data / "vio.txt"), "-o", str(out)])
        assert rc == 0
        res = io_formats.read_alignment(out)
        np.testing.assert_allclose(res.t_ia, [0.1, 0.0, 0.05], atol=1e-6)
        assert res.rmse < 1e-6

    def test_degenerate_motion_exits_runtime(self, tmp_path, capsys):
        scn = tmp_path / "line.toml"
        scn.write_text('seed = 1\nduration = 8.0\ntrajectory = "line"\n'
                       'noise_scale = 0.0\ndrift_scale = 0.0\n')
        assert main(["simulate", str(scn), "-o", str(tmp_path / "d")]) == 0
        rc = main(["calibrate", "--gnss", str(tmp_path / "d" / "truth.txt"),
                   "--vio", str(tmp_path / "d" / "vio.txt"),
                   "-o", str(tmp_path / "a.json")])
        assert rc == 4


class TestFuseAndEvaluate:
    def test_full_pipeline(self, workspace, capsys):
        data = workspace / "data"
        sol = workspace / "solutions.txt"
        rc = main(["fuse", "--user", str(data / "user.obs"),
                   "--ref", str(data / "reference.obs"),
                   "--vio", str(data / "vio.txt"),
                   "--alignment", str(workspace / "align.json"),
                   "-o", str(sol)])
        assert rc == 0
        rc = main(["evaluate", "--est", str(sol),
                   "--truth", str(data / "truth.txt"),
                   "--plot-data", str(workspace / "ape.csv")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "rmse" in out and "fsr" in out
        csv = (workspace / "ape.csv").read_text().splitlines()
        assert csv[0] == "time_s,ape_m,status"
        assert len(csv) > 10

    def test_fuse_baseline_cv(self, workspace):
        data = workspace / "data"
        sol = workspace / "solutions_cv.txt"
        rc = main(["fuse", "--user", str(data / "user.obs"),
                   "--ref", str(data / "reference.obs"),
                   "--baseline-cv", "-o", str(sol)])
        assert rc == 0
        assert any(s.status == "FIX"
                   for s in io_formats.read_solutions(sol))

    def test_fuse_without_station_errors(self, workspace, capsys):
        data = workspace / "data"
        rc = main(["fuse", "--user", str(data / "user.obs"),
                   "--ref", str(data / "user.obs"),
                   "-o", str(workspace / "nope.txt")])
        assert rc == 2

    def test_station_override(self, workspace):
        data = workspace / "data"
        _, station = io_formats.read_observations(data / "reference.obs")
        sol = workspace / "solutions_override.txt"
        rc = main(["fuse", "--user", str(data / "user.obs"),
                   "--ref", str(data / "reference.obs"),
                   "--station", *[str(float(v)) for v in station],
                   "--baseline-cv", "-o", str(sol)])
        assert rc == 0

    def test_parse_error_exit_code(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.obs"
        bad.write_text("# format: v1\nnot a real line\n")
        rc = main(["fuse", "--user", str(bad), "--ref", str(bad),
                   "-o", str(tmp_path / "s.txt")])
        assert rc == 3

    def test_evaluate_disjoint_times_exits_runtime(self, workspace, tmp_path,
                                                   capsys):
        data = workspace / "data"
        sol = workspace / "solutions.txt"
        shifted = tmp_path / "shifted.txt"
        t, p = io_formats.read_positions(data / "truth.txt")
        io_formats.write_positions(shifted, t + 1e6, p)
        rc = main(["evaluate", "--est", str(sol), "--truth", str(shifted)])
        assert rc == 4
