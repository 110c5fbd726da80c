import numpy as np
import pytest

from rtkfuse import frames, io_formats, sim
from rtkfuse.frames import Pose
from rtkfuse.fusion import Solution
from rtkfuse.io_formats import (ParseError, canonicalize_vio,
                                matrix_from_quat, quat_from_matrix,
                                read_alignment, read_observations,
                                read_positions, read_solutions, read_vio,
                                write_alignment, write_observations,
                                write_positions, write_solutions, write_vio)


@pytest.fixture(scope="module")
def sim_result():
    return sim.generate(sim.Scenario(seed=3, duration=4.0,
                                     true_t_ia=(0.1, 0.0, 0.05)))


class TestQuaternions:
    def test_round_trip_random_rotations(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            w = rng.standard_normal(3) * 2.0
            R = frames.exp_so3(w)
            q = quat_from_matrix(R)
            assert np.linalg.norm(q) == pytest.approx(1.0, abs=1e-12)
            np.testing.assert_allclose(matrix_from_quat(q), R, atol=1e-12)

    def test_near_pi_branches(self):
        for axis in np.eye(3):
            R = frames.exp_so3(axis * (np.pi - 1e-7))
            q = quat_from_matrix(R)
            np.testing.assert_allclose(matrix_from_quat(q), R, atol=1e-9)


class TestObservations:
    def test_round_trip_bit_exact(self, sim_result, tmp_path):
        path = tmp_path / "user.obs"
        write_observations(path, sim_result.user_epochs)
        epochs, station = read_observations(path)
        assert station is None
        assert len(epochs) == len(sim_result.user_epochs)
        for a, b in zip(sim_result.user_epochs, epochs):
            assert a.time == b.time and a.role == b.role
            for oa, ob in zip(a.observations, b.observations):
                assert oa.phase_cycles == ob.phase_cycles
                assert oa.pseudorange == ob.pseudorange
                assert oa.sat_pos.tolist() == ob.sat_pos.tolist()
                assert oa.elevation == ob.elevation
                assert oa.sat_id == ob.sat_id
                assert oa.lock_lost == ob.lock_lost
                assert oa.group == ob.group

    def test_station_header_round_trip(self, sim_result, tmp_path):
        path = tmp_path / "ref.obs"
        write_observations(path, sim_result.ref_epochs,
                           station_pos=sim_result.station_pos)
        _, station = read_observations(path)
        assert station.tolist() == sim_result.station_pos.tolist()

    def test_missing_wavelength_rejected(self, tmp_path):
        path = tmp_path / "bad.obs"
        path.write_text("# format: v1\n"
                        "0.0 user 1 GPS L1 100.0 2.0e7 "
                        "1e7 1e7 1.5e7 0.5 45.0 0\n")
        with pytest.raises(ParseError, match="bad.obs:2.*wavelength"):
            read_observations(path)

    def test_duplicate_satellite_rejected(self, tmp_path):
        path = tmp_path / "dup.obs"
        row = "0.0 user 1 GPS L1 100.0 2.0e7 1e7 1e7 1.5e7 0.5 45.0 0\n"
        path.write_text("# format: v1\n# wavelength GPS L1 0.19\n" + row + row)
        with pytest.raises(ParseError, match="dup.obs:4.*duplicate"):
            read_observations(path)

    def test_non_monotonic_time_rejected(self, tmp_path):
        path = tmp_path / "time.obs"
        path.write_text(
            "# format: v1\n# wavelength GPS L1 0.19\n"
            "1.0 user 1 GPS L1 100.0 2.0e7 1e7 1e7 1.5e7 0.5 45.0 0\n"
            "0.5 user 2 GPS L1 100.0 2.0e7 1e7 1e7 1.5e7 0.5 45.0 0\n")
        with pytest.raises(ParseError, match="time.obs:4.*not increasing"):
            read_observations(path)

    def test_wrong_field_count_rejected(self, tmp_path):
        path = tmp_path / "short.obs"
        path.write_text("# format: v1\n0.0 user 1 GPS L1\n")
        with pytest.raises(ParseError, match="short.obs:2.*13 fields"):
            read_observations(path)

    def test_garbage_lines_never_crash(self, tmp_path):
        rng = np.random.default_rng(1)
        alphabet = "0123456789.eE+- abcdefgXYZ#\t"
        for k in range(100):
            path = tmp_path / f"fuzz{k}.obs"
            n = rng.integers(1, 6)
            text = "\n".join("".join(rng.choice(list(alphabet),
                                                size=rng.integers(0, 60)))
                             for _ in range(n))
            path.write_text(text + "\n")
            try:
                read_observations(path)
            except ParseError:
                pass  # rejecting with a diagnostic is the contract


class TestVio:
    def test_file_round_trip_equals_canonicalize(self, sim_result, tmp_path):
        """read(write(x)) is bit-identical to the in-memory canonical form,
        so file-backed and in-memory pipelines see the same numbers."""
        path = tmp_path / "vio.txt"
        write_vio(path, sim_result.vio)
        back = read_vio(path)
        canon = canonicalize_vio(sim_result.vio)
        assert back.times.tolist() == list(canon.times)
        for a, b in zip(canon.poses, back.poses):
            assert a.translation.tolist() == b.translation.tolist()
            assert a.rotation.tolist() == b.rotation.tolist()
            assert a.covariance.tolist() == b.covariance.tolist()

    def test_covariance_optional(self, tmp_path):
        path = tmp_path / "vio.txt"
        vio_times = np.array([0.0, 0.1])
        poses = tuple(Pose(np.eye(3), np.array([float(i), 0.0, 0.0]))
                      for i in range(2))
        from rtkfuse.trajectory import VioTrajectory
        write_vio(path, VioTrajectory(vio_times, poses))
        back = read_vio(path)
        assert back.poses[0].covariance is None

    def test_bad_quaternion_norm_rejected(self, tmp_path):
        path = tmp_path / "vio.txt"
        path.write_text("# format: v1\n0.0 1.0 2.0 3.0 0.5 0.5 0.5 0.9\n")
        with pytest.raises(ParseError, match="vio.txt:2.*norm"):
            read_vio(path)

    def test_canonicalize_preserves_poses_closely(self, sim_result):
        c1 = canonicalize_vio(sim_result.vio)
        for a, b in zip(sim_result.vio.poses, c1.poses):
            np.testing.assert_allclose(a.rotation, b.rotation, atol=1e-14)
            assert a.translation.tolist() == b.translation.tolist()


class TestSolutionsAndPositions:
    def test_solutions_round_trip(self, tmp_path):
        path = tmp_path / "sol.txt"
        sols = [
            Solution(time=0.0, position=np.array([1.0, 2.0, 3.0]),
                     status="FIX", covariance=np.diag([1e-4, 4e-4, 9e-4]),
                     ratio=7.5, sats_per_group={("GPS", "L1"): 6}),
            Solution(time=0.2, position=np.array([1.1, 2.1, 3.1]),
                     status="FLOAT", covariance=np.diag([0.01, 0.01, 0.01]),
                     sats_per_group={("GPS", "L1"): 6}),
            Solution(time=0.4, position=np.array([1.2, 2.2, 3.2]),
                     status="PROP", covariance=np.eye(3)),
        ]
        write_solutions(path, sols)
        back = read_solutions(path)
        assert [s.status for s in back] == ["FIX", "FLOAT", "PROP"]
        assert back[0].ratio == 7.5
        assert back[0].n_sats == 7
        np.testing.assert_array_equal(back[1].position, sols[1].position)
        np.testing.assert_allclose(np.diag(back[0].covariance),
                                   [1e-4, 4e-4, 9e-4])

    def test_unknown_status_rejected(self, tmp_path):
        path = tmp_path / "sol.txt"
        path.write_text("# format: v1\n"
                        "0.0 1.0 2.0 3.0 MAYBE 0.0 5 0.1 0.1 0.1\n")
        with pytest.raises(ParseError, match="sol.txt:2.*status"):
            read_solutions(path)

    def test_positions_round_trip(self, tmp_path):
        path = tmp_path / "truth.txt"
        times = np.array([0.0, 0.2, 0.4])
        pos = np.array([[1.0, 2.0, 3.0], [1.1, 2.1, 3.1], [1.2, 2.2, 3.2]])
        write_positions(path, times, pos)
        t2, p2 = read_positions(path)
        assert t2.tolist() == times.tolist()
        assert p2.tolist() == pos.tolist()

    def test_positions_accept_solution_files(self, tmp_path):
        path = tmp_path / "sol.txt"
        write_solutions(path, [Solution(
            time=0.0, position=np.array([1.0, 2.0, 3.0]), status="FIX",
            covariance=np.eye(3), ratio=5.0)])
        t, p = read_positions(path)
        assert p.tolist() == [[1.0, 2.0, 3.0]]


class TestAlignment:
    def test_round_trip(self, tmp_path):
        from rtkfuse.align_calib import AlignmentResult
        path = tmp_path / "align.json"
        t_eo = Pose(frames.exp_so3(np.array([0.1, -0.2, 0.9])),
                    np.array([-2306843.0, -3667044.0, 4709336.0]))
        res = AlignmentResult(t_eo=t_eo, t_ia=np.array([0.1, 0.0, 0.05]),
                              rmse=0.02, fer=0.45)
        write_alignment(path, res)
        back = read_alignment(path)
        np.testing.assert_allclose(back.t_eo.rotation, t_eo.rotation,
                                   atol=1e-12)
        np.testing.assert_allclose(back.t_eo.translation, t_eo.translation)
        np.testing.assert_allclose(back.t_ia, res.t_ia)
        assert back.rmse == 0.02 and back.fer == 0.45
