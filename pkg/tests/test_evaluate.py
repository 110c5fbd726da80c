import numpy as np
import pytest

from rtkfuse.evaluate import EmptyEvaluationError, ape_series, evaluate
from rtkfuse.fusion import Solution


def make_solutions(times, positions, statuses):
    return [Solution(time=t, position=np.asarray(p, dtype=float), status=s,
                     covariance=np.eye(3))
            for t, p, s in zip(times, positions, statuses)]


class TestEvaluate:
    def test_constant_offset_statistics(self):
        times = np.arange(5) * 0.2
        truth = np.tile([100.0, 200.0, 300.0], (5, 1))
        est = truth + np.array([0.3, 0.0, 0.4])  # APE 0.5 everywhere
        sols = make_solutions(times, est, ["FIX"] * 5)
        stats = evaluate(sols, times, truth)
        assert stats.rmse == pytest.approx(0.5)
        assert stats.mean == pytest.approx(0.5)
        assert stats.median == pytest.approx(0.5)
        assert stats.std == pytest.approx(0.0, abs=1e-12)
        assert stats.max == pytest.approx(0.5)
        assert stats.fsr == 100.0
        assert stats.epoch_count == 5
        assert stats.fixed_rmse == pytest.approx(0.5)

    def test_fsr_excludes_propagated(self):
        times = np.arange(4) * 0.2
        truth = np.zeros((4, 3))
        sols = make_solutions(times, truth,
                              ["FIX", "FIX", "FLOAT", "PROP"])
        stats = evaluate(sols, times, truth)
        # 2 fixed of 3 attempted; the propagated epoch is not attempted
        assert stats.fsr == pytest.approx(100.0 * 2 / 3)
        assert stats.epoch_count == 4

    def test_fixed_rmse_only_counts_fixed(self):
        times = np.arange(3) * 0.2
        truth = np.zeros((3, 3))
        est = np.array([[0.01, 0, 0], [0.03, 0, 0], [5.0, 0, 0]])
        sols = make_solutions(times, est, ["FIX", "FIX", "FLOAT"])
        stats = evaluate(sols, times, truth)
        assert stats.fixed_rmse == pytest.approx(
            np.sqrt((0.01**2 + 0.03**2) / 2))
        assert stats.rmse > 1.0

    def test_unmatched_epochs_skipped(self):
        truth_times = np.array([0.0, 0.2])
        truth = np.zeros((2, 3))
        sols = make_solutions([0.0, 5.0], np.zeros((2, 3)), ["FIX", "FIX"])
        stats = evaluate(sols, truth_times, truth)
        assert stats.epoch_count == 1

    def test_no_overlap_raises(self):
        sols = make_solutions([10.0], [[0, 0, 0]], ["FIX"])
        with pytest.raises(EmptyEvaluationError):
            evaluate(sols, np.array([0.0]), np.zeros((1, 3)))

    def test_rigid_translation_invariance_of_fsr(self):
        times = np.arange(6) * 0.2
        truth = np.cumsum(np.ones((6, 3)), axis=0)
        est = truth + 0.01
        sols = make_solutions(times, est, ["FIX"] * 3 + ["FLOAT"] * 3)
        s1 = evaluate(sols, times, truth)
        shifted = make_solutions(times, est + 50.0,
                                 ["FIX"] * 3 + ["FLOAT"] * 3)
        s2 = evaluate(shifted, times, truth + 50.0)
        assert s1.fsr == s2.fsr
        assert s1.rmse == pytest.approx(s2.rmse)


class TestApeSeries:
    def test_rows_match_evaluate(self):
        times = np.arange(4) * 0.2
        truth = np.zeros((4, 3))
        est = np.array([[0.1, 0, 0]] * 4)
        sols = make_solutions(times, est, ["FIX", "FLOAT", "PROP", "FIX"])
        rows = ape_series(sols, times, truth)
        assert len(rows) == 4
        assert rows[0] == (0.0, pytest.approx(0.1), "FIX")
        assert rows[2][2] == "PROP"
