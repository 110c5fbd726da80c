"""Evaluation metrics: absolute position error statistics and fix rate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .fusion import Solution

MATCH_TOL = 0.02  # seconds


class EmptyEvaluationError(ValueError):
    """No time-matched epochs between the estimate and the reference."""


@dataclass(frozen=True)
class SolutionStats:
    rmse: float
    mean: float
    median: float
    std: float
    max: float
    fsr: float  # fixed solution rate, percent
    epoch_count: int
    fixed_rmse: Optional[float] = None  # APE RMSE over fixed epochs only


def evaluate(solutions: Sequence[Solution], truth_times: np.ndarray,
             truth_positions: np.ndarray,
             match_tol: float = MATCH_TOL) -> SolutionStats:
    """APE statistics over time-matched epochs.

    FSR counts fixed epochs against epochs with any GNSS solution attempt;
    propagated epochs are excluded from the denominator.
    """
    truth_times = np.asarray(truth_times, dtype=float)
    errors: List[float] = []
    fixed_errors: List[float] = []
    n_fix = n_attempt = 0
    for s in solutions:
        i = int(np.argmin(np.abs(truth_times - s.time)))
        if abs(truth_times[i] - s.time) > match_tol:
            continue
        err = float(np.linalg.norm(s.position - truth_positions[i]))
        errors.append(err)
        if s.status == "FIX":
            n_fix += 1
            fixed_errors.append(err)
        if s.status in ("FIX", "FLOAT"):
            n_attempt += 1
    if not errors:
        raise EmptyEvaluationError("no time-matched epochs to evaluate")
    e = np.array(errors)
    fsr = 100.0 * n_fix / n_attempt if n_attempt else 0.0
    return SolutionStats(
        rmse=float(np.sqrt(np.mean(e**2))),
        mean=float(np.mean(e)),
        median=float(np.median(e)),
        std=float(np.std(e)),
        max=float(np.max(e)),
        fsr=fsr,
        epoch_count=len(e),
        fixed_rmse=float(np.sqrt(np.mean(np.square(fixed_errors))))
        if fixed_errors else None,
    )


def ape_series(solutions: Sequence[Solution], truth_times: np.ndarray,
               truth_positions: np.ndarray,
               match_tol: float = MATCH_TOL) -> List[Tuple[float, float, str]]:
    """Per-epoch (time, APE, status) rows for external plotting."""
    truth_times = np.asarray(truth_times, dtype=float)
    rows = []
    for s in solutions:
        i = int(np.argmin(np.abs(truth_times - s.time)))
        if abs(truth_times[i] - s.time) > match_tol:
            continue
        rows.append((s.time,
                     float(np.linalg.norm(s.position - truth_positions[i])),
                     s.status))
    return rows
