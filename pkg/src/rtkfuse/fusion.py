"""Per-epoch EKF fusing double-differenced GNSS with odometry increments.

Epoch routine: predict the position from the odometry increment (or a
constant-velocity random walk in baseline mode), gate innovations against a
multiple of the incremental motion, run the float measurement update, resolve
integers with the lattice search plus ratio test (with one residual-driven
satellite re-pruning retry), and fall back Fixed -> Float -> Propagated.

Fixed integers are report-only: they feed the output solution and the next
epoch's position, never the stored float ambiguity states.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import chi2

from . import ambiguity as amb_mod
from . import obs_model
from .align_calib import (AlignmentResult, ExcitationError, NoConvergenceError,
                          TrajectoryPair, align_two_pass, excitation_sufficient,
                          realign_policy)
from .frames import Pose, incremental_translation_jacobians
from .obs_model import (DoubleDifferenceSet, EpochObservation, NoiseModel,
                        form_double_differences, h_phi, h_rho,
                        measurement_jacobian, reselect_reference)
from .trajectory import VioTrajectory, joint_pose_covariance

AmbKey = Tuple[str, str, int]  # (constellation, band, satellite)


class InitializationError(RuntimeError):
    """Alignment gates never passed within the initialization horizon."""


@dataclass(frozen=True)
class FilterConfig:
    noise: NoiseModel = field(default_factory=NoiseModel)
    gate_mult: float = 5.0
    gate_floor: float = 0.05  # meters; keeps a usable gate when stationary
    code_gate_mult: Optional[float] = None  # defaults to gate_mult
    ratio_threshold: float = 3.0
    max_reprune_rounds: int = 1
    new_amb_sigma: float = 30.0  # cycles
    chi2_significance: float = 0.001
    min_dd_rows: int = 4
    cv_sigma: float = 1.0  # m/s, constant-velocity random walk
    baseline_cv: bool = False
    vio_cross_corr: float = 0.9
    node_cap: int = 1_000_000
    init_pos_sigma: float = 100.0  # meters
    min_align_samples: int = 10
    realign_window: float = 30.0  # seconds
    fer_threshold: float = 0.97
    align_accept_rmse: float = 0.1  # meters; reject looser initial alignments
    max_prop_streak: int = 20  # VIO-mode PROP epochs before dropping alignment

    def __post_init__(self):
        if min(self.gate_mult, self.gate_floor, self.ratio_threshold,
               self.new_amb_sigma, self.cv_sigma) <= 0:
            raise ValueError("filter config values must be positive")


@dataclass
class VioIncrement:
    translation: np.ndarray  # odometry-frame incremental translation, meters
    covariance: np.ndarray  # 3x3


@dataclass
class FilterState:
    position: np.ndarray  # ECEF, meters
    amb_keys: List[AmbKey]
    group_refs: Dict[Tuple[str, str], int]
    x: np.ndarray  # [position; ambiguities (cycles)]
    cov: np.ndarray

    @property
    def n_amb(self) -> int:
        return len(self.amb_keys)

    def copy(self) -> "FilterState":
        return FilterState(self.x[:3].copy(), list(self.amb_keys),
                           dict(self.group_refs), self.x.copy(), self.cov.copy())

    def amb_index(self) -> Dict[AmbKey, int]:
        return {k: i for i, k in enumerate(self.amb_keys)}


def make_state(position: np.ndarray, pos_sigma: float) -> FilterState:
    x = np.asarray(position, dtype=float).copy()
    return FilterState(position=x, amb_keys=[], group_refs={}, x=x.copy(),
                       cov=pos_sigma**2 * np.eye(3))


@dataclass
class Solution:
    time: float
    position: np.ndarray
    status: str  # FIX | FLOAT | PROP
    covariance: np.ndarray  # 3x3 position covariance
    ratio: Optional[float] = None
    sats_per_group: Dict[Tuple[str, str], int] = field(default_factory=dict)
    cv_fallback: bool = False  # odometry bracket missing, CV prediction used
    fixed_ambiguities: Optional[Dict[AmbKey, int]] = None  # FIX epochs only
    reference_sats: Dict[Tuple[str, str], int] = field(default_factory=dict)

    @property
    def n_sats(self) -> int:
        # DD satellites plus one reference per group
        return sum(n + 1 for n in self.sats_per_group.values())


def vio_increment(pose_i: Pose, pose_j: Pose,
                  joint_cov: np.ndarray) -> VioIncrement:
    """Incremental translation and its covariance from two odometry poses."""
    joint_cov = np.asarray(joint_cov, dtype=float)
    J_i, J_j = incremental_translation_jacobians(pose_i, pose_j)
    J = np.hstack([J_i, J_j])  # 3x12
    cov = J @ joint_cov @ J.T
    return VioIncrement(translation=pose_j.translation - pose_i.translation,
                        covariance=0.5 * (cov + cov.T))


def predict(state: FilterState, vio: VioIncrement, r_eo: np.ndarray) -> FilterState:
    """Advance the position by the rotated odometry increment.

    Ambiguity states, their covariance, and the position-ambiguity cross
    terms are untouched: ambiguities are constants between slips.
    """
    out = state.copy()
    out.x[:3] = out.x[:3] + r_eo @ vio.translation
    out.position = out.x[:3]
    out.cov[:3, :3] = out.cov[:3, :3] + r_eo @ vio.covariance @ r_eo.T
    out.cov = 0.5 * (out.cov + out.cov.T)
    return out


def predict_constant_velocity(state: FilterState, dt: float,
                              sigma_v: float) -> FilterState:
    """Position random walk: the baseline prediction model."""
    out = state.copy()
    out.cov[:3, :3] = out.cov[:3, :3] + (sigma_v * dt) ** 2 * np.eye(3)
    return out


def manage_ambiguities(state: FilterState, dd: DoubleDifferenceSet,
                       config: FilterConfig) -> FilterState:
    """Reconcile ambiguity bookkeeping with this epoch's DD set.

    Handles reference-satellite remapping (exact linear identity
    d^(1',s) = d^(1,s) - d^(1,1')), drops vanished or slipped entries, and
    initializes new entries from code-minus-carrier.
    """
    seen_groups = {(g.group.constellation, g.group.band) for g in dd.groups}

    # pass 1: reference switches via an exact linear transform of the state
    for g in dd.groups:
        gkey = (g.group.constellation, g.group.band)
        old_ref = state.group_refs.get(gkey)
        if old_ref is None or old_ref == g.ref_sat:
            continue
        state = _remap_reference(state, gkey, old_ref, g.ref_sat)

    # pass 2: decide which entries survive
    keep: List[int] = []
    lock_lost_groups = set()
    live: Dict[AmbKey, Tuple[int, int]] = {}  # key -> (group idx, sat row)
    for gi, g in enumerate(dd.groups):
        gkey = (g.group.constellation, g.group.band)
        if g.lock_lost is not None:
            ref_pos = g.common_ids.index(g.ref_sat)
            if g.lock_lost[ref_pos]:
                lock_lost_groups.add(gkey)
        for si, sid in enumerate(g.sat_ids):
            live[(gkey[0], gkey[1], sid)] = (gi, si)
    for i, key in enumerate(state.amb_keys):
        gkey = (key[0], key[1])
        if gkey not in seen_groups or gkey in lock_lost_groups:
            continue
        if key not in live:
            continue
        gi, si = live[key]
        g = dd.groups[gi]
        if g.lock_lost is not None and g.lock_lost[g.common_ids.index(key[2])]:
            continue  # slip: reset this entry
        keep.append(i)

    idx = np.concatenate([np.arange(3), 3 + np.array(keep, dtype=int)]) \
        if keep else np.arange(3)
    new_keys = [state.amb_keys[i] for i in keep]
    x = state.x[idx]
    cov = state.cov[np.ix_(idx, idx)]

    # pass 3: new entries from code-minus-carrier
    new_vals: List[float] = []
    existing = set(new_keys)
    for g in dd.groups:
        gkey = (g.group.constellation, g.group.band)
        for si, sid in enumerate(g.sat_ids):
            key = (gkey[0], gkey[1], sid)
            if key in existing:
                continue
            new_keys.append(key)
            new_vals.append((g.dd_phase[si] - g.dd_code[si]) / g.group.wavelength)
    if new_vals:
        n_old = len(x)
        n_new = len(new_vals)
        x = np.concatenate([x, np.array(new_vals)])
        grown = np.zeros((n_old + n_new, n_old + n_new))
        grown[:n_old, :n_old] = cov
        grown[n_old:, n_old:] = config.new_amb_sigma**2 * np.eye(n_new)
        cov = grown

    group_refs = {(g.group.constellation, g.group.band): g.ref_sat
                  for g in dd.groups}
    return FilterState(position=x[:3], amb_keys=new_keys,
                       group_refs=group_refs, x=x, cov=cov)


def _remap_reference(state: FilterState, gkey: Tuple[str, str],
                     old_ref: int, new_ref: int) -> FilterState:
    """Linear reference switch; resets the group if the pivot entry is absent."""
    index = state.amb_index()
    pivot = (gkey[0], gkey[1], new_ref)
    if pivot not in index:
        # cannot remap: drop the whole group, entries re-initialize later
        keep = [i for i, k in enumerate(state.amb_keys)
                if (k[0], k[1]) != gkey]
        idx = np.concatenate([np.arange(3), 3 + np.array(keep, dtype=int)]) \
            if keep else np.arange(3)
        return FilterState(position=state.x[:3].copy(),
                           amb_keys=[state.amb_keys[i] for i in keep],
                           group_refs=dict(state.group_refs),
                           x=state.x[idx], cov=state.cov[np.ix_(idx, idx)])
    n = 3 + state.n_amb
    p = index[pivot]
    A_rows: List[np.ndarray] = []
    new_keys: List[AmbKey] = []
    for i, key in enumerate(state.amb_keys):
        row = np.zeros(n)
        if (key[0], key[1]) != gkey:
            row[3 + i] = 1.0
            new_keys.append(key)
        elif key[2] == new_ref:
            # the former reference becomes a regular satellite:
            # d^(new, old) = -d^(old, new)
            row[3 + p] = -1.0
            new_keys.append((gkey[0], gkey[1], old_ref))
        else:
            row[3 + i] = 1.0
            row[3 + p] = -1.0
            new_keys.append(key)
        A_rows.append(row)
    A = np.vstack([np.hstack([np.eye(3), np.zeros((3, state.n_amb))])]
                  + A_rows) if A_rows else np.eye(3)
    x = A @ state.x
    cov = A @ state.cov @ A.T
    refs = dict(state.group_refs)
    refs[gkey] = new_ref
    return FilterState(position=x[:3], amb_keys=new_keys, group_refs=refs,
                       x=x, cov=0.5 * (cov + cov.T))


def _predicted_rows(state: FilterState, dd: DoubleDifferenceSet,
                    station_pos: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(z, h) stacked as [all phase rows; all code rows]."""
    index = state.amb_index()
    z_phase, h_phase, z_code, h_code = [], [], [], []
    for g in dd.groups:
        gkey = (g.group.constellation, g.group.band)
        for si, sid in enumerate(g.sat_ids):
            d = state.x[3 + index[(gkey[0], gkey[1], sid)]]
            z_phase.append(g.dd_phase[si])
            h_phase.append(h_phi(state.x[:3], d, g.ref_sat_pos, g.sat_pos[si],
                                 station_pos, g.group.wavelength))
    for g in dd.groups:
        for si, sid in enumerate(g.sat_ids):
            z_code.append(g.dd_code[si])
            h_code.append(h_rho(state.x[:3], g.ref_sat_pos, g.sat_pos[si],
                                station_pos))
    return (np.array(z_phase + z_code), np.array(h_phase + h_code))


def prune_by_innovation(state: FilterState, dd: DoubleDifferenceSet,
                        motion: float, config: FilterConfig,
                        station_pos: np.ndarray) -> DoubleDifferenceSet:
    """Drop DD satellites whose innovation exceeds the motion gate.

    The gate is gate_mult * max(|incremental motion|, floor) plus a
    statistical slack term from the predicted row variance. If a majority of
    a group's satellites fail, the group's reference satellite is suspected
    instead: the reference is re-selected and the group re-differenced once.
    A satellite failing on either its phase or its code row is removed
    entirely from the group.
    """
    phase_gate = config.gate_mult * max(motion, config.gate_floor)
    code_gate = (config.code_gate_mult or config.gate_mult) \
        * max(motion, config.gate_floor)
    index = state.amb_index()
    new_groups = []
    for g in dd.groups:
        g = _prune_group(state, g, index, phase_gate, code_gate,
                         station_pos, allow_reselect=True)
        if g is not None and g.n_dd > 0:
            new_groups.append(g)
    return DoubleDifferenceSet(time=dd.time, groups=new_groups)


def _prune_group(state, g, index, phase_gate, code_gate, station_pos,
                 allow_reselect: bool,
                 d_override: Optional[Dict[int, Tuple[float, float]]] = None):
    gkey = (g.group.constellation, g.group.band)
    lam = g.group.wavelength
    bad: List[int] = []
    P3 = state.cov[:3, :3]
    for si, sid in enumerate(g.sat_ids):
        key = (gkey[0], gkey[1], sid)
        amb_i = index.get(key)
        var_d = 0.0
        cross_d = 0.0
        if d_override is not None and sid in d_override:
            d, var_d = d_override[sid]
        elif amb_i is not None:
            d = state.x[3 + amb_i]
            var_d = state.cov[3 + amb_i, 3 + amb_i]
        else:
            d = (g.dd_phase[si] - g.dd_code[si]) / lam
        vp = g.dd_phase[si] - h_phi(state.x[:3], d, g.ref_sat_pos, g.sat_pos[si],
                                    station_pos, lam)
        vc = g.dd_code[si] - h_rho(state.x[:3], g.ref_sat_pos, g.sat_pos[si],
                                   station_pos)
        # statistical slack: the motion gate alone would cut everything while
        # the state is still uncertain (cold start, fresh ambiguities)
        a = obs_model.dd_position_row(state.x[:3], g.ref_sat_pos, g.sat_pos[si])
        if d_override is None and amb_i is not None:
            cross_d = float(a @ state.cov[:3, 3 + amb_i])
        var_pos = float(a @ P3 @ a)
        var_p = var_pos + g.phase_cov[si, si] + lam**2 * var_d \
            + 2.0 * lam * cross_d
        var_c = var_pos + g.code_cov[si, si]
        slack_p = np.sqrt(max(var_p, 0.0))
        slack_c = np.sqrt(max(var_c, 0.0))
        fails = 0
        if abs(vp) > phase_gate + 5.0 * slack_p:
            fails += 1
        if abs(vc) > code_gate + 5.0 * slack_c:
            fails += 1
        if fails:
            bad.append(sid)
    # a majority of satellites failing points at the reference itself (a
    # biased reference contaminates every row of the group)
    if allow_reselect and g.n_dd > 0 and 2 * len(bad) > g.n_dd:
        try:
            g2 = reselect_reference(g)
        except (obs_model.NoCommonSatelliteError, ValueError):
            g2 = None  # no alternative reference or no SD data kept
        if g2 is not None:
            # stored ambiguities are relative to the old reference; express
            # them against the new one (d'(s) = d(s) - d(new_ref)) so the
            # re-prune judges real innovations, not the reference offset
            overrides: Dict[int, Tuple[float, float]] = {}
            nr_key = (gkey[0], gkey[1], g2.ref_sat)
            nr_i = index.get(nr_key)
            if nr_i is not None:
                d_nr = state.x[3 + nr_i]
                v_nr = state.cov[3 + nr_i, 3 + nr_i]
                for sid in g2.sat_ids:
                    if sid == g.ref_sat:
                        overrides[sid] = (-d_nr, v_nr)
                        continue
                    a_i = index.get((gkey[0], gkey[1], sid))
                    if a_i is not None:
                        overrides[sid] = (
                            state.x[3 + a_i] - d_nr,
                            state.cov[3 + a_i, 3 + a_i] + v_nr
                            - 2.0 * state.cov[3 + a_i, 3 + nr_i])
            return _prune_group(state, g2, index, phase_gate, code_gate,
                                station_pos, allow_reselect=False,
                                d_override=overrides)
    if len(bad) == g.n_dd:
        return None
    return g.drop_satellites(bad) if bad else g


def measurement_update(state: FilterState, dd: DoubleDifferenceSet,
                       station_pos: np.ndarray,
                       config: FilterConfig) -> Tuple[FilterState, bool]:
    """EKF update against the pruned DD set; returns (posterior, valid).

    Validity is a chi-square test on the normalized post-fit residuals at the
    configured significance plus a minimum DD row count.
    """
    z, h = _predicted_rows(state, dd, station_pos)
    m = len(z)
    if m == 0:
        return state, False
    index = state.amb_index()
    H = measurement_jacobian(state.x[:3], dd, station_pos, index, state.n_amb)
    from scipy.linalg import block_diag
    R = block_diag(*([g.phase_cov for g in dd.groups]
                     + [g.code_cov for g in dd.groups]))
    v = z - h
    P = state.cov
    S = H @ P @ H.T + R
    K = np.linalg.solve(S, H @ P).T
    x = state.x + K @ v
    IKH = np.eye(len(x)) - K @ H
    cov = IKH @ P @ IKH.T + K @ R @ K.T
    posterior = FilterState(position=x[:3], amb_keys=list(state.amb_keys),
                            group_refs=dict(state.group_refs), x=x,
                            cov=0.5 * (cov + cov.T))
    # post-fit residuals r = v - H dx have covariance R - H P_post H^T
    r = v - H @ (x - state.x)
    Sigma_r = R - H @ posterior.cov @ H.T
    Sigma_r = 0.5 * (Sigma_r + Sigma_r.T) + 1e-12 * np.eye(m)
    try:
        stat = float(r @ np.linalg.solve(Sigma_r, r))
    except np.linalg.LinAlgError:
        stat = float(r @ np.linalg.lstsq(Sigma_r, r, rcond=None)[0])
    valid = (m >= config.min_dd_rows and stat >= 0.0
             and stat <= chi2.ppf(1.0 - config.chi2_significance, df=m))
    return posterior, valid


def resolve_and_validate(
        float_state: FilterState, dd: DoubleDifferenceSet,
        config: FilterConfig,
) -> Tuple[str, np.ndarray, np.ndarray, Optional[float],
           Optional[Dict[AmbKey, int]]]:
    """Integer resolution with ratio validation and residual-driven re-pruning.

    Returns (status, position, position covariance, ratio, fixed integers).
    The float state itself is never modified: fixed integers condition only
    the reported position.
    """
    index = float_state.amb_index()
    cand: List[int] = []
    for g in dd.groups:
        gkey = (g.group.constellation, g.group.band)
        for sid in g.sat_ids:
            cand.append(index[(gkey[0], gkey[1], sid)])
    cand = sorted(set(cand))

    P = float_state.cov
    pos = float_state.x[:3]
    pos_cov = P[:3, :3]
    rounds = 0
    while cand:
        cols = 3 + np.array(cand, dtype=int)
        d_hat = float_state.x[cols]
        W = P[np.ix_(cols, cols)]
        try:
            problem = amb_mod.IlsProblem(d_hat, W)
            sol = amb_mod.search(problem, node_cap=config.node_cap)
        except (amb_mod.SearchOverflowError, amb_mod.DecompositionError):
            break
        if amb_mod.ratio_test(sol, config.ratio_threshold):
            delta = sol.best - d_hat
            P_pd = P[:3, cols]
            gain = P_pd @ np.linalg.inv(W)
            fixed_pos = pos + gain @ delta
            fixed_cov = pos_cov - gain @ P_pd.T
            fixed = {float_state.amb_keys[c]: int(sol.best[k])
                     for k, c in enumerate(cand)}
            return ("FIX", fixed_pos, 0.5 * (fixed_cov + fixed_cov.T),
                    sol.ratio, fixed)
        if rounds >= config.max_reprune_rounds or len(cand) <= 1:
            break
        rounds += 1
        # the rounding misfit of a biased ambiguity spreads over correlated
        # neighbors, so raw residual size can point at an innocent satellite;
        # drop the candidate whose removal most improves the integer fit
        best_k, best_ratio = None, -np.inf
        for k in range(len(cand)):
            keep = [c for i, c in enumerate(cand) if i != k]
            kcols = 3 + np.array(keep, dtype=int)
            try:
                ksol = amb_mod.search(
                    amb_mod.IlsProblem(float_state.x[kcols],
                                       P[np.ix_(kcols, kcols)]),
                    node_cap=config.node_cap)
            except (amb_mod.SearchOverflowError, amb_mod.DecompositionError):
                continue
            if ksol.ratio > best_ratio:
                best_k, best_ratio = k, ksol.ratio
        if best_k is None:
            break
        cand.pop(best_k)
    return "FLOAT", pos.copy(), pos_cov.copy(), None, None


def code_only_position(dd: DoubleDifferenceSet, station_pos: np.ndarray,
                       initial: Optional[np.ndarray] = None,
                       iters: int = 12) -> np.ndarray:
    """Gauss-Newton DD-pseudorange fix used to seed the filter position."""
    pos = np.asarray(initial if initial is not None else station_pos,
                     dtype=float).copy()
    for _ in range(iters):
        rows, res = [], []
        for g in dd.groups:
            for si in range(g.n_dd):
                rows.append(obs_model.dd_position_row(pos, g.ref_sat_pos,
                                                      g.sat_pos[si]))
                res.append(g.dd_code[si] - h_rho(pos, g.ref_sat_pos,
                                                 g.sat_pos[si], station_pos))
        A = np.array(rows)
        b = np.array(res)
        if len(b) < 3:
            break
        step, *_ = np.linalg.lstsq(A, b, rcond=None)
        pos += step
        if np.linalg.norm(step) < 1e-10:
            break
    return pos


@dataclass
class _AlignSample:
    time: float
    position: np.ndarray
    vio_pose: Pose
    fixed: bool


class FusionFilter:
    """Sequential per-epoch filter; owns the state and the alignment."""

    def __init__(self, config: FilterConfig, station_pos: np.ndarray,
                 alignment: Optional[AlignmentResult] = None):
        self.config = config
        self.station_pos = np.asarray(station_pos, dtype=float)
        self.alignment = alignment
        self.state: Optional[FilterState] = None
        self.last_time: Optional[float] = None
        self.covariance_history: List[np.ndarray] = []

    def run_epoch(self, user: EpochObservation, ref: EpochObservation,
                  vio_pair: Optional[Tuple[Pose, Pose, np.ndarray]]) -> Solution:
        """One pass of the per-epoch routine; commits the float state."""
        cfg = self.config
        ref_override = self.state.group_refs if self.state else None
        dd = form_double_differences(user, ref, cfg.noise,
                                     ref_sat_override=ref_override)
        t = user.time

        if self.state is None:
            return self._first_epoch(t, dd)

        dt = t - self.last_time if self.last_time is not None else 1.0 / 5.0
        cv_fallback = False
        use_vio = (not cfg.baseline_cv and self.alignment is not None
                   and vio_pair is not None)
        if use_vio:
            pose_i, pose_j, joint_cov = vio_pair
            inc = vio_increment(pose_i, pose_j, joint_cov)
            prior = predict(self.state, inc, self.alignment.t_eo.rotation)
            motion = float(np.linalg.norm(inc.translation))
        else:
            prior = predict_constant_velocity(self.state, dt, cfg.cv_sigma)
            motion = cfg.cv_sigma * dt
            cv_fallback = not cfg.baseline_cv and self.alignment is not None

        self.last_time = t
        if not dd.groups:
            self._commit(prior)
            return self._solution(t, prior, "PROP", dd, cv_fallback)

        prior = manage_ambiguities(prior, dd, cfg)
        pruned = prune_by_innovation(prior, dd, motion, cfg, self.station_pos)
        if pruned.n_rows == 0:
            self._commit(prior)
            return self._solution(t, prior, "PROP", pruned, cv_fallback)
        # pruning can drop satellites or switch a group's reference;
        # reconcile the ambiguity bookkeeping with the surviving rows
        prior = manage_ambiguities(prior, pruned, cfg)

        posterior, valid = measurement_update(prior, pruned, self.station_pos,
                                              cfg)
        if not valid:
            self._commit(prior)
            return self._solution(t, prior, "PROP", pruned, cv_fallback)

        status, pos, pos_cov, ratio, fixed = resolve_and_validate(
            posterior, pruned, cfg)
        self._commit(posterior)
        sol = self._solution(t, posterior, status, pruned, cv_fallback)
        sol.position = pos
        sol.covariance = pos_cov
        sol.ratio = ratio
        sol.fixed_ambiguities = fixed
        return sol

    def _first_epoch(self, t: float, dd: DoubleDifferenceSet) -> Solution:
        cfg = self.config
        pos = code_only_position(dd, self.station_pos) if dd.groups \
            else self.station_pos.copy()
        state = make_state(pos, cfg.init_pos_sigma)
        self.last_time = t
        if not dd.groups:
            self._commit(state)
            return self._solution(t, state, "PROP", dd, False)
        state = manage_ambiguities(state, dd, cfg)
        posterior, valid = measurement_update(state, dd, self.station_pos, cfg)
        if not valid:
            self._commit(state)
            return self._solution(t, state, "PROP", dd, False)
        status, spos, scov, ratio, fixed = resolve_and_validate(posterior, dd,
                                                                cfg)
        self._commit(posterior)
        sol = self._solution(t, posterior, status, dd, False)
        sol.position = spos
        sol.covariance = scov
        sol.ratio = ratio
        sol.fixed_ambiguities = fixed
        return sol

    def _commit(self, state: FilterState) -> None:
        state.cov = 0.5 * (state.cov + state.cov.T)
        self.state = state
        self.covariance_history.append(state.cov.copy())

    def _solution(self, t: float, state: FilterState, status: str,
                  dd: DoubleDifferenceSet, cv_fallback: bool) -> Solution:
        sats = {(g.group.constellation, g.group.band): g.n_dd for g in dd.groups}
        refs = {(g.group.constellation, g.group.band): g.ref_sat
                for g in dd.groups}
        return Solution(time=t, position=state.x[:3].copy(), status=status,
                        covariance=state.cov[:3, :3].copy(),
                        sats_per_group=sats, cv_fallback=cv_fallback,
                        reference_sats=refs)


def run_fusion(user_epochs: Sequence[EpochObservation],
               ref_epochs: Sequence[EpochObservation],
               vio: Optional[VioTrajectory],
               config: FilterConfig,
               station_pos: np.ndarray,
               alignment: Optional[AlignmentResult] = None,
               require_alignment: bool = False,
               ) -> Tuple[List[Solution], Optional[AlignmentResult],
                          FusionFilter]:
    """Drive the filter over matched epoch streams.

    Without a supplied alignment (and outside baseline mode), the filter warm
    starts in constant-velocity mode, collects fixed/float solutions matched
    with interpolated odometry poses, and switches to odometry-aided
    prediction once the excitation and alignment gates pass. The alignment is
    then re-evaluated every epoch over a trailing window with the lever arm
    held fixed.
    """
    ref_by_time = {round(e.time / obs_model.EPOCH_MATCH_TOL): e
                   for e in ref_epochs}

    def match_ref(t: float) -> Optional[EpochObservation]:
        for k in (round(t / obs_model.EPOCH_MATCH_TOL),):
            for kk in (k - 1, k, k + 1):
                e = ref_by_time.get(kk)
                if e is not None and abs(e.time - t) <= obs_model.EPOCH_MATCH_TOL:
                    return e
        return None

    filt = FusionFilter(config, station_pos, alignment=alignment)
    solutions: List[Solution] = []
    samples: deque[_AlignSample] = deque()
    use_vio_mode = not config.baseline_cv
    prop_streak = 0

    for user in user_epochs:
        ref = match_ref(user.time)
        if ref is None:
            continue
        vio_pair = None
        if (use_vio_mode and filt.alignment is not None and vio is not None
                and filt.last_time is not None
                and vio.covers(user.time) and vio.covers(filt.last_time)):
            pose_i = vio.at(filt.last_time)
            pose_j = vio.at(user.time)
            joint = joint_pose_covariance(pose_i, pose_j,
                                          config.vio_cross_corr)
            vio_pair = (pose_i, pose_j, joint)
        sol = filt.run_epoch(user, ref, vio_pair)
        solutions.append(sol)

        if not use_vio_mode or vio is None:
            continue

        # divergence recovery: a long run of propagation-only epochs in
        # odometry-aided mode means the alignment is no longer trustworthy
        if vio_pair is not None and sol.status == "PROP":
            prop_streak += 1
            if prop_streak >= config.max_prop_streak:
                filt.alignment = None
                filt.state = None  # cold restart from a code-only position
                samples.clear()
                prop_streak = 0
        else:
            prop_streak = 0

        # maintain the trailing alignment window from fixed/float solutions
        if sol.status in ("FIX", "FLOAT") and vio.covers(sol.time):
            samples.append(_AlignSample(sol.time, sol.position,
                                        vio.at(sol.time), sol.status == "FIX"))
        while samples and sol.time - samples[0].time > config.realign_window:
            samples.popleft()

        window = _window_pairs(samples, config.min_align_samples)
        if window is None:
            continue
        if filt.alignment is None:
            try:
                cand_align = align_two_pass(
                    window, fer_threshold=config.fer_threshold)
                # a loose fit means the window positions themselves are bad
                # (float-quality); wait for a trustworthy window
                if cand_align.rmse < config.align_accept_rmse:
                    filt.alignment = cand_align
            except (ExcitationError, NoConvergenceError, ValueError):
                pass
        else:
            filt.alignment = realign_policy(
                filt.alignment, window, fer_threshold=config.fer_threshold)

    if require_alignment and use_vio_mode and filt.alignment is None:
        raise InitializationError("alignment gates never passed over the stream")
    return solutions, filt.alignment, filt


def _window_pairs(samples: Sequence[_AlignSample],
                  min_samples: int) -> Optional[TrajectoryPair]:
    """Fixed-solution samples, falling back to all float-or-better."""
    fixed = [s for s in samples if s.fixed]
    chosen = fixed if len(fixed) >= min_samples else list(samples)
    if len(chosen) < max(min_samples, 3):
        return None
    times = np.array([s.time for s in chosen])
    if np.any(np.diff(times) <= 0):
        return None
    return TrajectoryPair(times,
                          np.array([s.position for s in chosen]),
                          tuple(s.vio_pose for s in chosen))
