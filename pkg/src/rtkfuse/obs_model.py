"""GNSS observation bookkeeping and the double-difference measurement model.

Carrier phase is stored in cycles on raw observations and converted to meters
when double differences are formed, so everything downstream of DD formation
works in meters. A double difference for satellite s against reference
satellite 1 is (reference single-difference) minus (satellite-s
single-difference):

    DD(s) = (x_u^(1) - x_r^(1)) - (x_u^(s) - x_r^(s))
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .frames import validate_ecef

EPOCH_MATCH_TOL = 0.02  # seconds; 10% of a 5 Hz epoch


class NoCommonSatelliteError(ValueError):
    """A signal group has no satellite seen by both receivers."""


class EpochMismatchError(ValueError):
    """User and reference epochs differ by more than the matching tolerance."""


@dataclass(frozen=True)
class SignalGroup:
    """One (constellation, band) signal group sharing a carrier wavelength."""

    constellation: str
    band: str
    wavelength: float

    def __post_init__(self):
        if not (0.05 < self.wavelength < 0.5):
            raise ValueError(f"implausible carrier wavelength {self.wavelength} m")

    @property
    def key(self) -> Tuple[str, str]:
        return (self.constellation, self.band)


@dataclass(frozen=True)
class SatelliteObservation:
    sat_id: int
    group: SignalGroup
    phase_cycles: float
    pseudorange: float
    sat_pos: np.ndarray  # ECEF at transmit time, precomputed upstream
    elevation: float  # radians, user-side geometry
    snr: float = 45.0  # dB-Hz
    lock_lost: bool = False

    def __post_init__(self):
        object.__setattr__(self, "sat_pos", np.asarray(self.sat_pos, dtype=float))

    def validate(self) -> None:
        if not (1.5e7 < self.pseudorange < 3e7):
            raise ValueError(f"sat {self.sat_id}: pseudorange {self.pseudorange:.3e} "
                             "outside (1.5e7, 3e7) m")
        if not (0.0 <= self.elevation <= np.pi / 2):
            raise ValueError(f"sat {self.sat_id}: elevation {self.elevation} "
                             "outside [0, pi/2]")
        validate_ecef(self.sat_pos)


@dataclass(frozen=True)
class EpochObservation:
    """All satellite signals seen by one receiver at one epoch."""

    time: float  # continuous GPS-time seconds
    role: str  # "user" or "reference"
    observations: Tuple[SatelliteObservation, ...]

    def __post_init__(self):
        obs = tuple(self.observations)
        keys = [(o.sat_id, o.group.key) for o in obs]
        if len(keys) != len(set(keys)):
            raise ValueError(f"duplicate (satellite, group) at t={self.time}")
        if self.role not in ("user", "reference"):
            raise ValueError(f"unknown receiver role {self.role!r}")
        object.__setattr__(self, "observations", obs)

    def by_group(self) -> Dict[Tuple[str, str], List[SatelliteObservation]]:
        out: Dict[Tuple[str, str], List[SatelliteObservation]] = {}
        for o in self.observations:
            out.setdefault(o.group.key, []).append(o)
        return out


@dataclass(frozen=True)
class NoiseModel:
    """Elevation-dependent sigma model: var = base^2 + elev^2 / sin^2(el)."""

    phase_base: float = 0.003
    phase_elev: float = 0.003
    code_base: float = 0.3
    code_elev: float = 0.3

    def __post_init__(self):
        for v in (self.phase_base, self.phase_elev, self.code_base, self.code_elev):
            if v <= 0:
                raise ValueError("noise sigmas must be positive")

    def phase_var(self, elevation: float) -> float:
        s = max(np.sin(elevation), 1e-3)
        return self.phase_base**2 + self.phase_elev**2 / s**2

    def code_var(self, elevation: float) -> float:
        s = max(np.sin(elevation), 1e-3)
        return self.code_base**2 + self.code_elev**2 / s**2


@dataclass
class DdGroup:
    """Double differences and geometry for one signal group.

    Keeps the per-satellite single differences (user minus reference) so a
    different reference satellite can be chosen without going back to the raw
    epochs.
    """

    group: SignalGroup
    ref_sat: int
    sat_ids: List[int]  # non-reference satellites, DD row order
    dd_phase: np.ndarray  # meters, len == len(sat_ids)
    dd_code: np.ndarray  # meters
    phase_cov: np.ndarray
    code_cov: np.ndarray
    ref_sat_pos: np.ndarray
    sat_pos: np.ndarray  # (len(sat_ids), 3)
    # single differences over all common satellites, for reference re-selection
    common_ids: List[int] = field(default_factory=list)
    sd_phase_m: Optional[np.ndarray] = None  # meters (cycles * wavelength)
    sd_code: Optional[np.ndarray] = None
    elevations: Optional[np.ndarray] = None
    all_sat_pos: Optional[np.ndarray] = None
    lock_lost: Optional[np.ndarray] = None

    @property
    def n_dd(self) -> int:
        return len(self.sat_ids)

    def drop_satellites(self, sat_ids: Sequence[int]) -> "DdGroup":
        """Remove non-reference satellites (their DD rows and covariance)."""
        keep = [i for i, s in enumerate(self.sat_ids) if s not in set(sat_ids)]
        return replace(
            self,
            sat_ids=[self.sat_ids[i] for i in keep],
            dd_phase=self.dd_phase[keep],
            dd_code=self.dd_code[keep],
            phase_cov=self.phase_cov[np.ix_(keep, keep)],
            code_cov=self.code_cov[np.ix_(keep, keep)],
            sat_pos=self.sat_pos[keep],
        )


@dataclass
class DoubleDifferenceSet:
    time: float
    groups: List[DdGroup]

    @property
    def n_rows(self) -> int:
        return 2 * sum(g.n_dd for g in self.groups)


def select_reference_satellite(group_obs: Sequence[SatelliteObservation]) -> int:
    """Highest user-side elevation wins; ties broken by lowest satellite id."""
    if not group_obs:
        raise NoCommonSatelliteError("no common satellite in group")
    return min(group_obs, key=lambda o: (-o.elevation, o.sat_id)).sat_id


def _dd_cov(variances: np.ndarray, ref_idx: int, other_idx: np.ndarray) -> np.ndarray:
    """B Sigma B^T for DD rows sharing one reference satellite.

    variances holds per-satellite single-difference variances (user variance
    plus reference-receiver variance). Off-diagonals equal the shared
    reference satellite's variance.
    """
    n = len(other_idx)
    cov = np.full((n, n), variances[ref_idx])
    cov[np.diag_indices(n)] += variances[other_idx]
    return cov


def form_double_differences(user: EpochObservation,
                            reference: EpochObservation,
                            noise: NoiseModel,
                            ref_sat_override: Optional[Dict[Tuple[str, str], int]] = None,
                            ) -> DoubleDifferenceSet:
    """Form per-group double differences over satellites common to both receivers.

    Groups with fewer than two common satellites are dropped. Raw noise is
    modeled as independent per measurement with elevation-dependent variance;
    the DD covariance is the exact congruence B Sigma B^T.
    """
    if abs(user.time - reference.time) > EPOCH_MATCH_TOL:
        raise EpochMismatchError(
            f"user epoch {user.time} vs reference epoch {reference.time}")

    ref_by_key = {(o.sat_id, o.group.key): o for o in reference.observations}
    groups: List[DdGroup] = []
    for key, user_obs in sorted(user.by_group().items()):
        common = [(u, ref_by_key[(u.sat_id, key)]) for u in user_obs
                  if (u.sat_id, key) in ref_by_key]
        if len(common) < 2:
            continue
        common.sort(key=lambda pair: pair[0].sat_id)
        group = common[0][0].group
        lam = group.wavelength

        ids = [u.sat_id for u, _ in common]
        if ref_sat_override and key in ref_sat_override and \
                ref_sat_override[key] in ids:
            ref_sat = ref_sat_override[key]
        else:
            ref_sat = select_reference_satellite([u for u, _ in common])
        ref_idx = ids.index(ref_sat)
        other_idx = np.array([i for i in range(len(ids)) if i != ref_idx], dtype=int)

        sd_phase = np.array([lam * (u.phase_cycles - r.phase_cycles)
                             for u, r in common])
        sd_code = np.array([u.pseudorange - r.pseudorange for u, r in common])
        dd_phase = sd_phase[ref_idx] - sd_phase[other_idx]
        dd_code = sd_code[ref_idx] - sd_code[other_idx]

        # user and reference raw noises are independent; the reference
        # receiver sees essentially the same elevations over a short baseline
        user_el = np.array([u.elevation for u, _ in common])
        ref_el = np.array([r.elevation for _, r in common])
        phase_var = np.array([noise.phase_var(eu) + noise.phase_var(er)
                              for eu, er in zip(user_el, ref_el)])
        code_var = np.array([noise.code_var(eu) + noise.code_var(er)
                             for eu, er in zip(user_el, ref_el)])

        all_pos = np.array([u.sat_pos for u, _ in common])
        groups.append(DdGroup(
            group=group,
            ref_sat=ref_sat,
            sat_ids=[ids[i] for i in other_idx],
            dd_phase=dd_phase,
            dd_code=dd_code,
            phase_cov=_dd_cov(phase_var, ref_idx, other_idx),
            code_cov=_dd_cov(code_var, ref_idx, other_idx),
            ref_sat_pos=all_pos[ref_idx],
            sat_pos=all_pos[other_idx],
            common_ids=ids,
            sd_phase_m=sd_phase,
            sd_code=sd_code,
            elevations=user_el,
            all_sat_pos=all_pos,
            lock_lost=np.array([u.lock_lost or r.lock_lost for u, r in common]),
        ))
    return DoubleDifferenceSet(time=user.time, groups=groups)


def reselect_reference(dd_group: DdGroup, exclude: Sequence[int] = ()) -> DdGroup:
    """Re-form a group's DDs around the next-best reference satellite."""
    if dd_group.sd_phase_m is None:
        raise ValueError("group lacks single-difference data for re-selection")
    ids = dd_group.common_ids
    candidates = [(el, sid) for sid, el in zip(ids, dd_group.elevations)
                  if sid != dd_group.ref_sat and sid not in set(exclude)]
    if not candidates:
        raise NoCommonSatelliteError("no alternative reference satellite")
    new_ref = min(candidates, key=lambda c: (-c[0], c[1]))[1]
    # rebuild via the stored single differences
    ref_idx = ids.index(new_ref)
    other_idx = np.array([i for i in range(len(ids)) if i != ref_idx], dtype=int)
    # variances are encoded in the existing covariances; recompute from the
    # diagonal structure: diag = var_ref + var_s, offdiag = var_ref
    return replace(
        dd_group,
        ref_sat=new_ref,
        sat_ids=[ids[i] for i in other_idx],
        dd_phase=dd_group.sd_phase_m[ref_idx] - dd_group.sd_phase_m[other_idx],
        dd_code=dd_group.sd_code[ref_idx] - dd_group.sd_code[other_idx],
        phase_cov=_cov_for_reference(dd_group, "phase", ref_idx, other_idx),
        code_cov=_cov_for_reference(dd_group, "code", ref_idx, other_idx),
        ref_sat_pos=dd_group.all_sat_pos[ref_idx],
        sat_pos=dd_group.all_sat_pos[other_idx],
    )


def _cov_for_reference(dd_group: DdGroup, kind: str,
                       ref_idx: int, other_idx: np.ndarray) -> np.ndarray:
    """Recover per-satellite variances from DD covariance and re-difference."""
    cov = dd_group.phase_cov if kind == "phase" else dd_group.code_cov
    old_ids = dd_group.sat_ids
    ids = dd_group.common_ids
    n_old = len(old_ids)
    variances = np.zeros(len(ids))
    old_ref_idx = ids.index(dd_group.ref_sat)
    if n_old >= 2:
        var_ref = cov[0, 1]
    else:
        # single DD row: split evenly (information is not recoverable)
        var_ref = cov[0, 0] / 2.0
    variances[old_ref_idx] = var_ref
    for r, sid in enumerate(old_ids):
        variances[ids.index(sid)] = cov[r, r] - var_ref
    return _dd_cov(variances, ref_idx, other_idx)


def h_phi(user_pos: np.ndarray, ambiguity_cycles: float,
          sat_ref_pos: np.ndarray, sat_s_pos: np.ndarray,
          station_pos: np.ndarray, wavelength: float) -> float:
    """Predicted DD carrier phase in meters, including the ambiguity term."""
    return h_rho(user_pos, sat_ref_pos, sat_s_pos, station_pos) \
        + wavelength * ambiguity_cycles


def h_rho(user_pos: np.ndarray, sat_ref_pos: np.ndarray,
          sat_s_pos: np.ndarray, station_pos: np.ndarray) -> float:
    """Predicted DD geometric range in meters."""
    user_pos = np.asarray(user_pos, dtype=float)
    station_pos = np.asarray(station_pos, dtype=float)
    r_u1 = np.linalg.norm(user_pos - sat_ref_pos)
    r_r1 = np.linalg.norm(station_pos - sat_ref_pos)
    r_us = np.linalg.norm(user_pos - sat_s_pos)
    r_rs = np.linalg.norm(station_pos - sat_s_pos)
    return (r_u1 - r_r1) - (r_us - r_rs)


def dd_position_row(user_pos: np.ndarray, sat_ref_pos: np.ndarray,
                    sat_s_pos: np.ndarray) -> np.ndarray:
    """Gradient of a DD range w.r.t. the user position.

    Equals e1 - es, with ek the unit vector pointing from satellite k to the
    user (verified against finite differences of h_rho in tests).
    """
    d1 = user_pos - sat_ref_pos
    ds = user_pos - sat_s_pos
    return d1 / np.linalg.norm(d1) - ds / np.linalg.norm(ds)


def measurement_jacobian(user_pos: np.ndarray, dd: DoubleDifferenceSet,
                         station_pos: np.ndarray,
                         amb_index: Dict[Tuple[str, str, int], int],
                         n_amb: int) -> np.ndarray:
    """Stacked H for [all phase rows; all code rows] over [position; ambiguities].

    amb_index maps (constellation, band, satellite) to the ambiguity column
    offset (0-based within the ambiguity block).
    """
    n_phase = sum(g.n_dd for g in dd.groups)
    H = np.zeros((2 * n_phase, 3 + n_amb))
    row = 0
    for g in dd.groups:
        for i, sid in enumerate(g.sat_ids):
            H[row, :3] = dd_position_row(user_pos, g.ref_sat_pos, g.sat_pos[i])
            col = amb_index[(g.group.constellation, g.group.band, sid)]
            H[row, 3 + col] = g.group.wavelength
            row += 1
    for g in dd.groups:
        for i, sid in enumerate(g.sat_ids):
            H[row, :3] = dd_position_row(user_pos, g.ref_sat_pos, g.sat_pos[i])
            row += 1
    return H
