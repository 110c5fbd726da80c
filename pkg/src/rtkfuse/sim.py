"""Deterministic synthetic scenarios: satellites, trajectories, observations,
odometry with drift, and urban-canyon effects (blockage, NLoS bias).

Satellites sit on a 2.0e7 m shell around the local origin with slow angular
motion; double-difference geometry quality is what matters, not ephemerides.
Everything is generated from a single seeded RNG, so a fixed seed yields
bit-identical streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import frames, geodesy
from .frames import Pose
from .obs_model import (EpochObservation, NoiseModel, SatelliteObservation,
                        SignalGroup)
from .trajectory import VioTrajectory

SAT_SHELL_RADIUS = 2.0e7  # meters from the local origin
MIN_ELEVATION = np.radians(10.0)

# common L1/E1 wavelength (c / 1575.42 MHz)
L1_WAVELENGTH = 0.19029367279836487
# L5/E5a wavelength (c / 1176.45 MHz)
L5_WAVELENGTH = 0.25482804879085386


@dataclass(frozen=True)
class SatelliteSpec:
    constellation: str
    band: str
    wavelength: float
    count: int


@dataclass(frozen=True)
class BlockageWindow:
    """Explicit satellite exclusions and/or an az-el mask over a time window."""

    t_start: float
    t_end: float
    sat_ids: Tuple[int, ...] = ()
    az_range: Optional[Tuple[float, float]] = None  # radians, [0, 2pi)
    el_range: Optional[Tuple[float, float]] = None  # radians, [0, pi/2]


@dataclass(frozen=True)
class NlosWindow:
    sat_id: int
    t_start: float
    t_end: float
    code_bias: float = 15.0  # meters
    phase_bias_cycles: float = 0.5


@dataclass
class Scenario:
    seed: int = 1
    duration: float = 60.0
    rate: float = 5.0  # GNSS epochs per second
    vio_rate: float = 10.0

    origin_lat: float = 47.6
    origin_lon: float = -122.2
    origin_height: float = 50.0
    baseline: float = 2.0e4  # reference station offset, meters east

    trajectory: str = "circle"  # circle | line
    speed: float = 1.5  # m/s
    trajectory_radius: float = 25.0
    vertical_amplitude: float = 2.0
    tilt_amplitude: float = 0.15  # radians of roll/pitch wiggle

    satellites: Tuple[SatelliteSpec, ...] = (
        SatelliteSpec("GPS", "L1", L1_WAVELENGTH, 10),
    )
    sat_drift_rate: float = np.radians(0.005)  # rad/s azimuth drift

    noise: NoiseModel = field(default_factory=NoiseModel)
    noise_scale: float = 1.0  # 0 disables all measurement noise

    blockage: Tuple[BlockageWindow, ...] = ()
    nlos: Tuple[NlosWindow, ...] = ()

    vio_drift_rate: float = 0.005  # translation drift, fraction of distance
    vio_rot_drift_rate: float = 2e-4  # rad of rotation drift per meter
    vio_cross_corr: float = 0.9
    vio_cov_floor: float = 1e-10
    drift_scale: float = 1.0  # 0 disables odometry drift

    t_eo_yaw: float = 0.7  # radians, odometry yaw relative to ENU
    true_t_ia: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.rate <= 0 or self.vio_rate <= 0 or self.duration <= 0:
            raise ValueError("rates and duration must be positive")
        for w in self.blockage:
            if w.az_range is not None and not (0 <= w.az_range[0] < 2 * np.pi):
                raise ValueError("azimuth mask outside [0, 2pi)")
            if w.el_range is not None and not (0 <= w.el_range[0] <= np.pi / 2):
                raise ValueError("elevation mask outside [0, pi/2]")

    @property
    def origin_ecef(self) -> np.ndarray:
        return geodesy.geodetic_to_ecef(self.origin_lat, self.origin_lon,
                                        self.origin_height)

    @property
    def enu(self) -> np.ndarray:
        return geodesy.enu_rotation(self.origin_lat, self.origin_lon)

    def true_t_eo(self) -> Pose:
        R = self.enu @ frames.exp_so3(np.array([0.0, 0.0, self.t_eo_yaw]))
        return Pose(R, self.origin_ecef)


@dataclass
class GroundTruth:
    epoch_times: np.ndarray
    antenna_positions: np.ndarray  # (n, 3) ECEF
    vio_true: VioTrajectory  # drift-free odometry poses at epoch times
    t_eo: Pose
    t_ia: np.ndarray
    # integer ambiguities per epoch: dict[(const, band, sat)] -> int
    user_ambiguities: List[Dict[Tuple[str, str, int], int]]
    ref_ambiguities: Dict[Tuple[str, str, int], int]
    visible: List[Tuple[int, ...]]  # user-visible satellite ids per epoch
    nlos_active: List[Tuple[int, ...]]  # satellite ids with NLoS bias per epoch

    def dd_ambiguity(self, epoch_idx: int, const: str, band: str,
                     ref_sat: int, sat: int) -> int:
        """True DD integer for satellite `sat` against `ref_sat`."""
        nu = self.user_ambiguities[epoch_idx]
        nr = self.ref_ambiguities
        k1 = (const, band, ref_sat)
        ks = (const, band, sat)
        return (nu[k1] - nr[k1]) - (nu[ks] - nr[ks])


@dataclass
class SimResult:
    scenario: Scenario
    user_epochs: List[EpochObservation]
    ref_epochs: List[EpochObservation]
    vio: VioTrajectory
    truth: GroundTruth
    station_pos: np.ndarray


def _trajectory_pose(scn: Scenario, t: float) -> Pose:
    """True IMU pose in the odometry frame at time t."""
    if scn.trajectory == "line":
        pos = np.array([scn.speed * t, 0.0, 0.0])
        yaw = 0.0
    else:  # circle
        omega = scn.speed / scn.trajectory_radius
        theta = omega * t
        pos = np.array([
            scn.trajectory_radius * np.cos(theta),
            scn.trajectory_radius * np.sin(theta),
            scn.vertical_amplitude * np.sin(0.5 * theta),
        ])
        yaw = theta + np.pi / 2.0
    roll = scn.tilt_amplitude * np.sin(0.3 * t)
    pitch = scn.tilt_amplitude * np.cos(0.23 * t)
    R = (frames.exp_so3(np.array([0.0, 0.0, yaw]))
         @ frames.exp_so3(np.array([0.0, pitch, 0.0]))
         @ frames.exp_so3(np.array([roll, 0.0, 0.0])))
    return Pose(R, pos)


def _satellite_directions(scn: Scenario) -> List[Tuple[int, SignalGroup, float, float]]:
    """Static sky layout: (sat_id, group, azimuth0, elevation) per satellite."""
    layout = []
    sat_id = 1
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for spec in scn.satellites:
        group = SignalGroup(spec.constellation, spec.band, spec.wavelength)
        for k in range(spec.count):
            az = (golden * (k + sat_id)) % (2.0 * np.pi)
            el = np.radians(20.0 + 55.0 * ((k * 7 + 3) % spec.count) / max(spec.count - 1, 1))
            layout.append((sat_id, group, az, el))
            sat_id += 1
    return layout


def _sat_position(scn: Scenario, az0: float, el: float, t: float) -> np.ndarray:
    az = az0 + scn.sat_drift_rate * t
    d_enu = np.array([np.sin(az) * np.cos(el),
                      np.cos(az) * np.cos(el),
                      np.sin(el)])
    return scn.origin_ecef + scn.enu @ (SAT_SHELL_RADIUS * d_enu)


def _az_el_from(receiver: np.ndarray, sat_pos: np.ndarray,
                enu: np.ndarray) -> Tuple[float, float]:
    d = sat_pos - receiver
    e, n, u = enu.T @ d
    az = np.arctan2(e, n) % (2.0 * np.pi)
    el = np.arcsin(np.clip(u / np.linalg.norm(d), -1.0, 1.0))
    return float(az), float(el)


def blockage_series(scn: Scenario, t: float, user_pos: np.ndarray,
                    sat_layout: Optional[Sequence] = None) -> Tuple[int, ...]:
    """Satellite ids visible to the user at time t after masks and exclusions."""
    layout = sat_layout if sat_layout is not None else _satellite_directions(scn)
    visible = []
    for sat_id, _group, az0, el0 in layout:
        sp = _sat_position(scn, az0, el0, t)
        az, el = _az_el_from(user_pos, sp, scn.enu)
        if el < MIN_ELEVATION:
            continue
        blocked = False
        for w in scn.blockage:
            if not (w.t_start <= t <= w.t_end):
                continue
            if sat_id in w.sat_ids:
                blocked = True
                break
            if w.az_range is not None or w.el_range is not None:
                az_ok = w.az_range is None or (w.az_range[0] <= az <= w.az_range[1])
                el_ok = w.el_range is None or (w.el_range[0] <= el <= w.el_range[1])
                if az_ok and el_ok:
                    blocked = True
                    break
        if not blocked:
            visible.append(sat_id)
    return tuple(visible)


def generate(scn: Scenario) -> SimResult:
    """Generate matched observation, odometry, and ground-truth streams."""
    rng = np.random.default_rng(scn.seed)
    layout = _satellite_directions(scn)
    t_eo = scn.true_t_eo()
    t_ia = np.asarray(scn.true_t_ia, dtype=float)
    station_pos = scn.origin_ecef + scn.enu @ np.array([scn.baseline, 0.0, 0.0])

    n_epochs = int(round(scn.duration * scn.rate)) + 1
    epoch_times = np.arange(n_epochs) / scn.rate

    # receiver-satellite integer ambiguities; user integers re-drawn on
    # visibility gaps (cycle slip on reacquisition)
    ref_amb: Dict[Tuple[str, str, int], int] = {}
    user_amb: Dict[Tuple[str, str, int], int] = {}
    for sat_id, group, _, _ in layout:
        key = (group.constellation, group.band, sat_id)
        ref_amb[key] = int(rng.integers(-1000, 1000))
        user_amb[key] = int(rng.integers(-1000, 1000))

    user_epochs: List[EpochObservation] = []
    ref_epochs: List[EpochObservation] = []
    truth_pos = np.zeros((n_epochs, 3))
    truth_user_amb: List[Dict[Tuple[str, str, int], int]] = []
    truth_visible: List[Tuple[int, ...]] = []
    truth_nlos: List[Tuple[int, ...]] = []
    vio_true_epoch_poses: List[Pose] = []
    prev_visible: set = set(sid for sid, *_ in layout)

    def measure(receiver_pos: np.ndarray, sat_pos: np.ndarray, group: SignalGroup,
                amb: int, elevation: float, code_bias: float,
                phase_bias_cycles: float) -> Tuple[float, float]:
        rng_m = float(np.linalg.norm(receiver_pos - sat_pos))
        pn = scn.noise_scale * np.sqrt(scn.noise.phase_var(elevation)) \
            * rng.standard_normal()
        cn = scn.noise_scale * np.sqrt(scn.noise.code_var(elevation)) \
            * rng.standard_normal()
        phase = rng_m / group.wavelength + amb + phase_bias_cycles \
            + pn / group.wavelength
        code = rng_m + code_bias + cn
        return phase, code

    for i, t in enumerate(epoch_times):
        pose_oi = _trajectory_pose(scn, t)
        vio_true_epoch_poses.append(pose_oi)
        antenna = t_eo.transform(pose_oi.rotation @ t_ia + pose_oi.translation)
        truth_pos[i] = antenna

        visible = blockage_series(scn, t, antenna, layout)
        nlos_now = tuple(sorted(w.sat_id for w in scn.nlos
                                if w.t_start <= t <= w.t_end and w.sat_id in visible))
        truth_visible.append(visible)
        truth_nlos.append(nlos_now)

        user_obs: List[SatelliteObservation] = []
        ref_obs: List[SatelliteObservation] = []
        for sat_id, group, az0, el0 in layout:
            key = (group.constellation, group.band, sat_id)
            sp = _sat_position(scn, az0, el0, t)
            # reference station: always unobstructed, independent noise
            _, el_r = _az_el_from(station_pos, sp, scn.enu)
            phase_r, code_r = measure(station_pos, sp, group, ref_amb[key],
                                      max(el_r, MIN_ELEVATION), 0.0, 0.0)
            ref_obs.append(SatelliteObservation(
                sat_id=sat_id, group=group, phase_cycles=phase_r,
                pseudorange=code_r, sat_pos=sp, elevation=max(el_r, 0.0)))
            if sat_id not in visible:
                continue
            lli = sat_id not in prev_visible
            if lli:
                user_amb[key] = int(rng.integers(-1000, 1000))
            _, el_u = _az_el_from(antenna, sp, scn.enu)
            cb, pb = 0.0, 0.0
            if sat_id in nlos_now:
                w = next(w for w in scn.nlos
                         if w.sat_id == sat_id and w.t_start <= t <= w.t_end)
                cb, pb = w.code_bias, w.phase_bias_cycles
            phase_u, code_u = measure(antenna, sp, group, user_amb[key],
                                      max(el_u, MIN_ELEVATION), cb, pb)
            user_obs.append(SatelliteObservation(
                sat_id=sat_id, group=group, phase_cycles=phase_u,
                pseudorange=code_u, sat_pos=sp, elevation=max(el_u, 0.0),
                lock_lost=lli))
        prev_visible = set(visible)
        truth_user_amb.append(dict(user_amb))
        user_epochs.append(EpochObservation(time=t, role="user",
                                            observations=tuple(user_obs)))
        ref_epochs.append(EpochObservation(time=t, role="reference",
                                           observations=tuple(ref_obs)))

    vio = _generate_vio(scn, rng)
    truth = GroundTruth(
        epoch_times=epoch_times,
        antenna_positions=truth_pos,
        vio_true=VioTrajectory(epoch_times, tuple(vio_true_epoch_poses)),
        t_eo=t_eo,
        t_ia=t_ia,
        user_ambiguities=truth_user_amb,
        ref_ambiguities=ref_amb,
        visible=truth_visible,
        nlos_active=truth_nlos,
    )
    return SimResult(scenario=scn, user_epochs=user_epochs, ref_epochs=ref_epochs,
                     vio=vio, truth=truth, station_pos=station_pos)


def _generate_vio(scn: Scenario, rng: np.random.Generator) -> VioTrajectory:
    """Odometry stream: truth composed with a random-walk tangent error.

    The error state follows eps_{k+1} = rho * eps_k + w_k with w_k chosen so
    that the marginal covariance grows exactly by the per-step drift increment
    while consecutive poses keep cross-covariance rho * Sigma_k, matching the
    joint covariance the filter reconstructs.
    """
    n = int(round(scn.duration * scn.vio_rate)) + 1
    times = np.arange(n) / scn.vio_rate
    rho = scn.vio_cross_corr
    sigma = scn.vio_cov_floor * np.eye(6)
    eps = np.zeros(6)
    poses: List[Pose] = []
    prev_pos = _trajectory_pose(scn, times[0]).translation
    for t in times:
        true_pose = _trajectory_pose(scn, t)
        ds = float(np.linalg.norm(true_pose.translation - prev_pos))
        prev_pos = true_pose.translation
        if scn.drift_scale > 0.0 and ds > 0.0:
            q_rot = (scn.drift_scale * scn.vio_rot_drift_rate * ds) ** 2
            q_tr = (scn.drift_scale * scn.vio_drift_rate * ds) ** 2
            q_step = np.diag([q_rot] * 3 + [q_tr] * 3)
            q_w = (1.0 - rho * rho) * sigma + q_step
            eps = rho * eps + np.linalg.cholesky(
                q_w + 1e-18 * np.eye(6)) @ rng.standard_normal(6)
            sigma = sigma + q_step
        reported = frames.compose(frames.exp(eps), true_pose)
        poses.append(Pose(reported.rotation, reported.translation,
                          covariance=0.5 * (sigma + sigma.T)))
    return VioTrajectory(times, tuple(poses))
