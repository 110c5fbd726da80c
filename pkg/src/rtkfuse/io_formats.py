"""Line-oriented text formats: observations, odometry, solutions, alignment.

All floats are written with repr (shortest round-trip), so write-then-read
reproduces values bit-exactly. Rotations cross the odometry format as
quaternions; `canonicalize_vio` pushes in-memory poses through the same
quaternion representation so in-memory and file-backed pipelines see
bit-identical rotations.

Formats (all versioned with a leading `# format: v1` line):
  observations:  time_s role sat_id constellation band phase_cycles
                 pseudorange_m sat_x sat_y sat_z elevation_rad snr_dbhz lli
  odometry:      time_s tx ty tz qx qy qz qw [21 upper-triangular covariance
                 entries, rotation-major 6x6]
  solutions:     time_s x y z status ratio nsat sdx sdy sdz
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .align_calib import AlignmentResult
from .frames import Pose
from .fusion import Solution
from .obs_model import EpochObservation, SatelliteObservation, SignalGroup
from .trajectory import VioTrajectory

FORMAT_HEADER = "# format: v1"


class ParseError(ValueError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


def _fmt(x: float) -> str:
    return repr(float(x))


# quaternion helpers (x, y, z, w order, matching the file format)

def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2.0
        q = np.zeros(4)
        q[i] = 0.25 * s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        q[3] = (R[k, j] - R[j, k]) / s
    return q / np.linalg.norm(q)


def matrix_from_quat(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def canonicalize_vio(vio: VioTrajectory) -> VioTrajectory:
    """Round-trip a trajectory through the wire encoding without touching disk.

    The result is bit-identical to read_vio(write_vio(vio)): both run the
    exact same format/parse code, so an in-memory pipeline fed the
    canonicalized trajectory matches a file-backed one exactly.
    """
    return _vio_from_lines(_vio_to_lines(vio), "<memory>")


def write_observations(path, epochs: Sequence[EpochObservation],
                       station_pos: Optional[np.ndarray] = None) -> None:
    lines = [FORMAT_HEADER]
    if station_pos is not None:
        lines.append("# station " + " ".join(_fmt(v) for v in station_pos))
    seen_groups: Dict[Tuple[str, str], float] = {}
    for e in epochs:
        for o in e.observations:
            seen_groups.setdefault(o.group.key, o.group.wavelength)
    for (const, band), lam in sorted(seen_groups.items()):
        lines.append(f"# wavelength {const} {band} {_fmt(lam)}")
    for e in epochs:
        for o in e.observations:
            lines.append(" ".join([
                _fmt(e.time), e.role, str(o.sat_id),
                o.group.constellation, o.group.band,
                _fmt(o.phase_cycles), _fmt(o.pseudorange),
                _fmt(o.sat_pos[0]), _fmt(o.sat_pos[1]), _fmt(o.sat_pos[2]),
                _fmt(o.elevation), _fmt(o.snr), str(int(o.lock_lost)),
            ]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_observations(path) -> Tuple[List[EpochObservation],
                                     Optional[np.ndarray]]:
    """Parse an observation file into time-grouped epochs.

    Rejects duplicate (epoch, satellite, group) rows and non-monotonic time
    with a line-numbered error.
    """
    station = None
    wavelengths: Dict[Tuple[str, str], float] = {}
    groups: Dict[Tuple[str, str], SignalGroup] = {}
    epochs: List[EpochObservation] = []
    cur_time: Optional[float] = None
    cur_role: Optional[str] = None
    cur_obs: List[SatelliteObservation] = []
    cur_keys: set = set()

    def flush():
        nonlocal cur_obs, cur_keys
        if cur_time is not None and cur_obs:
            epochs.append(EpochObservation(time=cur_time, role=cur_role,
                                           observations=tuple(cur_obs)))
        cur_obs = []
        cur_keys = set()

    with open(path) as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts[:1] == ["station"]:
                    try:
                        station = np.array([float(v) for v in parts[1:4]])
                    except (ValueError, IndexError):
                        raise ParseError(path, line_no, "malformed station line")
                elif parts[:1] == ["wavelength"]:
                    try:
                        wavelengths[(parts[1], parts[2])] = float(parts[3])
                    except (ValueError, IndexError):
                        raise ParseError(path, line_no, "malformed wavelength line")
                continue
            fields = line.split()
            if len(fields) != 13:
                raise ParseError(path, line_no,
                                 f"expected 13 fields, got {len(fields)}")
            try:
                t = float(fields[0])
                role = fields[1]
                sat_id = int(fields[2])
                const, band = fields[3], fields[4]
                phase = float(fields[5])
                code = float(fields[6])
                sat_pos = np.array([float(fields[7]), float(fields[8]),
                                    float(fields[9])])
                elev = float(fields[10])
                snr = float(fields[11])
                lli = bool(int(fields[12]))
            except ValueError as e:
                raise ParseError(path, line_no, f"malformed field: {e}")
            key = (const, band)
            if key not in groups:
                if key not in wavelengths:
                    raise ParseError(path, line_no,
                                     f"no wavelength declared for {const} {band}")
                try:
                    groups[key] = SignalGroup(const, band, wavelengths[key])
                except ValueError as e:
                    raise ParseError(path, line_no, str(e))
            if cur_time is None or t != cur_time:
                if cur_time is not None and t < cur_time:
                    raise ParseError(path, line_no,
                                     f"time {t} not increasing (prev {cur_time})")
                flush()
                cur_time, cur_role = t, role
            if (sat_id, key) in cur_keys:
                raise ParseError(path, line_no,
                                 f"duplicate satellite {sat_id} {const} {band}")
            cur_keys.add((sat_id, key))
            try:
                cur_obs.append(SatelliteObservation(
                    sat_id=sat_id, group=groups[key], phase_cycles=phase,
                    pseudorange=code, sat_pos=sat_pos, elevation=elev,
                    snr=snr, lock_lost=lli))
            except ValueError as e:
                raise ParseError(path, line_no, str(e))
    flush()
    return epochs, station


def _vio_to_lines(vio: VioTrajectory) -> List[str]:
    lines = [FORMAT_HEADER]
    for t, p in zip(vio.times, vio.poses):
        q = quat_from_matrix(p.rotation)
        fields = [_fmt(t)] + [_fmt(v) for v in p.translation] \
            + [_fmt(v) for v in q]
        if p.covariance is not None:
            iu = np.triu_indices(6)
            fields += [_fmt(v) for v in p.covariance[iu]]
        lines.append(" ".join(fields))
    return lines


def write_vio(path, vio: VioTrajectory) -> None:
    Path(path).write_text("\n".join(_vio_to_lines(vio)) + "\n")


def read_vio(path) -> VioTrajectory:
    with open(path) as f:
        return _vio_from_lines(f.read().splitlines(), path)


def _vio_from_lines(all_lines: Sequence[str], path) -> VioTrajectory:
    times: List[float] = []
    poses: List[Pose] = []
    for line_no, raw in enumerate(all_lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) not in (8, 29):
            raise ParseError(path, line_no,
                             f"expected 8 or 29 fields, got {len(fields)}")
        try:
            vals = [float(v) for v in fields]
        except ValueError as e:
            raise ParseError(path, line_no, f"malformed field: {e}")
        t = vals[0]
        trans = np.array(vals[1:4])
        q = np.array(vals[4:8])
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) >= 1e-3:
            raise ParseError(path, line_no,
                             f"quaternion norm {norm:.6f} too far from 1")
        if abs(norm - 1.0) > 1e-9:
            q = q / norm  # keep already-canonical quaternions untouched
        cov = None
        if len(vals) == 29:
            cov = np.zeros((6, 6))
            iu = np.triu_indices(6)
            cov[iu] = vals[8:]
            cov = cov + np.triu(cov, 1).T
        if times and t <= times[-1]:
            raise ParseError(path, line_no, f"time {t} not increasing")
        times.append(t)
        try:
            poses.append(Pose(matrix_from_quat(q), trans, covariance=cov))
        except ValueError as e:
            raise ParseError(path, line_no, str(e))
    return VioTrajectory(np.array(times), tuple(poses))


def write_solutions(path, solutions: Sequence[Solution]) -> None:
    lines = [FORMAT_HEADER]
    for s in solutions:
        sd = np.sqrt(np.maximum(np.diag(s.covariance), 0.0))
        ratio = s.ratio if s.ratio is not None and np.isfinite(s.ratio) else 0.0
        lines.append(" ".join([
            _fmt(s.time), _fmt(s.position[0]), _fmt(s.position[1]),
            _fmt(s.position[2]), s.status, _fmt(ratio), str(s.n_sats),
            _fmt(sd[0]), _fmt(sd[1]), _fmt(sd[2]),
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_solutions(path) -> List[Solution]:
    out: List[Solution] = []
    with open(path) as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 10:
                raise ParseError(path, line_no,
                                 f"expected 10 fields, got {len(fields)}")
            try:
                t = float(fields[0])
                pos = np.array([float(v) for v in fields[1:4]])
                status = fields[4]
                ratio = float(fields[5])
                nsat = int(fields[6])
                sd = np.array([float(v) for v in fields[7:10]])
            except ValueError as e:
                raise ParseError(path, line_no, f"malformed field: {e}")
            if status not in ("FIX", "FLOAT", "PROP"):
                raise ParseError(path, line_no, f"unknown status {status!r}")
            out.append(Solution(time=t, position=pos, status=status,
                                covariance=np.diag(sd**2),
                                ratio=ratio if status == "FIX" else None,
                                sats_per_group={("ALL", "ALL"): nsat - 1}))
    return out


def write_positions(path, times: np.ndarray, positions: np.ndarray) -> None:
    """Ground-truth/reference position series: time x y z."""
    lines = [FORMAT_HEADER]
    for t, p in zip(times, positions):
        lines.append(" ".join([_fmt(t), _fmt(p[0]), _fmt(p[1]), _fmt(p[2])]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_positions(path) -> Tuple[np.ndarray, np.ndarray]:
    """Read a position series; accepts both truth and solution files."""
    times: List[float] = []
    positions: List[np.ndarray] = []
    with open(path) as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) not in (4, 10):
                raise ParseError(path, line_no,
                                 f"expected 4 or 10 fields, got {len(fields)}")
            try:
                times.append(float(fields[0]))
                positions.append(np.array([float(v) for v in fields[1:4]]))
            except ValueError as e:
                raise ParseError(path, line_no, f"malformed field: {e}")
    return np.array(times), np.array(positions)


def write_alignment(path, result: AlignmentResult) -> None:
    q = quat_from_matrix(result.t_eo.rotation)
    data = {
        "format": "v1",
        "t_eo_quat_xyzw": [float(v) for v in q],
        "t_eo_translation": [float(v) for v in result.t_eo.translation],
        "t_ia": [float(v) for v in result.t_ia],
        "rmse": float(result.rmse),
        "fer": float(result.fer),
    }
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def read_alignment(path) -> AlignmentResult:
    data = json.loads(Path(path).read_text())
    q = np.array(data["t_eo_quat_xyzw"], dtype=float)
    q = q / np.linalg.norm(q)
    pose = Pose(matrix_from_quat(q), np.array(data["t_eo_translation"]))
    return AlignmentResult(t_eo=pose, t_ia=np.array(data["t_ia"]),
                           rmse=float(data["rmse"]), fer=float(data["fer"]))
