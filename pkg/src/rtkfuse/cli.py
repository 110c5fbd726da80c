"""Command-line surface: simulate / calibrate / fuse / evaluate."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import io_formats
from .align_calib import (ExcitationError, NoConvergenceError, TrajectoryPair,
                          align_two_pass)
from .evaluate import EmptyEvaluationError, ape_series, evaluate
from .fusion import FilterConfig, InitializationError, run_fusion
from .obs_model import NoiseModel
from .sim import BlockageWindow, NlosWindow, SatelliteSpec, Scenario, generate

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_RUNTIME = 4


def scenario_from_toml(path) -> Scenario:
    with open(path, "rb") as f:
        data = tomllib.load(f)
    kwargs = {}
    simple = {k for k in Scenario.__dataclass_fields__
              if k not in ("noise", "satellites", "blockage", "nlos",
                           "true_t_ia")}
    for key, val in data.items():
        if key in ("noise", "satellites", "blockage", "nlos"):
            continue
        if key == "true_t_ia":
            kwargs["true_t_ia"] = tuple(float(v) for v in val)
        elif key in simple:
            kwargs[key] = val
        else:
            raise ValueError(f"unknown scenario key {key!r}")
    if "noise" in data:
        kwargs["noise"] = NoiseModel(**data["noise"])
    if "satellites" in data:
        kwargs["satellites"] = tuple(
            SatelliteSpec(s["constellation"], s["band"], s["wavelength"],
                          s["count"]) for s in data["satellites"])
    if "blockage" in data:
        kwargs["blockage"] = tuple(
            BlockageWindow(t_start=b["t_start"], t_end=b["t_end"],
                           sat_ids=tuple(b.get("sat_ids", ())),
                           az_range=tuple(b["az_range"]) if "az_range" in b else None,
                           el_range=tuple(b["el_range"]) if "el_range" in b else None)
            for b in data["blockage"])
    if "nlos" in data:
        kwargs["nlos"] = tuple(
            NlosWindow(sat_id=w["sat_id"], t_start=w["t_start"],
                       t_end=w["t_end"],
                       code_bias=w.get("code_bias", 15.0),
                       phase_bias_cycles=w.get("phase_bias_cycles", 0.5))
            for w in data["nlos"])
    return Scenario(**kwargs)


def filter_config_from_toml(path) -> FilterConfig:
    with open(path, "rb") as f:
        data = tomllib.load(f)
    noise = NoiseModel(**data.pop("noise")) if "noise" in data else NoiseModel()
    return FilterConfig(noise=noise, **data)


def _cmd_simulate(args) -> int:
    scenario = scenario_from_toml(args.scenario)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    result = generate(scenario)
    io_formats.write_observations(out / "user.obs", result.user_epochs)
    io_formats.write_observations(out / "reference.obs", result.ref_epochs,
                                  station_pos=result.station_pos)
    io_formats.write_vio(out / "vio.txt", result.vio)
    io_formats.write_positions(out / "truth.txt", result.truth.epoch_times,
                               result.truth.antenna_positions)
    print(f"wrote {len(result.user_epochs)} epochs to {out}")
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    gnss_times, gnss_pos = io_formats.read_positions(args.gnss)
    vio = io_formats.read_vio(args.vio)
    keep = [i for i, t in enumerate(gnss_times) if vio.covers(t)]
    pairs = TrajectoryPair(gnss_times[keep], gnss_pos[keep],
                           tuple(vio.at(t) for t in gnss_times[keep]))
    result = align_two_pass(pairs)
    io_formats.write_alignment(args.output, result)
    print(f"alignment RMSE {result.rmse:.4f} m, FER {result.fer:.4f}, "
          f"lever arm {np.array2string(result.t_ia, precision=4)}")
    return EXIT_OK


def _cmd_fuse(args) -> int:
    user_epochs, user_station = io_formats.read_observations(args.user)
    ref_epochs, ref_station = io_formats.read_observations(args.ref)
    station = ref_station if ref_station is not None else user_station
    if args.station is not None:
        station = np.array(args.station)
    if station is None:
        print("error: no reference station position "
              "(missing '# station' header and --station)", file=sys.stderr)
        return EXIT_USAGE
    vio = io_formats.read_vio(args.vio) if args.vio else None
    config = filter_config_from_toml(args.config) if args.config \
        else FilterConfig()
    if args.baseline_cv:
        from dataclasses import replace
        config = replace(config, baseline_cv=True)
    alignment = io_formats.read_alignment(args.alignment) \
        if args.alignment else None
    solutions, final_alignment, _ = run_fusion(
        user_epochs, ref_epochs, vio, config, station, alignment=alignment)
    io_formats.write_solutions(args.output, solutions)
    n_fix = sum(1 for s in solutions if s.status == "FIX")
    print(f"{len(solutions)} epochs, {n_fix} fixed -> {args.output}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    est = io_formats.read_solutions(args.est)
    truth_times, truth_pos = io_formats.read_positions(args.truth)
    stats = evaluate(est, truth_times, truth_pos)
    print(f"epochs  {stats.epoch_count}")
    print(f"rmse    {stats.rmse:.4f} m")
    print(f"mean    {stats.mean:.4f} m")
    print(f"median  {stats.median:.4f} m")
    print(f"std     {stats.std:.4f} m")
    print(f"max     {stats.max:.4f} m")
    print(f"fsr     {stats.fsr:.1f} %")
    if args.plot_data:
        rows = ape_series(est, truth_times, truth_pos)
        with open(args.plot_data, "w") as f:
            f.write("time_s,ape_m,status\n")
            for t, ape, status in rows:
                f.write(f"{t!r},{ape!r},{status}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rtkfuse",
        description="Carrier-phase positioning with odometry-aided fusion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scenario")
    p.add_argument("scenario", help="scenario TOML file")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("calibrate",
                       help="align odometry to ECEF and calibrate the lever arm")
    p.add_argument("--gnss", required=True, help="GNSS position series file")
    p.add_argument("--vio", required=True, help="odometry trajectory file")
    p.add_argument("-o", "--output", required=True, help="alignment JSON file")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("fuse", help="run the per-epoch fusion filter")
    p.add_argument("--user", required=True, help="user observation file")
    p.add_argument("--ref", required=True, help="reference observation file")
    p.add_argument("--vio", help="odometry trajectory file")
    p.add_argument("--baseline-cv", action="store_true",
                   help="constant-velocity baseline mode (no odometry aiding)")
    p.add_argument("--alignment", help="precomputed alignment JSON file")
    p.add_argument("--config", help="filter configuration TOML")
    p.add_argument("--station", type=float, nargs=3,
                   metavar=("X", "Y", "Z"),
                   help="reference station ECEF position override")
    p.add_argument("-o", "--output", required=True, help="solution file")
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("evaluate", help="compare solutions against a reference")
    p.add_argument("--est", required=True, help="estimated solution file")
    p.add_argument("--truth", required=True, help="reference position file")
    p.add_argument("--plot-data", help="write per-epoch APE CSV")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except io_formats.ParseError as e:
        print(f"parse error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except (ExcitationError, NoConvergenceError, InitializationError,
            EmptyEvaluationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
