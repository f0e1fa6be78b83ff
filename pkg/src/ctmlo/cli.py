"""Command-line entry point: ``ctmlo run | simulate | evaluate``.

Exit codes: 0 success, 2 configuration error, 3 I/O or input-format error,
4 estimation diverged (ATE above the divergence gate).
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .config import config_from_dict, load_config
from .errors import ConfigError, OutOfIntervalError, StreamFormatError
from .evaluate import compute_ate, read_trajectory
from .sim import GroundTruth, record_stream, scenario_from_dict
from .stream import make_records, write_stream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
DIVERGENCE_GATE = 10.0

log = logging.getLogger("ctmlo")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctmlo", description="Continuous-time multi-LiDAR odometry")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run odometry and write trajectory, metrics and figures")
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--out", required=True, type=Path)
    r.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    r.add_argument("--no-sampling", action="store_true", help="register every point")
    r.add_argument("--dump-map", action="store_true", help="export planar voxels")
    r.add_argument("--dense-traj", action="store_true", help="also write 1 kHz poses")
    r.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    s = sub.add_parser("simulate", help="record a simulated scenario to a stream file")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int, default=None)

    e = sub.add_parser("evaluate", help="ATE of a trajectory file against a scenario")
    e.add_argument("--est", required=True, type=Path)
    e.add_argument("--config", required=True, type=Path)
    return p


def _read_yaml(path: Path) -> dict:
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return data


def _scenario_section(data: dict):
    """Scenario from a run config (``scenario`` or ``truth``) or a bare scenario file."""
    for key in ("scenario", "truth"):
        if key in data:
            return scenario_from_dict(data[key])
    if "stream" in data or "run" in data:
        raise ConfigError("config has no 'scenario' or 'truth' section")
    return scenario_from_dict(data)


def cmd_run(args) -> int:
    from .outputs import write_outputs
    from .pipeline import run

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(
            scenario=replace(cfg.scenario, seed=args.seed) if cfg.scenario else None,
            truth=replace(cfg.truth, seed=args.seed) if cfg.truth else None)
    if args.no_sampling:
        cfg = cfg.with_overrides(sampling=replace(cfg.sampling, enabled=False))
    cfg = cfg.with_overrides(dense_traj=args.dense_traj or cfg.dense_traj,
                             dump_map=args.dump_map or cfg.dump_map)

    def progress(i, n):
        if i % 500 == 0 or i == n:
            log.info("frame %d / %d", i, n)

    result = run(cfg, progress=progress)
    paths = write_outputs(result, args.out, dense_traj=cfg.dense_traj, dump_map=cfg.dump_map)
    if cfg.figures and not args.no_figures:
        from .report import render_figures
        for p in render_figures(result, args.out):
            paths[p.stem + "_figure"] = p

    m = result.metrics
    summary = m.summary()
    print("key\tvalue")
    for key in ("ate_rmse", "dense_max_error", "frames_emitted", "frames_dropped",
                "frames_registered", "selected_fraction", "tikhonov_frames"):
        print(f"{key}\t{summary[key]}")
    print(f"efficiency\t{m.efficiency:.4f}")
    for name, path in sorted(paths.items()):
        print(f"file:{name}\t{path}")

    diverged = not np.all(np.isfinite(result.translations))
    if m.ate_rmse is not None and m.ate_rmse > DIVERGENCE_GATE:
        diverged = True
    if diverged:
        log.error("estimation diverged (ATE %s m)", m.ate_rmse)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_simulate(args) -> int:
    data = _read_yaml(args.config)
    scen = _scenario_section(data)
    if args.seed is not None:
        scen = replace(scen, seed=args.seed)
    S, I, P = record_stream(scen)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    n = write_stream(args.out, scen.extrinsics, make_records(S, I, P))
    print(f"records\t{n}")
    print(f"file:stream\t{args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    scen = _scenario_section(_read_yaml(args.config))
    stamps, R, t = read_trajectory(args.est)
    if len(stamps) < 2:
        raise StreamFormatError("trajectory needs at least two poses")
    ate = compute_ate(stamps, R, t, GroundTruth(scen.profile, scen.duration))
    print(f"ate_rmse\t{ate:.9f}")
    print(f"poses\t{len(stamps)}")
    return EXIT_DIVERGED if ate > DIVERGENCE_GATE else EXIT_OK


COMMANDS = {"run": cmd_run, "simulate": cmd_simulate, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StreamFormatError, OutOfIntervalError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
