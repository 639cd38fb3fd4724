"""Command-line experiments: ``nedispatch <command> --config run.json``.

Commands write their results to ``--out`` (default: current directory):

``gen``       ``riders.csv`` and ``drivers.csv`` from the synthetic scenario
``simulate``  ``simulate.json``, ``instances.csv`` and ``rides.csv``
``sweep``     ``sweep.csv`` with one row per grid cell
``fluid``     ``fluid.json``
``fixpoint``  ``fixpoint.json`` and ``fixpoint.csv``

The config is a single JSON object. Recognised top-level keys are listed in
``TOP_LEVEL_KEYS``; anything else is rejected.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .core import DEFAULT_TYPE_MIX, MarketParams, NotificationProfile, ValidationError, load_trace, sample_scenario, write_trace
from .fixpoint import FixpointConfig, find_equilibrium, frozen_graph_score, self_consistency
from .fluid import (
    absorption_metrics,
    aggregate_residual,
    build_generator,
    coupling_residual,
    equilibrium,
    flow_residual,
    solve_flow_linear,
)
from .packing import PACKERS, PackingConfig
from .sim import METRICS, SimConfig, SyntheticSource, run_monte_carlo, write_rides_csv
from .valuation import Protocol

__all__ = ["ConfigError", "RunConfig", "load_config", "main", "parse_config"]

TOP_LEVEL_KEYS = (
    "params",
    "sim",
    "packing",
    "fixpoint",
    "scenario",
    "packer",
    "protocol",
    "n_instances",
    "seed",
    "grid",
    "q",
)
GRID_KEYS = ("packer", "protocol", "k", "cap_u", "theta")
_SIM_MANAGED = {"protocol", "seed", "packing"}
_FIXPOINT_EXTRA = {"q_init", "stub_q", "frozen_samples", "self_check"}


class ConfigError(ValidationError):
    """The run configuration is malformed."""


@dataclass
class RunConfig:
    params: MarketParams
    sim: SimConfig
    packing: PackingConfig
    fixpoint: FixpointConfig
    scenario: dict
    packer: str
    protocol: Protocol
    n_instances: int
    seed: int
    grid: dict = field(default_factory=dict)
    q: tuple[float, ...] | None = None
    q_init: tuple[float, ...] | None = None
    stub_q: tuple[float, ...] | None = None
    frozen_samples: int = 200
    self_check: bool = False
    base_dir: Path = Path(".")


def _known(section: str, data, allowed) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    return dict(data)


def _names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _build(cls, section: str, data: dict):
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"section {section!r}: {exc}") from None


def _scenario(data) -> dict:
    data = _known("scenario", data, {"synthetic", "trace"})
    if len(data) != 1:
        raise ConfigError("scenario needs exactly one of 'synthetic' or 'trace'")
    if "synthetic" in data:
        opts = _known("scenario.synthetic", data["synthetic"], _names(SyntheticSource))
        if "type_mix" in opts:
            opts["type_mix"] = {float(k): float(v) for k, v in opts["type_mix"].items()}
        return {"synthetic": opts}
    opts = _known("scenario.trace", data["trace"], {"riders", "drivers", "radius"})
    if "riders" not in opts or "drivers" not in opts:
        raise ConfigError("scenario.trace needs 'riders' and 'drivers' paths")
    return {"trace": opts}


def _profile(section: str, values) -> tuple[float, ...]:
    try:
        return NotificationProfile(tuple(float(x) for x in values)).q
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def parse_config(doc: dict, *, seed: int | None = None, base_dir: Path | str = ".") -> RunConfig:
    """Validate a config document; ``seed`` overrides the document's seed."""
    doc = _known("config", doc, TOP_LEVEL_KEYS)
    run_seed = int(doc.get("seed", 0) if seed is None else seed)
    params = _build(MarketParams, "params", _known("params", doc.get("params", {}), _names(MarketParams)))
    packing = _build(PackingConfig, "packing", _known("packing", doc.get("packing", {}), _names(PackingConfig)))
    protocol = Protocol.parse(doc.get("protocol", "FA"))
    sim_data = _known("sim", doc.get("sim", {}), _names(SimConfig) - _SIM_MANAGED)
    sim = _build(SimConfig, "sim", {**sim_data, "protocol": protocol, "seed": run_seed, "packing": packing})
    fp_data = _known("fixpoint", doc.get("fixpoint", {}), _names(FixpointConfig) - {"seed"} | _FIXPOINT_EXTRA)
    extras = {k: fp_data.pop(k) for k in list(fp_data) if k in _FIXPOINT_EXTRA}
    fixpoint = _build(FixpointConfig, "fixpoint", {**fp_data, "seed": run_seed})
    packer = str(doc.get("packer", "opt")).lower()
    if packer not in PACKERS:
        raise ConfigError(f"unknown packer {packer!r}; choose from {sorted(PACKERS)}")
    n_instances = int(doc.get("n_instances", 1))
    if n_instances < 1:
        raise ConfigError("n_instances must be at least 1")
    grid = _known("grid", doc.get("grid", {}), GRID_KEYS)
    for key, vals in grid.items():
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"grid.{key} must be a non-empty list")
    if "k" in grid and "protocol" in grid:
        raise ConfigError("grid may vary 'protocol' or 'k', not both")
    return RunConfig(
        params=params,
        sim=sim,
        packing=packing,
        fixpoint=fixpoint,
        scenario=_scenario(doc.get("scenario", {"synthetic": {}})),
        packer=packer,
        protocol=protocol,
        n_instances=n_instances,
        seed=run_seed,
        grid=grid,
        q=_profile("q", doc["q"]) if "q" in doc else None,
        q_init=_profile("fixpoint.q_init", extras["q_init"]) if "q_init" in extras else None,
        stub_q=_profile("fixpoint.stub_q", extras["stub_q"]) if "stub_q" in extras else None,
        frozen_samples=int(extras.get("frozen_samples", 200)),
        self_check=bool(extras.get("self_check", False)),
        base_dir=Path(base_dir),
    )


def load_config(path: str | Path | None, *, seed: int | None = None) -> RunConfig:
    if path is None:
        return parse_config({}, seed=seed)
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_config(doc, seed=seed, base_dir=path.parent)


# --- helpers -------------------------------------------------------------


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(_clean(doc), indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def _source(cfg: RunConfig):
    if "trace" in cfg.scenario:
        opts = cfg.scenario["trace"]
        return load_trace(
            cfg.base_dir / opts["riders"],
            cfg.base_dir / opts["drivers"],
            radius=opts.get("radius"),
        )
    return SyntheticSource(**cfg.scenario["synthetic"])


def _config_echo(cfg: RunConfig) -> dict:
    return {
        "packer": cfg.packer,
        "protocol": str(cfg.protocol),
        "seed": cfg.seed,
        "n_instances": cfg.n_instances,
        "params": dataclasses.asdict(cfg.params),
    }


# --- commands ------------------------------------------------------------


def cmd_gen(cfg: RunConfig, out: Path, jobs: int = 1) -> dict:
    if "synthetic" not in cfg.scenario:
        raise ConfigError("gen needs a synthetic scenario")
    opts = cfg.scenario["synthetic"]
    scenario = sample_scenario(
        opts.get("n_riders", SyntheticSource.n_riders),
        opts.get("n_drivers", SyntheticSource.n_drivers),
        opts.get("sigma", 1.0),
        opts.get("type_mix", DEFAULT_TYPE_MIX),
        cfg.seed,
        radius=opts.get("radius"),
        arrival_window_s=opts.get("arrival_window_s", SyntheticSource.arrival_window_s),
    )
    write_trace(scenario, out / "riders.csv", out / "drivers.csv")
    return {"riders": len(scenario.riders), "drivers": len(scenario.drivers)}


def _simulate(cfg: RunConfig, packer: str, sim: SimConfig, params: MarketParams, jobs: int):
    return run_monte_carlo(_source(cfg), packer, sim, params, cfg.n_instances, jobs)


def cmd_simulate(cfg: RunConfig, out: Path, jobs: int = 1) -> dict:
    mc = _simulate(cfg, cfg.packer, cfg.sim, cfg.params, jobs)
    doc = {"config": _config_echo(cfg), **mc.to_dict()}
    _write_json(out / "simulate.json", doc)
    with open(out / "instances.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", *METRICS])
        for i, r in enumerate(mc.results):
            w.writerow([i] + [repr(float(getattr(r, m))) for m in METRICS])
    records, tags = [], []
    for i, r in enumerate(mc.results):
        records.extend(r.per_ride)
        tags.extend([i] * len(r.per_ride))
    _write_rides_with_instance(records, tags, out / "rides.csv")
    return {m: mc.aggregate[m][0] for m in METRICS}


def _write_rides_with_instance(records, tags, path: Path) -> None:
    tmp = path.with_suffix(".part")
    write_rides_csv(records, tmp)
    lines = tmp.read_text(encoding="utf-8").splitlines()
    tmp.unlink()
    body = ["instance," + lines[0]] + [f"{t},{line}" for t, line in zip(tags, lines[1:])]
    path.write_text("\n".join(body) + "\n", encoding="utf-8")


def _cells(cfg: RunConfig) -> list[dict]:
    keys = [k for k in GRID_KEYS if k in cfg.grid]
    seen, cells = set(), []
    for combo in itertools.product(*(cfg.grid[k] for k in keys)):
        raw = dict(zip(keys, combo))
        cell = {
            "packer": str(raw.get("packer", cfg.packer)).lower(),
            "protocol": str(Protocol.parse(f"k{raw['k']}" if "k" in raw else raw.get("protocol", cfg.protocol))),
            "cap_u": int(raw.get("cap_u", cfg.params.cap_u)),
            "theta": float(raw.get("theta", cfg.params.theta)),
        }
        key = tuple(cell.values())
        if key not in seen:
            seen.add(key)
            cells.append(cell)
    return cells


def cmd_sweep(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    if not cfg.grid:
        raise ConfigError("sweep needs a non-empty 'grid'")
    cols = ["packer", "protocol", "cap_u", "theta", "n_instances"]
    for m in METRICS:
        cols += [f"{m}_mean", f"{m}_std"]
    cols.append("error")
    failures = 0
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for cell in _cells(cfg):
            head = [cell["packer"], cell["protocol"], cell["cap_u"], repr(cell["theta"]), cfg.n_instances]
            try:
                params = cfg.params.replace(cap_u=cell["cap_u"], theta=cell["theta"])
                sim = cfg.sim.replace(protocol=Protocol.parse(cell["protocol"]))
                mc = _simulate(cfg, cell["packer"], sim, params, jobs)
            except Exception as exc:  # one bad cell must not abort the sweep
                failures += 1
                _report(exc, "sweep", "run_monte_carlo", cell)
                w.writerow(head + [""] * (2 * len(METRICS)) + [f"{type(exc).__name__}: {exc}"])
                continue
            row = []
            for m in METRICS:
                mean, std = mc.aggregate[m]
                row += ["" if math.isnan(mean) else repr(mean), "" if math.isnan(std) else repr(std)]
            w.writerow(head + row + [""])
    return failures


def cmd_fluid(cfg: RunConfig, out: Path, jobs: int = 1) -> dict:
    q = cfg.q if cfg.q is not None else NotificationProfile.degenerate(cfg.params.cap_u).q
    if len(q) != cfg.params.cap_u + 1:
        raise ConfigError(f"q has {len(q)} entries but params.cap_u = {cfg.params.cap_u}")
    state = equilibrium(cfg.protocol, cfg.params, q)
    linear = solve_flow_linear(cfg.protocol, cfg.params, q)
    chain = absorption_metrics(build_generator(cfg.protocol, cfg.params, q))
    closed = np.concatenate([[state.r0], state.r, state.a, [state.d0], state.d])
    solved = np.concatenate([[linear.r0], linear.r, linear.a, [linear.d0], linear.d])
    residuals = {
        "flow": float(np.max(np.abs(flow_residual(cfg.protocol, cfg.params, q, state)), initial=0.0)),
        "coupling": float(np.max(np.abs(coupling_residual(cfg.protocol, state)), initial=0.0)),
        "aggregate": float(np.max(np.abs(aggregate_residual(cfg.protocol, cfg.params, state)), initial=0.0)),
        "linear_solve": float(np.max(np.abs(closed - solved) / np.maximum(1.0, np.abs(solved)))),
    }
    doc = {
        "protocol": str(cfg.protocol),
        "q": list(q),
        "params": dataclasses.asdict(cfg.params),
        **state.to_dict(),
        **chain.to_dict(),
        "residuals": residuals,
    }
    _write_json(out / "fluid.json", doc)
    return {"r0": state.r0, "d0": state.d0, "max_residual": max(residuals.values())}


def cmd_fixpoint(cfg: RunConfig, out: Path, jobs: int = 1) -> dict:
    u = cfg.params.cap_u
    q_init = cfg.q_init or (0.5, 0.5) + (0.0,) * (u - 1)
    snapshot_fn = None
    if cfg.stub_q is not None:
        stub = NotificationProfile(cfg.stub_q)
        if stub.cap_u != u:
            raise ConfigError(f"stub_q has {len(stub.q)} entries but params.cap_u = {u}")
        snapshot_fn = lambda r0, d0, seed: stub  # noqa: E731
    trace = find_equilibrium(cfg.protocol, cfg.params, cfg.packer, cfg.fixpoint, q_init, packing=cfg.packing, snapshot_fn=snapshot_fn)
    _, r0, d0 = trace.final
    extra = {"protocol": str(cfg.protocol), "packer": "stub" if snapshot_fn else cfg.packer, "seed": cfg.seed, "frozen_graph": None}
    if snapshot_fn is None:
        if cfg.frozen_samples > 0:
            frozen = frozen_graph_score(r0, d0, cfg.packer, cfg.protocol, cfg.params, cfg.frozen_samples, cfg.seed, cfg.packing)
            extra["frozen_graph"] = frozen.to_dict()
        if cfg.self_check:
            dist, bound = self_consistency(trace, cfg.protocol, cfg.params, cfg.packer, cfg.fixpoint, cfg.packing)
            extra["self_check"] = {"distance": dist, "bound": bound, "passed": dist <= bound}
    doc = {**trace.to_dict(), **extra}
    _write_json(out / "fixpoint.json", doc)
    trace.write_csv(out / "fixpoint.csv")
    return {"converged": trace.converged, "iterations": len(trace.iterations), "r0": r0, "d0": d0}


COMMANDS = {
    "gen": (cmd_gen, "sample_scenario"),
    "simulate": (cmd_simulate, "run_monte_carlo"),
    "sweep": (cmd_sweep, "run_monte_carlo"),
    "fluid": (cmd_fluid, "equilibrium"),
    "fixpoint": (cmd_fixpoint, "find_equilibrium"),
}


def _report(exc: BaseException, command: str, op: str, cell: dict | None = None) -> None:
    module = "nedispatch.cli"
    tb = exc.__traceback__
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("nedispatch."):
            module = name
        tb = tb.tb_next
    where = f" cell {json.dumps(cell, sort_keys=True)}" if cell else ""
    print(f"nedispatch {command}: error in {module} ({op}){where}: {type(exc).__name__}: {exc}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nedispatch", description="Non-exclusive dispatch experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default=".", help="output directory (default: .)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for Monte-Carlo runs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    fn, op = COMMANDS[args.command]
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = load_config(args.config, seed=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        summary = fn(cfg, out, args.jobs)
    except Exception as exc:
        _report(exc, args.command, "parse_config" if isinstance(exc, ConfigError) else op)
        return 1
    if args.command == "sweep":
        print(json.dumps({"failed_cells": summary}))
        return 1 if summary else 0
    print(json.dumps(_clean(summary), sort_keys=True))
    return 0
