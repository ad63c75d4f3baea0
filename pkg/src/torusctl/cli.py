"""Command-line front end.

Exit codes
----------
0  success / positive verdict
1  negative verdict (rank deficient, not chain transitive, certificate failed)
2  configuration error
3  grid too coarse for the requested chain step
4  no chain from p to q
5  local steering failure (the summary names the waypoint)
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from typing import Any, Optional

import numpy as np
import yaml

from . import experiments
from .fields import hormander_scan
from .flow import integrate, Trajectory
from .expressions import ExpressionError, field_from_strings
from .recurrence import (
    ChainUnreachableError,
    GridDiscretization,
    UnderResolvedGridError,
    approximate_minimal_set,
    build_chain_graph,
    chain_recurrent_cells,
    is_chain_transitive,
)
from .synthesis import SteerBudget, SteeringError, global_steer
from .systems import BUILTINS, ControlSystem, builtin

log = logging.getLogger("torusctl")

EXIT_OK, EXIT_NEGATIVE, EXIT_CONFIG, EXIT_UNDER_RESOLVED, EXIT_UNREACHABLE, EXIT_LOCAL = range(6)


class ConfigError(ValueError):
    pass


# -- config ----------------------------------------------------------------


@dataclass
class ChainParams:
    delta_chain: Optional[float] = None
    tau_step: float = 1.0
    samples_per_axis: int = 3


@dataclass
class SteerParams:
    mode: str = "small"
    eps: float = 0.1
    sigma: float = 0.5
    N: Optional[int] = None
    eps_box: Optional[float] = None
    max_iter: int = 50
    restarts: int = 4
    doublings: int = 1
    tol: float = 1e-6
    p: Optional[list] = None
    q: Optional[list] = None
    passage_time: Optional[float] = None
    min_set_resolution: int = 32
    T_long: float = 50.0
    cluster_radius: float = 0.05


@dataclass
class FlowParams:
    x0: Optional[list] = None
    T: float = 10.0


@dataclass
class BarrierParams:
    trials: int = 1000
    u_max: float = 10.0
    T: float = 50.0
    dt: float = 1e-3
    hold: float = 1.0


@dataclass
class RunConfig:
    """Everything a subcommand needs. Unknown keys are rejected."""

    system: Any = "gated"
    resolution: int = 64
    depth: int = 2
    tol: float = 1e-8
    drift_free: bool = False
    dt: float = 2e-2
    chain: ChainParams = field(default_factory=ChainParams)
    steer: SteerParams = field(default_factory=SteerParams)
    flow: FlowParams = field(default_factory=FlowParams)
    barrier: BarrierParams = field(default_factory=BarrierParams)
    out_dir: str = "out"
    seed: int = 0

    _NESTED = {"chain": ChainParams, "steer": SteerParams, "flow": FlowParams, "barrier": BarrierParams}

    @classmethod
    def from_mapping(cls, data: Optional[dict]) -> "RunConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        kwargs = {}
        for key, value in data.items():
            if key in cls._NESTED:
                sub = cls._NESTED[key]
                if not isinstance(value, dict):
                    raise ConfigError(f"'{key}' must be a mapping")
                sub_known = {f.name for f in fields(sub)}
                bad = set(value) - sub_known
                if bad:
                    raise ConfigError(f"unknown keys in '{key}': {sorted(bad)}")
                kwargs[key] = sub(**value)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self):
        def positive(name, v, kind=(int, float)):
            if isinstance(v, bool) or not isinstance(v, kind) or not np.isfinite(v) or v <= 0:
                raise ConfigError(f"{name} must be a positive number, got {v!r}")

        def integer(name, v, lo=0):
            if isinstance(v, bool) or not isinstance(v, int) or v < lo:
                raise ConfigError(f"{name} must be an integer >= {lo}, got {v!r}")

        integer("seed", self.seed)
        integer("resolution", self.resolution, 2)
        integer("depth", self.depth, 0)
        positive("tol", self.tol)
        positive("dt", self.dt)
        if not isinstance(self.drift_free, bool):
            raise ConfigError("drift_free must be true or false")
        if not isinstance(self.out_dir, str) or not self.out_dir:
            raise ConfigError("out_dir must be a path")
        c = self.chain
        if c.delta_chain is not None:
            positive("chain.delta_chain", c.delta_chain)
        positive("chain.tau_step", c.tau_step)
        integer("chain.samples_per_axis", c.samples_per_axis, 1)
        if c.samples_per_axis % 2 == 0:
            raise ConfigError("chain.samples_per_axis must be odd")
        s = self.steer
        if s.mode not in ("small", "scaled"):
            raise ConfigError("steer.mode must be 'small' or 'scaled'")
        for name in ("eps", "sigma", "tol", "T_long", "cluster_radius"):
            positive(f"steer.{name}", getattr(s, name))
        for name in ("N", "eps_box", "passage_time"):
            if getattr(s, name) is not None:
                positive(f"steer.{name}", getattr(s, name))
        integer("steer.max_iter", s.max_iter, 1)
        integer("steer.restarts", s.restarts, 0)
        integer("steer.doublings", s.doublings, 0)
        integer("steer.min_set_resolution", s.min_set_resolution, 2)
        positive("flow.T", self.flow.T)
        b = self.barrier
        integer("barrier.trials", b.trials, 1)
        for name in ("T", "dt", "hold"):
            positive(f"barrier.{name}", getattr(b, name))
        if isinstance(b.u_max, bool) or not isinstance(b.u_max, (int, float)) or b.u_max < 0:
            raise ConfigError("barrier.u_max must be >= 0")
        self.build_system()

    def build_system(self) -> ControlSystem:
        if isinstance(self.system, str):
            if self.system not in BUILTINS:
                raise ConfigError(f"unknown system {self.system!r}; built-ins: {sorted(BUILTINS)}")
            return builtin(self.system)
        if not isinstance(self.system, dict) or set(self.system) - {"drift", "controls", "name"} or "drift" not in self.system:
            raise ConfigError("inline system needs 'drift' and optional 'controls' (lists of expressions)")
        try:
            drift = field_from_strings(self.system["drift"], "V")
            ctrls = tuple(
                field_from_strings(c, f"X{i + 1}") for i, c in enumerate(self.system.get("controls") or [])
            )
        except (ExpressionError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if any(c.dim != drift.dim for c in ctrls):
            raise ConfigError("all fields must have the same dimension")
        return ControlSystem(str(self.system.get("name", "inline")), drift, ctrls)


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig.from_mapping({})
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    try:
        return RunConfig.from_mapping(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _point(text, dim, what):
    if text is None:
        return None
    vals = text if isinstance(text, list) else [v for v in str(text).replace(",", " ").split()]
    try:
        arr = np.array([float(v) for v in vals])
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be {dim} numbers") from None
    if arr.shape != (dim,) or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{what} must be {dim} finite numbers")
    return arr


# -- output helpers --------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj)}")


def _write_summary(out_dir, summary: dict):
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True, default=_jsonable)
        fh.write("\n")


# -- commands --------------------------------------------------------------


def cmd_rank(cfg: RunConfig) -> int:
    sysm = cfg.build_system()
    scan = hormander_scan(sysm.fields, cfg.resolution, cfg.depth, cfg.tol, drop_first=cfg.drift_free)
    scan.to_csv(os.path.join(cfg.out_dir, "rank.csv"))
    summary = {"command": "rank", "system": sysm.name, **scan.summary()}
    _write_summary(cfg.out_dir, summary)
    log.info("min rank %d over %d cells", scan.min_rank, scan.ranks.size)
    return EXIT_OK if summary["full_rank"] else EXIT_NEGATIVE


def _chain_graph(cfg, sysm):
    return build_chain_graph(
        sysm.drift,
        GridDiscretization.of(cfg.resolution, sysm.dim),
        delta_chain=cfg.chain.delta_chain,
        tau_step=cfg.chain.tau_step,
        dt=cfg.dt,
        samples_per_axis=cfg.chain.samples_per_axis,
    )


def cmd_chain(cfg: RunConfig) -> int:
    sysm = cfg.build_system()
    g = _chain_graph(cfg, sysm)
    g.to_edge_list(os.path.join(cfg.out_dir, "edges.txt"))
    g.scc_to_csv(os.path.join(cfg.out_dir, "scc.csv"))
    n_scc, labels = g.scc
    transitive = is_chain_transitive(g)
    _write_summary(
        cfg.out_dir,
        {
            "command": "chain",
            "system": sysm.name,
            "cells": g.grid.n_cells,
            "edges": g.n_edges,
            "delta_chain": g.delta_chain,
            "tau_step": g.tau_step,
            "scc_count": int(n_scc),
            "chain_recurrent_cells": int(len(chain_recurrent_cells(g))),
            "chain_transitive": bool(transitive),
        },
    )
    return EXIT_OK if transitive else EXIT_NEGATIVE


def cmd_steer(cfg: RunConfig, p=None, q=None) -> int:
    sysm = cfg.build_system()
    s = cfg.steer
    p = _point(p if p is not None else s.p, sysm.dim, "p")
    q = _point(q if q is not None else s.q, sysm.dim, "q")
    if p is None or q is None:
        raise ConfigError("steer needs p and q")
    summary = {"command": "steer", "system": sysm.name, "mode": s.mode, "p": p, "q": q}
    g = _chain_graph(cfg, sysm)
    ms = approximate_minimal_set(
        sysm.drift, GridDiscretization.of(s.min_set_resolution, sysm.dim), T_long=s.T_long,
        cluster_radius=s.cluster_radius, dt=cfg.dt,
    )
    budget = SteerBudget(max_iter=s.max_iter, restarts=s.restarts, tol=s.tol, doublings=s.doublings)
    try:
        res = global_steer(
            sysm.drift, list(sysm.controls), p, q, s.mode, graph=g, min_set=ms, eps=s.eps, sigma=s.sigma,
            cluster_radius=s.cluster_radius, passage_time=s.passage_time, N=s.N, eps_box=s.eps_box,
            budget=budget, dt=cfg.dt, seed=cfg.seed,
        )
    except ChainUnreachableError as exc:
        summary.update(status="unreachable", error=str(exc))
        _write_summary(cfg.out_dir, summary)
        return EXIT_UNREACHABLE
    except SteeringError as exc:
        summary.update(status="local_failure", waypoint=exc.waypoint, residual=exc.residual,
                       leg_start=exc.start, leg_target=exc.target, error=str(exc))
        _write_summary(cfg.out_dir, summary)
        return EXIT_LOCAL
    res.save(cfg.out_dir)
    d = res.diagnostics
    summary.update(
        status="steered" if d.get("converged") else "inaccurate",
        endpoint_error=res.endpoint_error,
        control_bound=res.plan.control_bound,
        total_time=res.plan.total_time,
        backward_time=res.plan.backward_time,
        waypoints=len(d.get("waypoints", [])),
        hypotheses=d.get("hypotheses", {}),
    )
    _write_summary(cfg.out_dir, summary)
    return EXIT_OK if d.get("converged") else EXIT_NEGATIVE


def cmd_flow(cfg: RunConfig, x0=None) -> int:
    sysm = cfg.build_system()
    x0 = _point(x0 if x0 is not None else cfg.flow.x0, sysm.dim, "x0")
    if x0 is None:
        raise ConfigError("flow needs x0")
    V = sysm.drift
    times, pts = integrate(lambda t, z: V(z), x0, cfg.flow.T, cfg.dt)
    traj = Trajectory(times, pts, cfg.dt, (V.name,))
    traj.to_csv(os.path.join(cfg.out_dir, "trajectory.csv"))
    _write_summary(cfg.out_dir, {"command": "flow", "system": sysm.name, "x0": x0, "T": cfg.flow.T,
                                 "samples": len(traj), "end": traj.end})
    return EXIT_OK


def cmd_counterexample(cfg: RunConfig) -> int:
    if cfg.system != "gated":
        raise ConfigError("counterexample runs on the built-in gated system only")
    stages = {}
    hr = experiments.verify_hormander_gated(cfg.resolution, max(cfg.depth, 2), cfg.tol)
    hr.full.to_csv(os.path.join(cfg.out_dir, "rank.csv"))
    hr.drift_free.to_csv(os.path.join(cfg.out_dir, "rank_drift_free.csv"))
    stages["hormander"] = {"ok": hr.ok, **hr.summary()}

    g = _chain_graph(cfg, experiments.gated_torus())
    g.to_edge_list(os.path.join(cfg.out_dir, "edges.txt"))
    stages["chain"] = {"ok": bool(is_chain_transitive(g)), "scc_count": int(g.scc[0]), "edges": g.n_edges}

    b = cfg.barrier
    br = experiments.barrier_test(b.trials, b.u_max, b.T, b.dt, cfg.seed, b.hold)
    br.to_csv(os.path.join(cfg.out_dir, "barrier.csv"))
    stages["barrier"] = br.summary()

    s = cfg.steer
    demo = experiments.noncontrollability_demo(
        cfg.resolution, s.eps, s.sigma, cfg.dt, s.passage_time, seed=cfg.seed
    )
    stages["noncontrollability"] = demo.summary()

    failed = [k for k, v in stages.items() if not v["ok"]]
    _write_summary(cfg.out_dir, {"command": "counterexample", "stages": stages, "failed_stages": failed})
    for k in failed:
        print(f"stage failed: {k}", file=sys.stderr)
    return EXIT_OK if not failed else EXIT_NEGATIVE


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="torusctl", description="Controllability analysis of control-affine systems on tori.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML config file")
    common.add_argument("--seed", help="RNG seed (integer)")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("--dt", help="integrator step")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("rank", parents=[common], help="bracket rank scan")
    sub.add_parser("chain", parents=[common], help="chain graph and transitivity")
    st = sub.add_parser("steer", parents=[common], help="steer p to q")
    st.add_argument("--p", help="start point, e.g. '0,3.14'")
    st.add_argument("--q", help="target point")
    fl = sub.add_parser("flow", parents=[common], help="integrate the drift")
    fl.add_argument("--x0", help="initial point")
    sub.add_parser("counterexample", parents=[common], help="run all certificates for the gated torus")
    return ap


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        try:
            cfg.seed = int(args.seed)
        except ValueError:
            raise ConfigError(f"--seed must be an integer, got {args.seed!r}") from None
    if args.dt is not None:
        try:
            cfg.dt = float(args.dt)
        except ValueError:
            raise ConfigError(f"--dt must be a number, got {args.dt!r}") from None
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        os.makedirs(cfg.out_dir, exist_ok=True)
        if args.command == "rank":
            return cmd_rank(cfg)
        if args.command == "chain":
            return cmd_chain(cfg)
        if args.command == "steer":
            return cmd_steer(cfg, args.p, args.q)
        if args.command == "flow":
            return cmd_flow(cfg, args.x0)
        return cmd_counterexample(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UnderResolvedGridError as exc:
        print(f"under-resolved grid: {exc}", file=sys.stderr)
        return EXIT_UNDER_RESOLVED


if __name__ == "__main__":
    sys.exit(main())
