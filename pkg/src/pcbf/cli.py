"""Command-line interface: run one closed-loop simulation, compare
controllers on a scenario, or run a quick self-check.

Config files are flat `key = value` text; dotted keys (params.k) set scenario
parameters.  parse_config(serialize_config(cfg)) returns an equal config.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from pcbf.core import ConfigurationError
from pcbf.scenarios import CONTROLLERS, SCENARIOS, ScenarioConfig, default_config
from pcbf.simulate import SimLog, run_closed_loop

_FLOAT_KEYS = {"T", "duration", "step", "refine_tol", "root_tol", "gamma",
               "slack_weight", "ecbf_k1", "ecbf_k2"}
_INT_KEYS = {"N", "seed"}
_BOOL_KEYS = {"two_level"}
_STR_KEYS = {"scenario", "controller"}
_ALL_KEYS = _FLOAT_KEYS | _INT_KEYS | _BOOL_KEYS | _STR_KEYS


def parse_config(text: str) -> ScenarioConfig:
    """Parse a flat key = value config.  Errors name the offending key and
    line number.  Unset keys fall back to the scenario defaults."""
    raw: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key in raw:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = (value, lineno)

    if "scenario" not in raw:
        raise ConfigurationError("missing required key 'scenario'")
    scenario, lineno = raw.pop("scenario")
    if scenario not in SCENARIOS:
        raise ConfigurationError(
            f"line {lineno}: key 'scenario': unknown scenario {scenario!r} "
            f"(choices: {', '.join(SCENARIOS)})")
    cfg = default_config(scenario)

    def bad(key, lineno, value, expected):
        return ConfigurationError(
            f"line {lineno}: key {key!r}: cannot parse {value!r} as {expected}")

    for key, (value, lineno) in raw.items():
        if key.startswith("params."):
            pkey = key[len("params."):]
            if pkey not in cfg.params:
                raise ConfigurationError(
                    f"line {lineno}: key {key!r}: unknown parameter for scenario "
                    f"{scenario!r} (choices: {', '.join(sorted(cfg.params))})")
            try:
                cfg.params[pkey] = float(value)
            except ValueError:
                raise bad(key, lineno, value, "a number") from None
        elif key in _FLOAT_KEYS:
            try:
                setattr(cfg, key, float(value))
            except ValueError:
                raise bad(key, lineno, value, "a number") from None
        elif key in _INT_KEYS:
            try:
                setattr(cfg, key, int(value))
            except ValueError:
                raise bad(key, lineno, value, "an integer") from None
        elif key in _BOOL_KEYS:
            if value.lower() not in ("true", "false"):
                raise bad(key, lineno, value, "true or false")
            setattr(cfg, key, value.lower() == "true")
        elif key == "controller":
            if value not in CONTROLLERS:
                raise ConfigurationError(
                    f"line {lineno}: key 'controller': unknown controller {value!r} "
                    f"(choices: {', '.join(CONTROLLERS)})")
            cfg.controller = value
        else:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
    return cfg


def serialize_config(cfg: ScenarioConfig) -> str:
    """Write a config back out so that parse_config recovers it exactly."""
    lines = [f"scenario = {cfg.scenario}", f"controller = {cfg.controller}"]
    for f in fields(ScenarioConfig):
        if f.name in ("scenario", "controller", "params"):
            continue
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            lines.append(f"{f.name} = {'true' if v else 'false'}")
        elif isinstance(v, float):
            lines.append(f"{f.name} = {v!r}")
        else:
            lines.append(f"{f.name} = {v}")
    for k in sorted(cfg.params):
        lines.append(f"params.{k} = {cfg.params[k]!r}")
    return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_csv(log: SimLog, path: Path) -> None:
    n, n_x = log.x.shape
    n_u = log.u.shape[1]
    n_slack = max((len(s) for s in log.slack), default=0)
    n_slack = max(n_slack, 1)
    header = (["t"]
              + [f"x{i}" for i in range(n_x)]
              + [f"u{i}" for i in range(n_u)]
              + [f"mu{i}" for i in range(n_u)]
              + ["h", "Hstar", "case", "feasible"]
              + [f"slack{i}" for i in range(n_slack)]
              + ["step_ms"])
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(n):
            slack = list(log.slack[k]) + [0.0] * (n_slack - len(log.slack[k]))
            row = ([_fmt(log.t[k])]
                   + [_fmt(v) for v in log.x[k]]
                   + [_fmt(v) for v in log.u[k]]
                   + [_fmt(v) for v in log.mu[k]]
                   + [_fmt(log.h[k]), _fmt(log.h_star[k]), log.case[k],
                      str(int(log.feasible[k]))]
                   + [_fmt(v) for v in slack]
                   + [_fmt(log.step_ms[k])])
            fh.write(",".join(row) + "\n")


def summarize(log: SimLog) -> dict:
    dev = np.linalg.norm(log.u - log.mu, axis=1)
    u_norm = np.linalg.norm(log.u, axis=1)
    out = {
        "scenario": log.cfg.scenario,
        "controller": log.cfg.controller,
        "steps": len(log.t),
        "max_h": float(np.max(log.h)),
        "final_h": float(log.h[-1]),
        "max_control_norm": float(np.max(u_norm)),
        "total_deviation": float(np.sum(dev) * log.cfg.step),
        "mean_step_ms": float(np.mean(log.step_ms)),
        "max_step_ms": float(np.max(log.step_ms)),
        "infeasible_steps": log.infeasible_steps,
        "monitor_violations": log.monitor_violations,
        "truncated": log.truncated,
        "safe": bool(np.max(log.h) <= 0.0),
    }
    finite = np.isfinite(log.h_star)
    if np.any(finite):
        out["max_Hstar"] = float(np.max(log.h_star[finite]))
    nz = np.flatnonzero(dev > 1e-9)
    out["first_intervention_t"] = float(log.t[nz[0]]) if nz.size else math.nan
    if log.cfg.scenario.startswith("intersection"):
        out["car1_crossed"] = bool(log.x[-1, 0] > 0.0)
        out["car2_crossed"] = bool(log.x[-1, 2] > 0.0)
    return out


def write_summary(summary: dict, path: Path) -> None:
    with open(path, "w") as fh:
        for k, v in summary.items():
            if isinstance(v, bool):
                fh.write(f"{k} = {'true' if v else 'false'}\n")
            elif isinstance(v, float):
                fh.write(f"{k} = {_fmt(v)}\n")
            else:
                fh.write(f"{k} = {v}\n")


def _verbose() -> bool:
    return os.environ.get("PCBF_VERBOSE", "0") not in ("", "0")


def _run_one(cfg: ScenarioConfig, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    if _verbose():
        print(f"running {cfg.scenario}/{cfg.controller} -> {out_dir}",
              file=sys.stderr)
    log = run_closed_loop(cfg)
    write_csv(log, out_dir / "run.csv")
    summary = summarize(log)
    write_summary(summary, out_dir / "summary.txt")
    (out_dir / "config.txt").write_text(serialize_config(cfg))
    if log.notes:
        (out_dir / "notes.txt").write_text("\n".join(log.notes) + "\n")
    if _verbose():
        for note in log.notes:
            print(f"  note: {note}", file=sys.stderr)
        print(f"wrote {out_dir / 'run.csv'}", file=sys.stderr)
    return summary


def cmd_run(args) -> int:
    cfg = parse_config(Path(args.config).read_text())
    summary = _run_one(cfg, Path(args.out))
    for k, v in summary.items():
        print(f"{k} = {v}")
    return 0


def cmd_compare(args) -> int:
    cfg = parse_config(Path(args.config).read_text())
    names = [c.strip() for c in args.controllers.split(",") if c.strip()]
    for name in names:
        if name not in CONTROLLERS:
            raise ConfigurationError(f"unknown controller {name!r}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    # runs are independent (each builds its own scenario) and write to
    # disjoint subdirectories, so they can proceed concurrently
    with ThreadPoolExecutor(max_workers=len(names)) as pool:
        futures = [pool.submit(_run_one,
                               replace(cfg, controller=name,
                                       params=dict(cfg.params)),
                               out_dir / name)
                   for name in names]
        table = [f.result() for f in futures]
    cols = ["controller", "max_h", "safe", "max_control_norm", "total_deviation",
            "mean_step_ms"]
    lines = ["\t".join(cols)]
    for s in table:
        lines.append("\t".join(str(s.get(c, "")) for c in cols))
    report = "\n".join(lines) + "\n"
    (out_dir / "compare.txt").write_text(report)
    print(report, end="")
    return 0


def cmd_selftest(args) -> int:
    import pcbf.core as core
    from pcbf.barrier import eval_pcbf
    from pcbf.paths import AnalyticCarPath
    from pcbf.qp import AffineConstraint, solve_min_deviation
    from pcbf.scenarios import intersection_initial_state
    from pcbf.simulate import build_scenario, make_context

    failures = []

    def check(name, ok):
        print(f"{'ok' if ok else 'FAIL'}  {name}")
        if not ok:
            failures.append(name)

    margin = core.make_default_margin(1.0, 10.0)
    alpha = core.make_compatible_alpha(margin, 4.0)
    lam = np.linspace(1e-3, 10.0, 200)
    check("margin compatibility alpha(m(lam)) >= m'(lam)",
          bool(np.all([alpha.value(margin.value(l)) >= margin.derivative(l) - 1e-12
                       for l in lam])))
    check("alpha(m(T)) >= gamma", alpha.value(margin.value(10.0)) >= 4.0 - 1e-12)

    path = AnalyticCarPath(k=1.0, v=np.array([1.0, 1.0]))
    x = np.array([0.0, 0.0, 0.0, 0.0])
    p1 = path.evaluate(1.0, 0.0, x)
    check("car path closed form", abs(p1[0] - math.exp(-1.0)) < 1e-12
          and abs(p1[1] - (1.0 - math.exp(-1.0))) < 1e-12)

    res = solve_min_deviation(np.array([2.0, 2.0]),
                              [AffineConstraint(np.array([1.0, 0.0]), 0.0),
                               AffineConstraint(np.array([0.0, 1.0]), 1.0)])
    check("min-deviation projection", np.allclose(res.u, [0.0, 1.0], atol=1e-10))

    cfg = default_config("intersection_cross")
    model, h, path, mu_law, x0 = build_scenario(cfg)
    ctx = make_context(cfg, model, h, path)
    val = eval_pcbf(0.0, intersection_initial_state(cfg), ctx)
    check("intersection barrier evaluates finite", math.isfinite(val.h_star))
    check("initial state inside predicted safe set", val.h_star <= 0.0)

    print(f"{len(failures)} failure(s)")
    return 1 if failures else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pcbf", description="Predictive safety-filter simulations")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one closed-loop simulation")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run several controllers on one scenario")
    p_cmp.add_argument("--config", required=True)
    p_cmp.add_argument("--controllers", default="pcbf,ecbf,none")
    p_cmp.add_argument("--out", required=True)
    p_cmp.set_defaults(func=cmd_compare)

    p_self = sub.add_parser("selftest", help="quick built-in checks")
    p_self.set_defaults(func=cmd_selftest)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
