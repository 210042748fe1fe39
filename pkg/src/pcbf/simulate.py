"""Closed-loop simulation harness.

Fixed-step RK4 plant integration with zero-order-hold control: the filter
runs once per step and its output is held over the step.  Controller failures
fall back to the nominal input and are logged; non-finite states abort the
run with the partial log preserved.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from pcbf.barrier import (
    CASE_BOUNDARY_ROOT_SELF,
    CASE_END_ROOT_BEFORE,
    CASE_INTERIOR,
    PcbfContext,
    classify_case,
    derivative_affine,
    eval_pcbf,
    inner_product_monitor,
)
from pcbf.core import (
    ConfigurationError,
    DegenerateMaximizerError,
    InternalConsistencyError,
    PropagationError,
    TangentialCrossingError,
    make_compatible_alpha,
    make_default_margin,
)
from pcbf.qp import build_cbf_constraint, ecbf_baseline, solve_min_deviation
from pcbf.scenarios import (
    ScenarioConfig,
    build_intersection,
    build_satellite,
    intersection_initial_state,
    satellite_initial_state,
)

_DERIV_ERRORS = (TangentialCrossingError, DegenerateMaximizerError,
                 InternalConsistencyError)


@dataclass
class StepDecision:
    u: np.ndarray
    mu: np.ndarray
    h: float
    h_star: float
    case: str
    feasible: bool
    slack: list[float] = field(default_factory=list)
    active: list[int] = field(default_factory=list)
    monitor_ok: bool = True
    note: str = ""


class PcbfController:
    """Predictive safety filter: one hard row for the first maximizer,
    slacked rows for the rest, with case hysteresis to avoid chattering
    between derivative formulas at structural boundaries."""

    def __init__(self, ctx: PcbfContext, alpha, slack_weight: float = 1e3,
                 hysteresis: bool = True):
        self.ctx = ctx
        self.alpha = alpha
        self.slack_weight = float(slack_weight)
        self.hysteresis = hysteresis
        self._prev_case: str | None = None

    def _held_case(self, entry, t) -> str:
        """Keep the previous structural case while the first maximizer sits
        within a band of the boundary that separates the two formulas."""
        raw = classify_case(entry)
        prev = self._prev_case
        if not self.hysteresis or prev is None or prev == raw or entry.already_unsafe:
            return raw
        band_t = 2.0 * self.ctx.grid_step
        band_h = 1e-6 * self.ctx.h.h_max
        near_end = (t + self.ctx.T - entry.tau) <= band_t
        near_zero = abs(entry.h_value) <= band_h
        pair = {raw, prev}
        if pair == {CASE_INTERIOR, CASE_END_ROOT_BEFORE} and near_end:
            if prev == CASE_END_ROOT_BEFORE and entry.root_is_self:
                return raw  # earlier-root formula needs an earlier root
            return prev
        if pair == {CASE_INTERIOR, CASE_BOUNDARY_ROOT_SELF} and near_end:
            return prev
        if pair == {CASE_END_ROOT_BEFORE, CASE_BOUNDARY_ROOT_SELF} and near_zero:
            if prev == CASE_END_ROOT_BEFORE and entry.root_is_self:
                return raw
            return prev
        return raw

    def step(self, t, x) -> StepDecision:
        ctx = self.ctx
        h_now = float(ctx.h.value(t, np.asarray(x, dtype=float)))
        mu = np.asarray(ctx.path.nominal_control(t, x), dtype=float)
        try:
            val = eval_pcbf(t, x, ctx)
        except PropagationError as exc:
            return StepDecision(u=mu, mu=mu, h=h_now, h_star=float("nan"),
                                case="", feasible=False,
                                note=f"scan failed: {exc}")

        notes = []
        monitor_ok = True
        constraints = []
        first = val.maximizers.first
        case_used = self._held_case(first, t)
        if case_used != val.case_label:
            notes.append(f"hysteresis held {case_used}")
        self._prev_case = case_used

        for idx, entry in enumerate(val.maximizers.entries):
            override = case_used if idx == 0 else None
            try:
                deriv = derivative_affine(entry, t, x, ctx, val.grid, case=override)
            except _DERIV_ERRORS as exc:
                if idx == 0:
                    # no usable hard row: pass the nominal input through
                    return StepDecision(u=mu, mu=mu, h=h_now, h_star=val.h_star,
                                        case=case_used, feasible=False,
                                        note=f"derivative failed: {exc}")
                notes.append(f"slack row {idx} dropped: {exc}")
                continue
            if deriv.diagnostics:
                notes.append(deriv.diagnostics)
            constraints.append(build_cbf_constraint(
                val, deriv, self.alpha, mu, entry_index=idx,
                slack_weight=None if idx == 0 else self.slack_weight))
            if not inner_product_monitor(entry, ctx, val.grid):
                monitor_ok = False

        res = solve_min_deviation(mu, constraints)
        if res.infeasible_reason:
            notes.append(res.infeasible_reason)
        return StepDecision(u=np.asarray(res.u, dtype=float), mu=mu, h=h_now,
                            h_star=val.h_star, case=case_used,
                            feasible=res.feasible, slack=res.slack_values,
                            active=res.active_set, monitor_ok=monitor_ok,
                            note="; ".join(notes))


class EcbfController:
    """Reactive baseline wrapper with the same step interface."""

    def __init__(self, h, gains, model, mu_law):
        self.h = h
        self._filter = ecbf_baseline(h, gains, model, mu_law)
        self._mu_law = mu_law

    def step(self, t, x) -> StepDecision:
        x = np.asarray(x, dtype=float)
        mu = np.asarray(self._mu_law(t, x), dtype=float)
        res = self._filter(t, x)
        return StepDecision(u=np.asarray(res.u, dtype=float), mu=mu,
                            h=float(self.h.value(t, x)), h_star=float("nan"),
                            case="", feasible=res.feasible,
                            slack=res.slack_values, active=res.active_set,
                            note=res.infeasible_reason or "")


class PassthroughController:
    """u = mu (nominal) or u = 0 (uncontrolled)."""

    def __init__(self, h, mu_law, use_nominal: bool):
        self.h = h
        self._mu_law = mu_law
        self.use_nominal = use_nominal

    def step(self, t, x) -> StepDecision:
        x = np.asarray(x, dtype=float)
        mu = np.asarray(self._mu_law(t, x), dtype=float)
        u = mu if self.use_nominal else np.zeros_like(mu)
        return StepDecision(u=u, mu=mu, h=float(self.h.value(t, x)),
                            h_star=float("nan"), case="", feasible=True)


@dataclass
class SimLog:
    cfg: ScenarioConfig
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    mu: np.ndarray
    h: np.ndarray
    h_star: np.ndarray
    case: list[str]
    feasible: np.ndarray
    slack: list[list[float]]
    active: list[list[int]]
    step_ms: np.ndarray
    monitor_violations: int
    infeasible_steps: int
    truncated: bool
    notes: list[str]
    initial_h_star: float | None = None


def build_scenario(cfg: ScenarioConfig):
    """(model, constraint, path, nominal law, initial state) for a config."""
    if cfg.scenario.startswith("intersection"):
        model, h, path, mu_law = build_intersection(cfg)
        x0 = intersection_initial_state(cfg)
    elif cfg.scenario == "satellite":
        model, h, path, mu_law = build_satellite(cfg)
        x0 = satellite_initial_state(cfg)
    else:
        raise ConfigurationError(f"unknown scenario {cfg.scenario!r}")
    return model, h, path, mu_law, x0


def make_context(cfg: ScenarioConfig, model, h, path) -> PcbfContext:
    margin = make_default_margin(h.h_max, cfg.T)
    return PcbfContext(model=model, path=path, h=h, margin=margin,
                       T=cfg.T, N=cfg.N, refine_tol=cfg.refine_tol,
                       root_tol=cfg.root_tol, two_level=cfg.two_level)


def make_controller(cfg: ScenarioConfig, model, h, path, mu_law):
    if cfg.controller == "pcbf":
        ctx = make_context(cfg, model, h, path)
        alpha = make_compatible_alpha(ctx.margin, cfg.gamma)
        return PcbfController(ctx, alpha, cfg.slack_weight)
    if cfg.controller == "ecbf":
        return EcbfController(h, (cfg.ecbf_k1, cfg.ecbf_k2), model, mu_law)
    if cfg.controller in ("none", "nominal"):
        return PassthroughController(h, mu_law, use_nominal=(cfg.controller == "nominal"))
    raise ConfigurationError(f"unknown controller {cfg.controller!r}")


def _rk4_plant(model, t, x, u, dt):
    def fld(tq, y):
        return model.drift(tq, y) + model.input_matrix(tq, y) @ u
    k1 = fld(t, x)
    k2 = fld(t + dt / 2, x + dt / 2 * k1)
    k3 = fld(t + dt / 2, x + dt / 2 * k2)
    k4 = fld(t + dt, x + dt * k3)
    return x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def run_closed_loop(cfg: ScenarioConfig) -> SimLog:
    model, h, path, mu_law, x0 = build_scenario(cfg)
    controller = make_controller(cfg, model, h, path, mu_law)

    n_steps = int(round(cfg.duration / cfg.step))
    x = np.asarray(x0, dtype=float)
    rows = {k: [] for k in ("t", "x", "u", "mu", "h", "h_star", "case",
                            "feasible", "slack", "active", "step_ms")}
    notes: list[str] = []
    monitor_violations = 0
    infeasible_steps = 0
    truncated = False
    initial_h_star = None

    for k in range(n_steps + 1):
        t = k * cfg.step
        tic = time.perf_counter()
        try:
            dec = controller.step(t, x)
        except PropagationError as exc:
            notes.append(f"t={t}: aborted ({exc})")
            truncated = True
            break
        elapsed_ms = (time.perf_counter() - tic) * 1e3

        if k == 0 and np.isfinite(dec.h_star):
            initial_h_star = dec.h_star
            if dec.h_star > 0:
                notes.append(f"initial barrier value positive: {dec.h_star:.6g}")

        rows["t"].append(t)
        rows["x"].append(x.copy())
        rows["u"].append(dec.u.copy())
        rows["mu"].append(dec.mu.copy())
        rows["h"].append(dec.h)
        rows["h_star"].append(dec.h_star)
        rows["case"].append(dec.case)
        rows["feasible"].append(dec.feasible)
        rows["slack"].append(list(dec.slack))
        rows["active"].append(list(dec.active))
        rows["step_ms"].append(elapsed_ms)
        if dec.note:
            notes.append(f"t={t}: {dec.note}")
        if not dec.monitor_ok:
            monitor_violations += 1
        if not dec.feasible:
            infeasible_steps += 1

        if k == n_steps:
            break
        x = _rk4_plant(model, t, x, dec.u, cfg.step)
        if not np.all(np.isfinite(x)):
            notes.append(f"t={t + cfg.step}: non-finite state, run truncated")
            truncated = True
            break

    return SimLog(
        cfg=cfg,
        t=np.asarray(rows["t"]),
        x=np.asarray(rows["x"]),
        u=np.asarray(rows["u"]),
        mu=np.asarray(rows["mu"]),
        h=np.asarray(rows["h"]),
        h_star=np.asarray(rows["h_star"]),
        case=rows["case"],
        feasible=np.asarray(rows["feasible"], dtype=bool),
        slack=rows["slack"],
        active=rows["active"],
        step_ms=np.asarray(rows["step_ms"]),
        monitor_violations=monitor_violations,
        infeasible_steps=infeasible_steps,
        truncated=truncated,
        notes=notes,
        initial_h_star=initial_h_star,
    )
