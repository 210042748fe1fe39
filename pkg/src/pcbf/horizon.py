"""Times of interest along the propagated trajectory.

A dense grid over [t, t+T] locates candidate local maximizers of
h(tau, p(tau; t, x)); golden-section search refines interior candidates and
bisection finds the last upcrossing zero preceding each unsafe maximizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pcbf.core import ConfigurationError

_PLATEAU_TOL = 1e-12


@dataclass
class PathEvaluation:
    """Snapshot of the path and constraint at one horizon time."""

    tau: float
    state: np.ndarray
    dp_dtau: np.ndarray
    h_value: float
    dh_dtau: float
    dp_dx: np.ndarray | None = None


@dataclass
class HorizonGrid:
    """Sampled trajectory of h along the path over [t, t+T].

    taus are strictly increasing with taus[0] = t and taus[-1] = t + T; they
    are uniform unless the two-level scan inserted extra samples near a
    threat.
    """

    t: float
    x: np.ndarray
    T: float
    N: int
    taus: np.ndarray
    states: np.ndarray
    h_values: np.ndarray
    path: object
    h: object

    def h_along(self, tau: float) -> float:
        state = self.path.evaluate(tau, self.t, self.x)
        return float(self.h.value(tau, state))

    def evaluation(self, tau: float, with_sensitivity: bool = False) -> PathEvaluation:
        state = self.path.evaluate(tau, self.t, self.x)
        dp_dtau = self.path.tau_derivative(tau, self.t, self.x)
        h_value = float(self.h.value(tau, state))
        dh_dtau = float(self.h.grad_t(tau, state) + self.h.grad_x(tau, state) @ dp_dtau)
        dp_dx = self.path.state_sensitivity(tau, self.t, self.x) if with_sensitivity else None
        return PathEvaluation(tau, state, dp_dtau, h_value, dh_dtau, dp_dx)

    def samples(self) -> list[PathEvaluation]:
        return [self.evaluation(tau) for tau in self.taus]


@dataclass
class MaximizerEntry:
    """One element of the maximizer set with its preceding root."""

    tau: float
    h_value: float
    at_start: bool
    at_end: bool
    root_eta: float
    root_is_self: bool
    already_unsafe: bool = False


@dataclass
class MaximizerSet:
    entries: list[MaximizerEntry] = field(default_factory=list)

    @property
    def q(self) -> int:
        return len(self.entries)

    @property
    def first(self) -> MaximizerEntry:
        return self.entries[0]


@dataclass(frozen=True)
class RootResult:
    eta: float
    already_unsafe: bool


def scan(path, h, t, x, T, N, two_level=False, threat_fraction=0.5, refine_factor=50):
    """Sample h along the path at N+1 uniform times over [t, t+T].

    With two_level=True, any interval whose endpoint h-value comes within
    threat_fraction * h_max of zero is re-sampled refine_factor times denser,
    so narrow violation spikes are resolved without a uniformly fine grid.
    """
    if T <= 0:
        raise ConfigurationError(f"horizon T must be positive, got {T}")
    if N < 50:
        raise ConfigurationError(f"grid sample count must be at least 50, got {N}")
    taus = t + np.arange(N + 1) * (T / N)
    taus[-1] = t + T
    states = np.asarray(path.evaluate_many(taus, t, x))
    h_values = np.asarray(h.value(taus, states), dtype=float)

    if two_level:
        hot = np.flatnonzero(h_values >= -threat_fraction * h.h_max)
        if hot.size:
            extra = []
            dense_step = (T / N) / refine_factor
            for j in hot:
                lo = taus[max(j - 1, 0)]
                hi = taus[min(j + 1, N)]
                extra.append(np.arange(lo + dense_step, hi - dense_step / 2, dense_step))
            new_taus = np.unique(np.concatenate([taus] + extra))
            new_states = np.asarray(path.evaluate_many(new_taus, t, x))
            taus = new_taus
            states = new_states
            h_values = np.asarray(h.value(taus, states), dtype=float)

    return HorizonGrid(t=float(t), x=np.asarray(x, dtype=float), T=float(T), N=int(N),
                       taus=taus, states=states, h_values=h_values, path=path, h=h)


def _golden_max(f, lo, hi, tol):
    """Golden-section maximization of f on [lo, hi] to an interval of width tol."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    tau = 0.5 * (a + b)
    return tau, f(tau)


def find_maximizers(grid: HorizonGrid, refine_tol: float, root_tol: float) -> MaximizerSet:
    """Extract the finite maximizer set from the sampled horizon.

    Interior discrete maxima are refined by golden-section search; a plateau
    of equal values contributes only its first time; the horizon boundaries
    are included when the sampled sequence is nonincreasing away from them,
    so the set is never empty.
    """
    taus, hv = grid.taus, grid.h_values
    K = len(taus) - 1
    t, tend = grid.t, grid.t + grid.T

    candidates = []  # (tau, h_value, at_start, at_end)
    if hv[0] >= hv[1]:
        candidates.append((t, float(hv[0]), True, False))
    j = 1
    while j < K:
        tol_j = _PLATEAU_TOL * (1.0 + abs(hv[j]))
        if hv[j] >= hv[j - 1] - tol_j and hv[j] >= hv[j + 1] - tol_j:
            strict = (hv[j] > hv[j - 1] + tol_j) or (hv[j] > hv[j + 1] + tol_j)
            if strict:
                # first-of-plateau: skip any following equal samples
                jj = j
                while jj + 1 < K and abs(hv[jj + 1] - hv[j]) <= tol_j:
                    jj += 1
                f = lambda tau: grid.h_along(tau)
                tau_r, h_r = _golden_max(f, taus[j - 1], taus[min(j + 1, K)], refine_tol)
                candidates.append((tau_r, h_r, False, False))
                j = jj
        j += 1
    if hv[K] >= hv[K - 1]:
        candidates.append((tend, float(hv[K]), False, True))

    candidates.sort(key=lambda c: c[0])
    merged = []
    for c in candidates:
        if merged and c[0] - merged[-1][0] <= refine_tol:
            continue  # coincident refined maximizers: keep the earlier
        merged.append(c)

    entries = []
    for tau, h_val, at_start, at_end in merged:
        root = find_root_before(grid, tau, root_tol)
        entries.append(MaximizerEntry(
            tau=tau, h_value=h_val, at_start=at_start, at_end=at_end,
            root_eta=root.eta, root_is_self=(root.eta == tau and not root.already_unsafe),
            already_unsafe=root.already_unsafe,
        ))
    return MaximizerSet(entries=entries)


def find_root_before(grid: HorizonGrid, tau: float, root_tol: float) -> RootResult:
    """Latest upcrossing zero of h along the path at or before tau.

    Returns tau itself when the path is safe there.  When h(tau) > 0 and no
    sign change exists on [t, tau], the state is already outside the safe
    set; the start time is returned with the already_unsafe flag raised.
    """
    h_tau = grid.h_along(tau)
    if h_tau <= 0:
        return RootResult(eta=tau, already_unsafe=False)

    idx = np.searchsorted(grid.taus, tau + 1e-12)
    knot_taus = np.append(grid.taus[:idx], tau)
    knot_h = np.append(grid.h_values[:idx], h_tau)
    for j in range(len(knot_taus) - 2, -1, -1):
        if knot_h[j] < 0 <= knot_h[j + 1]:
            eta = _bisect_root(grid.h_along, knot_taus[j], knot_taus[j + 1], root_tol)
            return RootResult(eta=eta, already_unsafe=False)
    return RootResult(eta=grid.t, already_unsafe=True)


def _bisect_root(f, lo, hi, root_tol):
    """Bisection on [lo, hi] with f(lo) < 0 <= f(hi), to |f| <= root_tol."""
    flo, fhi = f(lo), f(hi)
    if abs(fhi) <= root_tol:
        return hi
    if abs(flo) <= root_tol:
        return lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if abs(fm) <= root_tol or (hi - lo) < 1e-15 * max(1.0, abs(mid)):
            return mid
        if fm < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
