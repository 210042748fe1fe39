"""Path functions: dynamics-consistent forecasts p(tau; t, x) with sensitivities.

Two implementations: a closed form for the double-integrator car pair, and a
fixed-step RK4 flow for arbitrary dynamics under a nominal control law.  Both
expose the state forecast, its tau-derivative, and the sensitivity of the
forecast to the initial state, which the barrier derivative formulas consume.
"""

from __future__ import annotations

import math

import numpy as np

from pcbf.core import DynamicsModel, PropagationError, ConfigurationError, finite_diff_jacobian


class AnalyticCarPath:
    """Closed-form path for two lane-following double integrators.

    Each car tracks its target speed v_i through the proportional law
    mu_i = k (v_i - zdot_i); the resulting flow is an exact exponential.
    State layout: [z1, zdot1, z2, zdot2].
    """

    def __init__(self, k: float, v: np.ndarray):
        if k <= 0:
            raise ConfigurationError(f"car path gain k must be positive, got {k}")
        self.k = float(k)
        self.v = np.asarray(v, dtype=float)
        if self.v.shape != (2,):
            raise ConfigurationError("v must hold one target speed per car")

    def evaluate(self, tau, t, x):
        return self.evaluate_many(np.array([tau]), t, x)[0]

    def evaluate_many(self, taus, t, x):
        taus = np.asarray(taus, dtype=float)
        dt = taus - t
        e = np.exp(-self.k * dt)
        out = np.empty(taus.shape + (4,))
        for i in range(2):
            z, zdot = x[2 * i], x[2 * i + 1]
            v = self.v[i]
            out[..., 2 * i] = z + v * dt + (zdot - v) / self.k * (1.0 - e)
            out[..., 2 * i + 1] = v + (zdot - v) * e
        # the forecast at tau = t is the current state, exactly
        at_t = dt == 0.0
        if np.any(at_t):
            out[at_t] = x
        return out

    def tau_derivative(self, tau, t, x):
        dt = tau - t
        e = math.exp(-self.k * dt)
        d = np.empty(4)
        for i in range(2):
            zdot = x[2 * i + 1]
            v = self.v[i]
            d[2 * i] = v + (zdot - v) * e
            d[2 * i + 1] = -self.k * (zdot - v) * e
        return d

    def state_sensitivity(self, tau, t, x):
        dt = tau - t
        e = math.exp(-self.k * dt)
        phi = np.zeros((4, 4))
        block = np.array([[1.0, (1.0 - e) / self.k], [0.0, e]])
        phi[0:2, 0:2] = block
        phi[2:4, 2:4] = block
        return phi

    def nominal_control(self, t, x):
        return self.k * (self.v - x[1::2])


class _Propagation:
    """One cached flow: knot states every `step` seconds from (t0, x0).

    Sensitivity knots are co-integrated lazily on first request.
    """

    def __init__(self, path: "OdePath", t0: float, x0: np.ndarray, states=None):
        self.path = path
        self.t0 = float(t0)
        self.x0 = np.asarray(x0, dtype=float)
        self.states = [self.x0] if states is None else list(states)
        self.phis = [np.eye(self.x0.size)]

    def _knot_time(self, k: int) -> float:
        return self.t0 + k * self.path.step

    def _ensure_states(self, k: int):
        while len(self.states) <= k:
            j = len(self.states) - 1
            tj = self._knot_time(j)
            xn = self.path._rk4_state(tj, self.states[j], self.path.step)
            if not np.all(np.isfinite(xn)):
                raise PropagationError(
                    f"non-finite state while propagating to tau={tj + self.path.step}",
                    tau=tj + self.path.step,
                )
            self.states.append(xn)

    def _ensure_phis(self, k: int):
        self._ensure_states(k)
        while len(self.phis) <= k:
            j = len(self.phis) - 1
            tj = self._knot_time(j)
            _, phin = self.path._rk4_joint(tj, self.states[j], self.phis[j], self.path.step)
            self.phis.append(phin)

    def _locate(self, tau: float):
        rel = (tau - self.t0) / self.path.step
        k = int(math.floor(rel + 1e-9))
        rem = tau - self._knot_time(k)
        if rem < 1e-12 * max(1.0, abs(tau)):
            rem = 0.0
        return k, rem

    def state_at(self, tau: float) -> np.ndarray:
        k, rem = self._locate(tau)
        self._ensure_states(k)
        if rem == 0.0:
            return self.states[k]
        x = self.path._rk4_state(self._knot_time(k), self.states[k], rem)
        if not np.all(np.isfinite(x)):
            raise PropagationError(f"non-finite state at tau={tau}", tau=tau)
        return x

    def phi_at(self, tau: float) -> np.ndarray:
        k, rem = self._locate(tau)
        self._ensure_phis(k)
        if rem == 0.0:
            return self.phis[k]
        _, phi = self.path._rk4_joint(self._knot_time(k), self.states[k], self.phis[k], rem)
        return phi


class OdePath:
    """Path function defined by RK4 integration of xdot = f + g mu.

    The state sensitivity dp/dx is co-integrated through the variational
    equation Phidot = A(tau) Phi with A the central-difference Jacobian of
    the closed-loop vector field.  Flows are cached per (t, x) because the
    horizon scan and the derivative formulas re-query the same trajectory.
    """

    _CACHE_MAX = 64

    def __init__(self, model: DynamicsModel, mu, step: float, jacobian=None):
        if step <= 0:
            raise ConfigurationError(f"integration step must be positive, got {step}")
        self.model = model
        self.mu = mu
        self.step = float(step)
        self._jac = jacobian  # analytic closed-loop Jacobian, else central FD
        self._cache: dict = {}

    # closed-loop field, broadcasting over leading batch axes of x
    def _field(self, t, x):
        u = self.mu(t, x)
        f = self.model.drift(t, x)
        if np.any(u):
            g = self.model.input_matrix(t, x)
            return f + np.einsum("...ij,...j->...i", g, u)
        return f

    def _rk4_state(self, t, x, dt):
        k1 = self._field(t, x)
        k2 = self._field(t + dt / 2, x + dt / 2 * k1)
        k3 = self._field(t + dt / 2, x + dt / 2 * k2)
        k4 = self._field(t + dt, x + dt * k3)
        return x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    def _jacobian(self, t, x):
        if self._jac is not None:
            return self._jac(t, x)
        return finite_diff_jacobian(lambda y: self._field(t, y), x)

    def _rk4_joint(self, t, x, phi, dt):
        k1 = self._field(t, x)
        a1 = self._jacobian(t, x)
        p1 = a1 @ phi
        x2 = x + dt / 2 * k1
        k2 = self._field(t + dt / 2, x2)
        a2 = self._jacobian(t + dt / 2, x2)
        p2 = a2 @ (phi + dt / 2 * p1)
        x3 = x + dt / 2 * k2
        k3 = self._field(t + dt / 2, x3)
        a3 = self._jacobian(t + dt / 2, x3)
        p3 = a3 @ (phi + dt / 2 * p2)
        x4 = x + dt * k3
        k4 = self._field(t + dt, x4)
        a4 = self._jacobian(t + dt, x4)
        p4 = a4 @ (phi + dt * p3)
        xn = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        phin = phi + dt / 6 * (p1 + 2 * p2 + 2 * p3 + p4)
        return xn, phin

    def _key(self, t, x):
        # one scale for the whole vector: per-component scaling would map
        # every component with |x_i| > 1 to the same quantized value
        scale = max(1.0, float(np.max(np.abs(x))))
        q = np.round(np.asarray(x, dtype=float) / (1e-12 * scale)).astype(np.int64)
        return (float(t), q.tobytes())

    def _propagation(self, t, x) -> _Propagation:
        key = self._key(t, x)
        prop = self._cache.get(key)
        if prop is None:
            prop = _Propagation(self, t, np.asarray(x, dtype=float))
            if len(self._cache) >= self._CACHE_MAX:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = prop
        return prop

    def _check_tau(self, tau, t):
        if tau < t - 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"tau={tau} precedes t={t}")

    def evaluate(self, tau, t, x):
        self._check_tau(tau, t)
        return self._propagation(t, x).state_at(max(tau, t))

    def evaluate_many(self, taus, t, x):
        prop = self._propagation(t, x)
        out = np.empty((len(taus), np.asarray(x).size))
        for i, tau in enumerate(taus):
            self._check_tau(tau, t)
            out[i] = prop.state_at(max(tau, t))
        return out

    def tau_derivative(self, tau, t, x):
        return self._field(tau, self.evaluate(tau, t, x))

    def state_sensitivity(self, tau, t, x):
        self._check_tau(tau, t)
        return self._propagation(t, x).phi_at(max(tau, t))

    def nominal_control(self, t, x):
        return self.mu(t, x)

    def clear_cache(self):
        self._cache.clear()

    def preseed(self, t, X, tau_max):
        """Batch-propagate initial states X (B,n) to tau_max and seed the cache.

        All rows advance with the same fixed step, so one vectorized RK4 pass
        replaces B sequential ones.  Requires drift/input_matrix/mu to
        broadcast over the batch axis.
        """
        X = np.asarray(X, dtype=float)
        n_steps = int(math.ceil((tau_max - t) / self.step - 1e-9))
        knots = np.empty((n_steps + 1,) + X.shape)
        knots[0] = X
        cur = X
        for j in range(n_steps):
            cur = self._rk4_state(t + j * self.step, cur, self.step)
            knots[j + 1] = cur
        if not np.all(np.isfinite(knots)):
            raise PropagationError("non-finite state in batch propagation")
        for b in range(X.shape[0]):
            key = self._key(t, X[b])
            if key not in self._cache:
                self._cache[key] = _Propagation(self, t, X[b], states=knots[:, b])
        return knots
