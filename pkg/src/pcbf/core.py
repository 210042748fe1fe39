"""System abstractions: dynamics, constraint function, margin and class-K functions.

The control-affine system is xdot = f(t,x) + g(t,x) u.  The safe set is the
zero-sublevel set of a constraint function h(t,x); the margin function trades
predicted violation magnitude against the time remaining to react, and the
class-K function sets how hard the barrier condition pushes back near the
boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ConfigurationError(ValueError):
    """Bad scenario or solver configuration."""


class PropagationError(RuntimeError):
    """Numerical propagation produced a non-finite state."""

    def __init__(self, message: str, tau: float | None = None):
        super().__init__(message)
        self.tau = tau


class TangentialCrossingError(RuntimeError):
    """Root of h along the path is not transversal; sensitivity undefined."""


class DegenerateMaximizerError(RuntimeError):
    """Flat maximum: implicit-function denominator vanished."""


class InternalConsistencyError(RuntimeError):
    """A structurally impossible combination was produced."""


class DynamicsModel:
    """Control-affine dynamics xdot = f(t,x) + g(t,x) u.

    Subclasses provide drift and input_matrix.  Both must broadcast over a
    leading batch axis of x when possible; the batched path propagation
    relies on it.
    """

    n: int
    m: int

    def drift(self, t, x):
        raise NotImplementedError

    def input_matrix(self, t, x):
        raise NotImplementedError


class ConstraintFunction:
    """Scalar constraint h(t,x); the safe set is {x | h(t,x) <= 0}.

    value must broadcast over leading batch axes of t and x.  Gradients are
    supplied analytically per scenario and verified against finite
    differences in tests.
    """

    h_max: float

    def value(self, t, x):
        raise NotImplementedError

    def grad_t(self, t, x) -> float:
        raise NotImplementedError

    def grad_x(self, t, x) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class MarginFunction:
    """Nondecreasing margin m with m(0)=0 and m(T) >= h_max."""

    h_max: float
    T: float
    value: Callable[[float], float]
    derivative: Callable[[float], float]


@dataclass(frozen=True)
class ClassKFunction:
    """Strictly increasing function through the origin."""

    value: Callable[[float], float]


def make_default_margin(h_max: float, T: float) -> MarginFunction:
    """Quadratic margin m(lam) = h_max (lam/T)^2.

    A linear margin has constant positive slope, which no continuous class-K
    function can dominate as lam -> 0; the quadratic admits the square-root
    class-K companion built by make_compatible_alpha.
    """
    if not (h_max > 0):
        raise ConfigurationError(f"h_max must be positive, got {h_max}")
    if not (T > 0):
        raise ConfigurationError(f"T must be positive, got {T}")

    def value(lam):
        return h_max * (lam / T) ** 2

    def derivative(lam):
        return 2.0 * h_max * lam / T**2

    return MarginFunction(h_max=h_max, T=T, value=value, derivative=derivative)


def make_compatible_alpha(margin: MarginFunction, gamma: float) -> ClassKFunction:
    """Class-K function alpha satisfying alpha(m(lam)) >= m'(lam) on [0,T]
    and alpha(m(T)) >= gamma.

    alpha(s) = sign(s) max( (2/T) sqrt(h_max |s|), (gamma/m(T)) |s| ).
    With the quadratic margin the first branch meets alpha(m(lam)) = m'(lam)
    with equality; the second branch covers the gamma bound.
    """
    if gamma < 0:
        raise ConfigurationError(f"gamma must be nonnegative, got {gamma}")
    h_max, T = margin.h_max, margin.T
    m_T = margin.value(T)
    slope = gamma / m_T if m_T > 0 else 0.0

    def value(s):
        a = abs(s)
        return float(np.sign(s)) * max((2.0 / T) * np.sqrt(h_max * a), slope * a)

    return ClassKFunction(value=value)


def finite_diff_jacobian(func, x, base_step=1e-6, rel_step=1e-7):
    """Central-difference Jacobian of func: R^n -> R^k, column by column.

    Per-component step max(base_step, rel_step * |x_i|).
    """
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(np.asarray(func(x), dtype=float))
    jac = np.empty((f0.size, x.size))
    for i in range(x.size):
        d = max(base_step, rel_step * abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += d
        xm[i] -= d
        jac[:, i] = (np.atleast_1d(func(xp)) - np.atleast_1d(func(xm))) / (2.0 * d)
    return jac
