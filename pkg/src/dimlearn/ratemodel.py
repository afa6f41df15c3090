"""One-factor Gaussian short-rate models: Vasicek and Hull-White.

Both are written as an Ornstein-Uhlenbeck state ``dx = -a x dt + sigma dW``
plus a deterministic shift, ``r(t) = x(t) + shift(t)``. Transitions are the
exact Gaussian OU law, so the simulation carries no time-step bias.

Parameters may be floats or numpy arrays: the vectorised methods broadcast a
parameter array of shape ``(P,)`` against path arrays of shape ``(P,)``, which
is how a batch of different market states is simulated in one pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .termstructure import (
    ISDA_GRID,
    NelsonSiegelParams,
    TenorGrid,
    YieldCurve,
    ns_instantaneous_forward,
    ns_log_discount,
)


@dataclass(frozen=True)
class ShortRateState:
    t: float
    x: float
    r: float


def _col(v):
    v = np.asarray(v, dtype=float)
    return v[..., None] if v.ndim else v


def _c_factor(a, tau):
    # (1 - e^{-a tau}) / a
    return -np.expm1(-a * tau) / a


class _OUModel:
    a: float
    sigma: float

    def _check(self):
        if np.any(np.asarray(self.a) <= 0):
            raise ValueError("mean reversion speed a must be > 0")
        if np.any(np.asarray(self.sigma) < 0):
            raise ValueError("volatility sigma must be >= 0")

    # -- transition ---------------------------------------------------------
    def transition(self, h: float):
        """Return ``(decay, std)`` with ``x' = decay * x + std * z``."""
        decay = np.exp(-self.a * h)
        std = self.sigma * np.sqrt(-np.expm1(-2.0 * self.a * h) / (2.0 * self.a))
        return decay, std

    def step_x(self, x, h: float, z):
        decay, std = self.transition(h)
        return decay * x + std * z

    def short_rate(self, t: float, x):
        return x + self.shift(t)

    def initial_state(self) -> ShortRateState:
        x0 = self.x0()
        return ShortRateState(0.0, x0, self.short_rate(0.0, x0))

    # -- curves -------------------------------------------------------------
    def log_zcb_grid(self, t: float, r, taus: np.ndarray) -> np.ndarray:
        """``log P(t, t + tau)`` for rates ``r`` of shape ``(P,)`` -> ``(P, len(taus))``."""
        return self._log_zcb(t, _col(r), np.asarray(taus, dtype=float), _col)

    def yields_grid(self, t: float, r, taus: np.ndarray = ISDA_GRID.tenors) -> np.ndarray:
        taus = np.asarray(taus, dtype=float)
        return -self.log_zcb_grid(t, r, taus) / taus


@dataclass(frozen=True)
class VasicekModel(_OUModel):
    """``dr = a (theta - r) dt + sigma dW`` started at ``r0``."""

    a: float
    sigma: float
    theta: float
    r0: float

    def __post_init__(self):
        self._check()

    def shift(self, t):
        return self.theta

    def x0(self):
        return self.r0 - self.theta

    def _log_zcb(self, t, r, tau, col):
        a, s, th = col(self.a), col(self.sigma), col(self.theta)
        c = _c_factor(a, tau)
        log_b = (th - s * s / (2.0 * a * a)) * (c - tau) - s * s * c * c / (4.0 * a)
        return log_b - c * r


@dataclass(frozen=True)
class HullWhiteModel(_OUModel):
    """Hull-White fitted to a Nelson-Siegel initial curve; ``x0 = 0``.

    The shift ``f(0,t) + sigma^2/(2a^2) (1 - e^{-a t})^2`` is analytic in the
    Nelson-Siegel forward, so no numerical differentiation is needed.
    """

    a: float
    sigma: float
    ns: NelsonSiegelParams

    def __post_init__(self):
        self._check()

    def shift(self, t):
        a, s = self.a, self.sigma
        g = -np.expm1(-a * t) / a
        return ns_instantaneous_forward(self.ns, t) + 0.5 * s * s * g * g

    def x0(self):
        return 0.0 * np.asarray(self.a) if np.ndim(self.a) else 0.0

    def _log_zcb(self, t, r, tau, col):
        a, s = col(self.a), col(self.sigma)
        ns = self.ns
        ns_c = NelsonSiegelParams(col(ns.beta0), col(ns.beta1), col(ns.beta2), ns.lam) \
            if np.ndim(ns.beta0) else ns
        c = _c_factor(a, tau)
        fwd = ns_instantaneous_forward(ns_c, t)
        log_ratio = ns_log_discount(ns_c, t + tau) - ns_log_discount(ns_c, t)
        return log_ratio + c * fwd - s * s / (4.0 * a) * c * c * (-np.expm1(-2.0 * a * t)) - c * r


# ---------------------------------------------------------------------------
# scalar API


def evolve(model, state: ShortRateState, h: float, z: float) -> ShortRateState:
    """Exact OU transition over ``h`` driven by the standard normal draw ``z``."""
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    if not np.isfinite(z):
        raise ValueError("normal draw must be finite")
    t = state.t + h
    x = model.step_x(state.x, h, z)
    return ShortRateState(t, x, model.short_rate(t, x))


def zcb_price(model, state: ShortRateState, T: float) -> float:
    if T < state.t:
        raise ValueError(f"bond maturity {T} precedes state time {state.t}")
    if T == state.t:
        return 1.0
    return float(np.exp(model.log_zcb_grid(state.t, state.r, np.array([T - state.t]))[0]))


def model_yields(model, state: ShortRateState, grid: TenorGrid = ISDA_GRID) -> YieldCurve:
    return YieldCurve(model.yields_grid(state.t, state.r, grid.tenors), grid, state.t)
