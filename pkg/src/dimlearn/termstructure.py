"""Zero curves on the ISDA tenor grid, Nelson-Siegel curves and discounting.

Curves store continuously compounded zero rates at twelve fixed tenors.
Rates between nodes are linearly interpolated in yield; outside the grid
the first/last yield is held flat. All times are ACT/365F year fractions.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TENOR_LABELS = ("2W", "1M", "3M", "6M", "1Y", "2Y", "3Y", "5Y", "10Y", "15Y", "20Y", "30Y")
ISDA_TENORS = np.array(
    [14.0 / 365.0, 1.0 / 12.0, 0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 15.0, 20.0, 30.0]
)
ISDA_TENORS.setflags(write=False)

DEFAULT_NS_LAMBDA = 1.37


@dataclass(frozen=True)
class TenorGrid:
    tenors: np.ndarray = field(default_factory=lambda: ISDA_TENORS.copy())

    def __post_init__(self):
        tenors = np.array(self.tenors, dtype=float)
        if tenors.shape != (12,):
            raise ValueError(f"tenor grid needs exactly 12 entries, got {tenors.shape}")
        if np.any(tenors <= 0) or np.any(np.diff(tenors) <= 0):
            raise ValueError("tenors must be positive and strictly increasing")
        tenors.setflags(write=False)
        object.__setattr__(self, "tenors", tenors)

    def __len__(self):
        return len(self.tenors)


ISDA_GRID = TenorGrid()


@dataclass(frozen=True)
class YieldCurve:
    """Zero rates observed at ``anchor_time`` for maturities ``anchor_time + tenor``."""

    yields: np.ndarray
    grid: TenorGrid = ISDA_GRID
    anchor_time: float = 0.0

    def __post_init__(self):
        y = np.array(self.yields, dtype=float)
        if y.shape != self.grid.tenors.shape:
            raise ValueError(f"expected {len(self.grid)} yields, got shape {y.shape}")
        if not np.all(np.isfinite(y)):
            raise ValueError("yields must be finite")
        y.setflags(write=False)
        object.__setattr__(self, "yields", y)

    def bumped(self, k: int, size: float = 1e-4) -> "YieldCurve":
        y = self.yields.copy()
        y[k] += size
        return YieldCurve(y, self.grid, self.anchor_time)

    @classmethod
    def flat(cls, rate: float, anchor_time: float = 0.0) -> "YieldCurve":
        return cls(np.full(12, float(rate)), ISDA_GRID, anchor_time)


@dataclass(frozen=True)
class NelsonSiegelParams:
    beta0: float
    beta1: float
    beta2: float
    lam: float = DEFAULT_NS_LAMBDA

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"Nelson-Siegel time scale must be positive, got {self.lam}")


def _loading(x):
    # (1 - e^{-x}) / x, accurate near 0
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 - 0.5 * x, -np.expm1(-safe) / safe)


def ns_yield(p: NelsonSiegelParams, tau):
    """Nelson-Siegel zero rate with decay ``exp(-tau / lam)``.

    Works elementwise on arrays; ``tau`` must be strictly positive.
    """
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise ValueError("ns_yield requires tau > 0")
    x = tau / p.lam
    slope = _loading(x)
    out = p.beta0 + p.beta1 * slope + p.beta2 * (slope - np.exp(-x))
    return out if out.ndim else float(out)


def ns_instantaneous_forward(p: NelsonSiegelParams, t):
    """Instantaneous forward ``d/dt [t * ns_yield(t)]``; equals beta0 + beta1 at t=0."""
    t = np.asarray(t, dtype=float)
    x = t / p.lam
    e = np.exp(-x)
    out = p.beta0 + p.beta1 * e + p.beta2 * x * e
    return out if out.ndim else float(out)


def ns_log_discount(p: NelsonSiegelParams, t):
    """``log P(0, t) = -t * ns_yield(t)``, with value 0 at t=0."""
    t = np.asarray(t, dtype=float)
    x = t / p.lam
    slope = _loading(x)
    out = -t * (p.beta0 + p.beta1 * slope + p.beta2 * (slope - np.exp(-x)))
    return out if out.ndim else float(out)


def ns_curve(p: NelsonSiegelParams, grid: TenorGrid = ISDA_GRID) -> YieldCurve:
    return YieldCurve(ns_yield(p, grid.tenors), grid, 0.0)


# ---------------------------------------------------------------------------
# interpolation


def interp_plan(tenors: np.ndarray, taus) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Node indices and weights for linear-in-yield interpolation.

    Returns ``(lo, hi, w)`` such that ``y(tau) = Y[lo] * (1 - w) + Y[hi] * w``.
    A tau that hits a node exactly gets ``w = 0`` on that node, so nodes are
    reproduced bit-for-bit; beyond the grid ``lo == hi`` (flat extrapolation).
    """
    tenors = np.asarray(tenors, dtype=float)
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    n = len(tenors)
    hi = np.searchsorted(tenors, taus, side="right")
    lo = np.clip(hi - 1, 0, n - 1)
    hi = np.clip(hi, 0, n - 1)
    w = np.zeros_like(taus)
    inside = (taus > tenors[0]) & (taus < tenors[-1]) & (hi != lo)
    w[inside] = (taus[inside] - tenors[lo[inside]]) / (tenors[hi[inside]] - tenors[lo[inside]])
    below = taus <= tenors[0]
    lo[below] = 0
    hi[below] = 0
    return lo, hi, w


def interp_yields(yields: np.ndarray, plan) -> np.ndarray:
    """Apply an interpolation plan to yields of shape ``(..., 12)``."""
    lo, hi, w = plan
    return yields[..., lo] * (1.0 - w) + yields[..., hi] * w


def interp_yield(curve: YieldCurve, tau):
    tau_arr = np.asarray(tau, dtype=float)
    if np.any(tau_arr <= 0):
        raise ValueError("interp_yield requires tau > 0")
    out = interp_yields(curve.yields, interp_plan(curve.grid.tenors, tau_arr))
    return out.reshape(tau_arr.shape) if tau_arr.ndim else float(out[0])


def discount_factor(curve: YieldCurve, tau):
    """``exp(-y(tau) * tau)``; 1 at ``tau = 0``."""
    tau_arr = np.asarray(tau, dtype=float)
    if np.any(tau_arr < 0):
        raise ValueError("discount_factor requires tau >= 0")
    y = interp_yields(curve.yields, interp_plan(curve.grid.tenors, tau_arr))
    out = np.exp(-y * np.atleast_1d(tau_arr))
    return out.reshape(tau_arr.shape) if tau_arr.ndim else float(out[0])


# ---------------------------------------------------------------------------
# csv


def write_curve_csv(curve: YieldCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tenor_yf", "yield"])
        for t, y in zip(curve.grid.tenors, curve.yields):
            w.writerow([f"{t:.17g}", f"{y:.17g}"])


def read_curve_csv(path, anchor_time: float = 0.0) -> YieldCurve:
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    tenors = np.array([float(r["tenor_yf"]) for r in rows])
    yields = np.array([float(r["yield"]) for r in rows])
    return YieldCurve(yields, TenorGrid(tenors), anchor_time)
