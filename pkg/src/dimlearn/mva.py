"""Margin valuation adjustment from a DIM trajectory.

With constant default intensities the funding spread is

    f(s) = ((1 - R_B) * lambda_B - s_I) * exp(-(lambda_B + lambda_C) * (s - t0))

and the MVA is its right-endpoint Riemann sum against DIM on the monitoring grid.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class FundingParams:
    recovery: float = 0.4
    lambda_b: float = 1.67e-2
    lambda_c: float = 0.0
    im_spread: float = 0.0
    t0: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.recovery <= 1.0:
            raise ValueError("recovery must lie in [0, 1]")
        if self.lambda_b < 0 or self.lambda_c < 0:
            raise ValueError("default intensities must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def funding_spread(p: FundingParams, s):
    s = np.asarray(s, dtype=float)
    if np.any(s <= p.t0):
        raise ValueError("funding spread is defined only after t0")
    f = ((1.0 - p.recovery) * p.lambda_b - p.im_spread) * np.exp(-(p.lambda_b + p.lambda_c) * (s - p.t0))
    return f if f.ndim else float(f)


def mva_quadrature(dim_values, grid, p: FundingParams) -> float:
    """``sum_i f(t_i) * DIM_i * h`` over the monitoring times of ``grid``.

    ``dim_values`` may be a :class:`DimTrajectory` or an array of length N
    (or ``(..., N)`` for several trajectories at once).
    """
    vals = np.asarray(getattr(dim_values, "values", dim_values), dtype=float)
    times = getattr(dim_values, "times", None)
    if vals.shape[-1] != grid.n_times:
        raise ValueError(f"DIM has {vals.shape[-1]} points, grid has {grid.n_times}")
    if times is not None and not np.allclose(times, grid.times, rtol=0, atol=1e-12):
        raise ValueError("DIM trajectory times do not match the grid")
    out = np.sum(funding_spread(p, grid.times) * vals, axis=-1) * grid.h
    return out if np.ndim(out) else float(out)


def relative_errors(predicted, reference) -> np.ndarray:
    """``|pred - ref| / |ref|`` elementwise."""
    predicted, reference = np.asarray(predicted, float), np.asarray(reference, float)
    return np.abs(predicted - reference) / np.abs(reference)
