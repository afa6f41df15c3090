"""SIMM interest-rate delta margin from 1bp bump-and-reprice PV01s.

With no optionality in the book the whole IM collapses to the IR delta
margin: weighted sensitivities at the twelve ISDA tenors aggregated with a
tenor correlation matrix,

    WS_k = RW_k * s_k * CR,    IM = sqrt(sum_kl rho_kl WS_k WS_l).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from .termstructure import ISDA_TENORS, YieldCurve

BUMP = 1e-4
PSD_TOL = -1e-10


@dataclass(frozen=True)
class SimmConfig:
    risk_weights: np.ndarray
    correlations: np.ndarray
    concentration_factor: float = 1.0
    version: str = "custom"

    def __post_init__(self):
        rw = np.array(self.risk_weights, dtype=float)
        rho = np.array(self.correlations, dtype=float)
        if rw.shape != (12,) or np.any(rw <= 0):
            raise ValueError("need 12 positive risk weights")
        if rho.shape != (12, 12):
            raise ValueError("correlation matrix must be 12x12")
        if not np.array_equal(rho, rho.T):
            raise ValueError("correlation matrix must be symmetric")
        if np.any(np.diag(rho) != 1.0) or np.any(np.abs(rho) > 1.0):
            raise ValueError("correlations need a unit diagonal and entries in [-1, 1]")
        if np.linalg.eigvalsh(rho).min() < PSD_TOL:
            raise ValueError("correlation matrix is not positive semidefinite")
        if not self.concentration_factor > 0:
            raise ValueError("concentration factor must be positive")
        rw.setflags(write=False)
        rho.setflags(write=False)
        object.__setattr__(self, "risk_weights", rw)
        object.__setattr__(self, "correlations", rho)

    def to_dict(self) -> dict:
        return {"version": self.version, "risk_weights": self.risk_weights.tolist(),
                "correlations": self.correlations.tolist(),
                "concentration_factor": self.concentration_factor}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "SimmConfig":
        return cls(d["risk_weights"], d["correlations"],
                   float(d.get("concentration_factor", 1.0)), str(d.get("version", "custom")))


def load_simm_config(path=None) -> SimmConfig:
    """Load a parameter file; ``None`` gives the packaged default."""
    if path is None:
        text = resources.files("dimlearn").joinpath("data/simm_ir_default.json").read_text()
    else:
        text = Path(path).read_text()
    return SimmConfig.from_dict(json.loads(text))


def identity_config(risk_weights=None) -> SimmConfig:
    rw = np.ones(12) if risk_weights is None else risk_weights
    return SimmConfig(rw, np.eye(12), 1.0, "identity")


def delta_margin(s, cfg: SimmConfig):
    """Delta margin for sensitivities ``s`` of shape ``(..., 12)``.

    The quadratic form is accumulated with elementwise operations only, so a
    row's margin does not depend on how many rows are evaluated with it.
    """
    s = np.asarray(s, dtype=float)
    ws = s * (cfg.risk_weights * cfg.concentration_factor)
    rho = cfg.correlations
    q = np.zeros(ws.shape[:-1])
    for k in range(12):
        inner = ws[..., 0] * rho[k, 0]
        for l in range(1, 12):
            inner = inner + ws[..., l] * rho[k, l]
        q = q + ws[..., k] * inner
    out = np.sqrt(np.maximum(q, 0.0))
    return out if out.ndim else float(out)


def bumped_yields(yields: np.ndarray, size: float = BUMP) -> np.ndarray:
    """Stack base and the 12 single-node bumps: ``(..., 12)`` -> ``(..., 13, 12)``."""
    yields = np.asarray(yields, dtype=float)
    out = np.repeat(yields[..., None, :], 13, axis=-2)
    idx = np.arange(12)
    out[..., idx + 1, idx] += size
    return out


def pv01_sensitivities(pricer: Callable[[YieldCurve], float], curve: YieldCurve,
                       size: float = BUMP) -> np.ndarray:
    """``s_k = V(Y_k + 1bp) - V(Y)``, one repricing per tenor on a copied curve."""
    base = pricer(curve)
    out = np.empty(len(curve.yields))
    for k in range(len(curve.yields)):
        try:
            out[k] = pricer(curve.bumped(k, size)) - base
        except Exception as exc:
            raise RuntimeError(f"repricing failed for bump at tenor index {k}") from exc
    return out


def allocate_to_isda(tenors, sensitivities, isda_tenors=ISDA_TENORS) -> np.ndarray:
    """Split sensitivities at arbitrary tenors linearly onto the ISDA vertices.

    A tenor between two vertices goes to both in proportion to proximity;
    tenors outside the grid go wholly to the nearest end vertex. The total is
    preserved.
    """
    tenors = np.atleast_1d(np.asarray(tenors, dtype=float))
    sens = np.atleast_1d(np.asarray(sensitivities, dtype=float))
    out = np.zeros(len(isda_tenors))
    for t, s in zip(tenors, sens):
        if t <= isda_tenors[0]:
            out[0] += s
        elif t >= isda_tenors[-1]:
            out[-1] += s
        else:
            hi = int(np.searchsorted(isda_tenors, t))
            lo = hi - 1
            w = (t - isda_tenors[lo]) / (isda_tenors[hi] - isda_tenors[lo])
            out[lo] += s * (1.0 - w)
            out[hi] += s * w
    return out
