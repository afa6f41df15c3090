"""Market-state sampling and DIM label generation.

A *setting* maps a market-state row to a short-rate model (and, when the
portfolio is quoted as ATM + spread, to the strike spread). Training rows
carry single-path discounted IM trajectories; validation rows carry
many-path means with their standard errors.

On disk a set is one binary file::

    magic "DIMDATA\\0" | u32 version | u32 d | u32 N | u64 K | f64 t_final
    | 16s setting | u64 seed | u32 flags | u32 meta_len | meta (json, utf-8)
    | f64[K*d] states | f64[K*N] labels | f64[K*N] stderr (flag bit 0)

all little-endian, row-major.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import qmc

from .dimengine import SimulationGrid, mc_dim, n_draws, simulate_batch
from .instruments import SwapTemplate, resolve_strikes, templates_use_state_spread
from .ratemodel import HullWhiteModel, VasicekModel
from .simm import SimmConfig, load_simm_config
from .streams import rows_normals
from .termstructure import DEFAULT_NS_LAMBDA, NelsonSiegelParams

log = logging.getLogger(__name__)

MAGIC = b"DIMDATA\0"
VERSION = 1
_HEADER = struct.Struct("<8sIIIQd16sQII")


@dataclass(frozen=True)
class StateBounds:
    names: tuple
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float)
        hi = np.array(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.shape != (len(self.names),):
            raise ValueError("bounds must give one (min, max) pair per state variable")
        if np.any(lo >= hi):
            bad = [n for n, a, b in zip(self.names, lo, hi) if a >= b]
            raise ValueError(f"min must be below max for {bad}")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.names)

    def to_dict(self) -> dict:
        return {n: [float(a), float(b)] for n, a, b in zip(self.names, self.lower, self.upper)}

    @classmethod
    def from_dict(cls, d: dict) -> "StateBounds":
        names = tuple(d)
        return cls(names, [d[n][0] for n in names], [d[n][1] for n in names])

    def drop(self, name: str) -> "StateBounds":
        keep = [i for i, n in enumerate(self.names) if n != name]
        return StateBounds(tuple(self.names[i] for i in keep), self.lower[keep], self.upper[keep])


# theta's lower bound is tabulated as "0.1" in a percent column: read as 0.1%.
VASICEK_BOUNDS = StateBounds(("a", "sigma", "theta", "r0", "delta"),
                             [0.01, 0.005, 0.001, -0.05, -0.001],
                             [0.10, 0.025, 0.05, 0.05, 0.001])
HULL_WHITE_BOUNDS = StateBounds(("a", "sigma", "beta0", "beta1", "beta2", "delta"),
                                [0.01, 0.0005, -0.005, 0.0, 0.0, -0.001],
                                [0.05, 0.015, 0.05, 0.01, 0.01, 0.001])


@dataclass(frozen=True)
class Setting:
    """Model family plus whether the state carries the strike spread ``delta``."""

    model: str
    with_spread: bool = True
    ns_lambda: float = DEFAULT_NS_LAMBDA

    def __post_init__(self):
        if self.model not in ("vasicek", "hull-white"):
            raise ValueError(f"unknown model setting {self.model!r}")

    @property
    def names(self) -> tuple:
        base = ("a", "sigma", "theta", "r0") if self.model == "vasicek" else \
            ("a", "sigma", "beta0", "beta1", "beta2")
        return base + (("delta",) if self.with_spread else ())

    @property
    def tag(self) -> str:
        return self.model if self.with_spread else self.model + "/nodelta"

    def default_bounds(self) -> StateBounds:
        b = VASICEK_BOUNDS if self.model == "vasicek" else HULL_WHITE_BOUNDS
        return b if self.with_spread else b.drop("delta")

    def build_model(self, states: np.ndarray):
        """Model with per-row parameter arrays (or scalars for a single row)."""
        s = np.asarray(states, dtype=float)
        col = (lambda j: s[..., j]) if s.ndim > 1 else (lambda j: float(s[j]))
        if self.model == "vasicek":
            return VasicekModel(col(0), col(1), col(2), col(3))
        return HullWhiteModel(col(0), col(1),
                              NelsonSiegelParams(col(2), col(3), col(4), self.ns_lambda))

    def spread(self, states: np.ndarray):
        if not self.with_spread:
            return None
        s = np.asarray(states, dtype=float)
        return s[..., -1] if s.ndim > 1 else float(s[-1])

    def portfolio(self, states, templates: Sequence[SwapTemplate]):
        """Model and strike-resolved portfolio for one row or a batch of rows."""
        model = self.build_model(states)
        x0 = np.asarray(model.x0(), dtype=float)
        y0 = model.yields_grid(0.0, model.short_rate(0.0, x0))
        spread = self.spread(states)
        if spread is None and templates_use_state_spread(templates):
            raise ValueError("portfolio strikes use the state spread but the setting has none")
        return model, resolve_strikes(templates, y0, spread)


def lhs_sample(bounds: StateBounds, k: int, seed: int) -> np.ndarray:
    """Latin hypercube: each dimension hits each of ``k`` equal strata once."""
    if k < 1:
        raise ValueError("need at least one sample")
    sampler = qmc.LatinHypercube(d=bounds.dim, scramble=True, seed=np.random.default_rng([seed, 7]))
    return qmc.scale(sampler.random(k), bounds.lower, bounds.upper)


@dataclass
class TrainingSet:
    states: np.ndarray
    labels: np.ndarray
    metadata: dict = field(default_factory=dict)
    stderr: np.ndarray | None = None

    def __post_init__(self):
        if len(self.states) != len(self.labels):
            raise ValueError("states and labels must have the same number of rows")

    def __len__(self):
        return len(self.states)

    @property
    def d(self) -> int:
        return self.states.shape[1]

    @property
    def n_times(self) -> int:
        return self.labels.shape[1]

    @property
    def times(self) -> np.ndarray:
        g = self.metadata["grid"]
        return SimulationGrid(g["n_times"], g["t_final"]).times

    def max_stderr(self) -> float:
        return float(np.max(self.stderr)) if self.stderr is not None and self.stderr.size else 0.0

    def subset(self, rows) -> "TrainingSet":
        rows = np.asarray(rows)
        meta = dict(self.metadata, subset_rows=len(rows))
        err = self.stderr[rows] if self.stderr is not None else None
        return TrainingSet(self.states[rows], self.labels[rows], meta, err)

    # -- io -----------------------------------------------------------------
    def save(self, path) -> None:
        meta = json.dumps(self.metadata, sort_keys=True, separators=(",", ":")).encode()
        k, d = self.states.shape
        n = self.labels.shape[1]
        tag = self.metadata.get("setting", "").encode()[:16]
        flags = 1 if self.stderr is not None else 0
        head = _HEADER.pack(MAGIC, VERSION, d, n, k, float(self.metadata["grid"]["t_final"]),
                            tag, int(self.metadata.get("seed", 0)), flags, len(meta))
        with open(path, "wb") as fh:
            fh.write(head)
            fh.write(meta)
            fh.write(np.ascontiguousarray(self.states, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.labels, dtype="<f8").tobytes())
            if self.stderr is not None:
                fh.write(np.ascontiguousarray(self.stderr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "TrainingSet":
        raw = Path(path).read_bytes()
        magic, version, d, n, k, _t_final, _tag, _seed, flags, mlen = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise ValueError(f"{path} is not a DIM dataset file")
        if version != VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        off = _HEADER.size
        meta = json.loads(raw[off:off + mlen].decode())
        off += mlen

        def block(rows, cols):
            nonlocal off
            arr = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
            off += rows * cols * 8
            return arr.astype(np.float64)

        states = block(k, d)
        labels = block(k, n)
        err = block(k, n) if flags & 1 else None
        return cls(states, labels, meta, err)

    def to_csv(self, path) -> None:
        names = self.metadata.get("names") or [f"x{j}" for j in range(self.d)]
        cols = list(names) + [f"t{i + 1}" for i in range(self.n_times)]
        data = np.hstack([self.states, self.labels])
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def portfolio_digest(templates: Sequence[SwapTemplate]) -> str:
    blob = json.dumps([t.to_dict() for t in templates], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _metadata(setting, bounds, grid, seed, m, templates, simm, kind, skipped=()):
    return {"kind": kind, "setting": setting.tag, "model": setting.model,
            "with_spread": setting.with_spread, "ns_lambda": setting.ns_lambda,
            "names": list(setting.names), "grid": grid.to_dict(), "seed": int(seed),
            "paths_per_state": int(m), "bounds": bounds.to_dict() if bounds else None,
            "simm": simm.digest(), "simm_version": simm.version,
            "portfolio": portfolio_digest(templates),
            "portfolio_terms": [t.to_dict() for t in templates],
            "skipped_rows": [int(r) for r in skipped]}


def _label_chunk(args):
    setting, states, rows, templates, grid, seed, simm = args
    model, pf = setting.portfolio(states, templates)
    z = rows_normals(seed, rows, n_draws(pf, grid))
    return simulate_batch(model, pf, grid, z, simm)


def single_path_labels(setting: Setting, states: np.ndarray, templates, grid: SimulationGrid,
                       seed: int, simm: SimmConfig | None = None, rows=None,
                       chunk: int = 4096, workers: int = 1):
    """One discounted-IM path per row, keyed by ``(seed, row index)``.

    Returns ``(labels, skipped_rows)``; failing rows are dropped, not resampled.
    """
    simm = simm or load_simm_config()
    states = np.atleast_2d(np.asarray(states, dtype=float))
    rows = np.arange(len(states)) if rows is None else np.asarray(rows)
    starts = range(0, len(states), chunk)
    tasks = [(setting, states[s:s + chunk], rows[s:s + chunk], templates, grid, seed, simm)
             for s in starts]
    if workers > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            futures = [ex.submit(_label_chunk, t) for t in tasks]
            parts = [_try(f.result, t) for f, t in zip(futures, tasks)]
    else:
        parts = [_try(lambda t=t: _label_chunk(t), t) for t in tasks]
    labels = np.vstack([p[0] for p in parts]) if parts else np.zeros((0, grid.n_times))
    ok = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, bool)
    return labels[ok], rows[~ok].tolist()


def _try(fn, task):
    try:
        out = fn()
        return out, np.ones(len(out), bool)
    except Exception:
        # fall back to rows one by one to isolate the failures
        setting, states, rows, templates, grid, seed, simm = task
        out = np.zeros((len(rows), grid.n_times))
        ok = np.ones(len(rows), bool)
        for i in range(len(rows)):
            try:
                out[i] = _label_chunk((setting, states[i:i + 1], rows[i:i + 1],
                                       templates, grid, seed, simm))[0]
            except Exception as exc:
                log.warning("row %d skipped: %s", rows[i], exc)
                ok[i] = False
        return out, ok


def generate_training(setting: Setting, bounds: StateBounds, k: int, templates, grid,
                      seed: int, simm: SimmConfig | None = None, workers: int = 1,
                      chunk: int = 4096) -> TrainingSet:
    """LHS states with single-path noisy labels."""
    simm = simm or load_simm_config()
    states = lhs_sample(bounds, k, seed)
    labels, skipped = single_path_labels(setting, states, templates, grid, seed, simm,
                                         chunk=chunk, workers=workers)
    keep = np.setdiff1d(np.arange(k), skipped)
    meta = _metadata(setting, bounds, grid, seed, 1, templates, simm, "training", skipped)
    return TrainingSet(states[keep], labels, meta)


def reference_labels(setting: Setting, states: np.ndarray, templates, grid, m: int, seed: int,
                     simm: SimmConfig | None = None, workers: int = 1, row_offset: int = 0):
    """Many-path DIM means and standard errors for explicit states."""
    simm = simm or load_simm_config()
    states = np.atleast_2d(states)
    vals = np.zeros((len(states), grid.n_times))
    errs = np.zeros_like(vals)
    for i, s in enumerate(states):
        model, pf = setting.portfolio(s, templates)
        traj = mc_dim(model, pf, grid, m, seed, state_index=row_offset + i, simm=simm,
                      workers=workers)
        vals[i], errs[i] = traj.values, traj.stderr
    return vals, errs


def generate_validation(setting: Setting, bounds: StateBounds, k: int, m: int, templates, grid,
                        seed: int, simm: SimmConfig | None = None,
                        workers: int = 1) -> TrainingSet:
    """LHS states with ``m``-path ground-truth trajectories and per-point stderr."""
    simm = simm or load_simm_config()
    states = lhs_sample(bounds, k, seed)
    vals, errs = reference_labels(setting, states, templates, grid, m, seed, simm, workers)
    meta = _metadata(setting, bounds, grid, seed, m, templates, simm, "validation")
    meta["max_stderr"] = float(errs.max()) if errs.size else 0.0
    return TrainingSet(states, vals, meta, errs)


def pinned_state_labels(setting: Setting, state, k: int, templates, grid, seed: int,
                        simm: SimmConfig | None = None) -> np.ndarray:
    """``k`` independent single-path labels all drawn at one market state."""
    states = np.repeat(np.atleast_2d(np.asarray(state, dtype=float)), k, axis=0)
    labels, skipped = single_path_labels(setting, states, templates, grid, seed, simm)
    if skipped:
        raise RuntimeError(f"{len(skipped)} rows failed at the pinned state")
    return labels
