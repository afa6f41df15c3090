"""Nested Monte Carlo for dynamic initial margin.

Along each path and at each monitoring time the short rate is advanced with
the exact OU transition, the model curve is read off at the ISDA tenors, the
portfolio is repriced on the base curve and on the 12 one-basis-point bumps,
and the SIMM delta margin of the resulting PV01 vector is discounted back to
t0 with the left-point sum ``exp(-h * sum_{l<i} r(t_l))``.

Float resets falling between monitoring times are visited as extra events so
the fixing is read off the reset-time curve; every event consumes one normal.

Everything is vectorised over paths. Only elementwise array operations touch
per-path data, so a path's numbers never depend on which batch it ran in;
reductions over paths go through fixed-size blocks and an exact ``fsum``,
which makes the estimator independent of chunking and worker count.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .instruments import TIME_EPS, FixingStore, Portfolio, PricingPlan, price_portfolio
from .ratemodel import model_yields
from .simm import SimmConfig, bumped_yields, delta_margin, load_simm_config, pv01_sensitivities
from .streams import path_normals

BLOCK = 1024


@dataclass(frozen=True)
class SimulationGrid:
    """Monitoring times ``t_i = i * T / N`` for ``i = 1..N`` (t0 excluded)."""

    n_times: int
    t_final: float

    def __post_init__(self):
        if self.n_times < 1:
            raise ValueError("need at least one monitoring time")
        if not self.t_final > 0:
            raise ValueError("final time must be positive")

    @property
    def h(self) -> float:
        return self.t_final / self.n_times

    @property
    def times(self) -> np.ndarray:
        return np.arange(1, self.n_times + 1) * self.h

    def to_dict(self) -> dict:
        return {"n_times": self.n_times, "t_final": self.t_final}


@dataclass
class ImPathResult:
    discounted_im: np.ndarray
    short_rates: np.ndarray | None = None


@dataclass
class DimTrajectory:
    times: np.ndarray
    values: np.ndarray
    stderr: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_paths: int = 1

    def to_csv(self, path) -> None:
        err = self.stderr if len(self.stderr) else np.zeros_like(self.values)
        with open(path, "w") as fh:
            fh.write("t,dim,stderr\n")
            for t, v, e in zip(self.times, self.values, err):
                fh.write(f"{t:.17g},{v:.17g},{e:.17g}\n")

    @classmethod
    def from_csv(cls, path) -> "DimTrajectory":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2])


def event_times(portfolio: Portfolio, grid: SimulationGrid):
    """Sorted event times with flags: ``[(t, monitor_index or None), ...]``."""
    mon = grid.times
    events = {round(float(t), 9): (float(t), i) for i, t in enumerate(mon)}
    for s in portfolio:
        for r in s.float_schedule.payment_times[:-1]:
            if TIME_EPS < r < grid.t_final - TIME_EPS and round(float(r), 9) not in events:
                if np.min(np.abs(mon - r)) > TIME_EPS:
                    events[round(float(r), 9)] = (float(r), None)
    return [events[k] for k in sorted(events)]


def n_draws(portfolio: Portfolio, grid: SimulationGrid) -> int:
    return len(event_times(portfolio, grid))


def simulate_batch(model, portfolio: Portfolio, grid: SimulationGrid, normals: np.ndarray,
                   simm: SimmConfig, keep_rates: bool = False):
    """Discounted IM for a batch of paths.

    ``normals`` is ``(P, n_events)``; model parameters and swap strikes may be
    scalars or ``(P,)`` arrays. Returns ``(P, N)`` (and ``(P, N)`` short rates
    when ``keep_rates``).
    """
    normals = np.asarray(normals, dtype=float)
    n_paths = normals.shape[0]
    events = event_times(portfolio, grid)
    if normals.shape[1] != len(events):
        raise ValueError(f"expected {len(events)} draws per path, got {normals.shape[1]}")
    swaps = list(portfolio)
    out = np.zeros((n_paths, grid.n_times))
    rates = np.zeros((n_paths, grid.n_times)) if keep_rates else None

    x = np.broadcast_to(np.asarray(model.x0(), dtype=float), (n_paths,)).copy()
    r = model.short_rate(0.0, x)
    fixings = FixingStore()
    if swaps:
        plan0 = PricingPlan(swaps, 0.0)
        if plan0.resets_now:
            y0 = model.yields_grid(0.0, r)
            plan0.capture_fixings(y0[:, None, :], fixings)

    h = grid.h
    rate_sum = r.copy()
    t_prev = 0.0
    for k, (t, mon) in enumerate(events):
        x = model.step_x(x, t - t_prev, normals[:, k])
        r = model.short_rate(t, x)
        t_prev = t
        plan = PricingPlan(swaps, t) if swaps else None
        if mon is None:
            if plan is not None and plan.resets_now:
                plan.capture_fixings(model.yields_grid(t, r)[:, None, :], fixings)
            continue
        try:
            disc = np.exp(-h * rate_sum)
            if keep_rates:
                rates[:, mon] = r
            rate_sum = rate_sum + r
            if plan is None or not plan.alive:
                continue
            y = model.yields_grid(t, r)
            if plan.resets_now:
                plan.capture_fixings(y[:, None, :], fixings)
            v = plan.values(bumped_yields(y), fixings)
            sens = v[:, 1:] - v[:, :1]
            out[:, mon] = delta_margin(sens, simm) * disc
        except Exception as exc:
            raise RuntimeError(f"path simulation failed at monitoring step {mon} (t={t:g})") from exc
    return (out, rates) if keep_rates else out


def simulate_im_path(model, portfolio: Portfolio, grid: SimulationGrid, seed: int,
                     state_index: int = 0, path_index: int = 0,
                     simm: SimmConfig | None = None, keep_rates: bool = False) -> ImPathResult:
    simm = simm or load_simm_config()
    z = path_normals(seed, state_index, n_draws(portfolio, grid), path_index, 1)
    res = simulate_batch(model, portfolio, grid, z, simm, keep_rates)
    if keep_rates:
        return ImPathResult(res[0][0], res[1][0])
    return ImPathResult(res[0])


# ---------------------------------------------------------------------------
# estimator


def _block_moments(args):
    model, portfolio, grid, simm, seed, state_index, start, count = args
    nd = n_draws(portfolio, grid)
    z = path_normals(seed, state_index, nd, start, count)
    im = simulate_batch(model, portfolio, grid, z, simm)
    blocks = []
    for b in range(0, count, BLOCK):
        blk = im[b:b + BLOCK]
        total = np.sum(blk, axis=0)
        centred = blk - total / len(blk)
        blocks.append((len(blk), total, np.sum(centred * centred, axis=0)))
    return start, blocks


def mc_dim(model, portfolio: Portfolio, grid: SimulationGrid, n_paths: int, seed: int, *,
           state_index: int = 0, simm: SimmConfig | None = None, chunk: int = 4096,
           workers: int = 1) -> DimTrajectory:
    """Plain MC estimate of DIM at every monitoring time, with standard errors.

    Paths are reduced in fixed blocks of :data:`BLOCK`; block sums and centred
    second moments are merged exactly in path order, so the result does not
    depend on ``chunk`` or ``workers``.
    """
    if n_paths < 1:
        raise ValueError("need at least one path")
    simm = simm or load_simm_config()
    chunk = max(BLOCK, chunk // BLOCK * BLOCK)
    tasks = [(model, portfolio, grid, simm, seed, state_index, s, min(chunk, n_paths - s))
             for s in range(0, n_paths, chunk)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_block_moments, tasks))
    else:
        results = [_block_moments(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    blocks = [b for _, bl in results for b in bl]
    counts = [n for n, _, _ in blocks]
    mean = np.array([math.fsum(col) for col in zip(*(t for _, t, _ in blocks))]) / n_paths
    if n_paths == 1:
        return DimTrajectory(grid.times, mean, np.zeros_like(mean), 1)
    # between-block term n_b * (mean_b - mean)^2 completes the pooled sum of squares
    parts = [m2 for _, _, m2 in blocks]
    parts += [n * (t / n - mean) ** 2 for n, t, _ in blocks if len(counts) > 1]
    m2 = np.array([math.fsum(col) for col in zip(*parts)])
    stderr = np.sqrt(m2 / (n_paths - 1) / n_paths)
    return DimTrajectory(grid.times, mean, stderr, n_paths)


def dim_at_inception(model, portfolio: Portfolio, simm: SimmConfig | None = None) -> float:
    """Deterministic t0 margin: delta margin of the PV01s on the t0 model curve."""
    simm = simm or load_simm_config()
    swaps = list(portfolio)
    if not swaps:
        return 0.0
    curve = model_yields(model, model.initial_state())
    fixings = FixingStore()
    PricingPlan(swaps, 0.0).capture_fixings(curve.yields, fixings)
    sens = pv01_sensitivities(lambda c: price_portfolio(c, swaps, 0.0, fixings), curve)
    return float(delta_margin(sens, simm))
