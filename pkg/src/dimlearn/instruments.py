"""Interest rate swaps: schedules, leg valuation off a zero curve, portfolios.

Pricing is single-curve. Floating cashflows use the forward implied by the
discount ratio ``(P(t,T_{j-1}) / P(t,T_j) - 1) / tau`` until the period resets;
from the reset time on, the stored fixing is used. A period that resets
exactly at the valuation time takes its fixing from the curve supplied (that
curve *is* the reset-time curve), unless a fixing is already stored.

The heavy lifting is done by :class:`PricingPlan`, which freezes the cashflow
layout of a portfolio at one valuation time and then values it for any stack
of yield curves ``(..., 12)`` at once. The scalar functions below are thin
wrappers around it.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .termstructure import ISDA_TENORS, YieldCurve, interp_plan, interp_yields

TIME_EPS = 1e-10
DEFAULT_NOTIONAL = 100.0


class MissingFixingError(KeyError):
    def __init__(self, reset_time: float, payment_time: float):
        super().__init__(f"no fixing stored for period resetting at t={reset_time:g} "
                         f"(paying at t={payment_time:g})")
        self.reset_time = reset_time


class ExpiredSwapError(ValueError):
    pass


def _key(t: float) -> float:
    return round(float(t), 9)


def _sum_last(a: np.ndarray):
    """Left-to-right sum over the last axis.

    ``np.sum`` picks different reduction orders for 1-D and N-D inputs; an
    explicit loop keeps a curve's value independent of how many curves are
    priced alongside it.
    """
    if a.shape[-1] == 0:
        return np.zeros(a.shape[:-1])
    total = a[..., 0]
    for j in range(1, a.shape[-1]):
        total = total + a[..., j]
    return total


@dataclass(frozen=True)
class Schedule:
    """Dates ``T_0 < T_1 < ... < T_n``; period k accrues over ``(T_{k-1}, T_k]``."""

    payment_times: np.ndarray

    def __post_init__(self):
        times = np.array(self.payment_times, dtype=float)
        if times.ndim != 1 or len(times) < 2:
            raise ValueError("a schedule needs at least a start and one payment date")
        if np.any(np.diff(times) <= 0):
            raise ValueError("schedule dates must be strictly increasing")
        times.setflags(write=False)
        object.__setattr__(self, "payment_times", times)

    @property
    def accruals(self) -> np.ndarray:
        return np.diff(self.payment_times)

    @property
    def start(self) -> float:
        return float(self.payment_times[0])

    @property
    def end(self) -> float:
        return float(self.payment_times[-1])


def make_schedule(start: float, end: float, freq: int) -> Schedule:
    """Regular schedule with ``freq`` periods per year; ``end - start`` must tile."""
    n = (end - start) * freq
    if n <= 0 or abs(n - round(n)) > 1e-9:
        raise ValueError(f"[{start}, {end}] is not a whole number of 1/{freq}-year periods")
    n = int(round(n))
    times = start + np.arange(n + 1) / freq
    times[-1] = end
    return Schedule(times)


@dataclass(frozen=True)
class SwapSpec:
    """``payer=+1`` pays fixed / receives float; ``payer=-1`` is the receiver.

    ``fixed_rate`` may be an array of per-path strikes when a batch of market
    states is simulated together.
    """

    notional: float
    fixed_rate: float | np.ndarray
    payer: int
    fixed_schedule: Schedule
    float_schedule: Schedule

    def __post_init__(self):
        if self.payer not in (1, -1):
            raise ValueError(f"payer flag must be +1 or -1, got {self.payer}")
        fs, ls = self.fixed_schedule, self.float_schedule
        if abs(fs.start - ls.start) > TIME_EPS or abs(fs.end - ls.end) > TIME_EPS:
            raise ValueError("fixed and floating schedules must share first and last dates")

    @property
    def maturity(self) -> float:
        return self.fixed_schedule.end

    def with_rate(self, rate) -> "SwapSpec":
        return SwapSpec(self.notional, rate, self.payer, self.fixed_schedule, self.float_schedule)


class FixingStore(dict):
    """Float fixings keyed by ``(reset_time, payment_time)`` of the period."""

    def set(self, reset: float, payment: float, rate) -> None:
        self[(_key(reset), _key(payment))] = rate

    def get_fixing(self, reset: float, payment: float):
        try:
            return self[(_key(reset), _key(payment))]
        except KeyError:
            raise MissingFixingError(reset, payment) from None


@dataclass(frozen=True)
class Portfolio:
    swaps: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "swaps", tuple(self.swaps))

    def __len__(self):
        return len(self.swaps)

    def __iter__(self):
        return iter(self.swaps)

    @property
    def maturity(self) -> float:
        return max((s.maturity for s in self.swaps), default=0.0)


# ---------------------------------------------------------------------------
# pricing plan


@dataclass
class _SwapLayout:
    payer: int
    notional: float
    fixed_rate: object
    # forward-looking float periods: indices into the plan's date vector
    fwd_start: np.ndarray
    fwd_end: np.ndarray
    fwd_tau: np.ndarray
    # in-flight float periods (reset <= t < payment)
    fixed_periods: list  # (reset, payment, date index, tau)
    fixed_leg_idx: np.ndarray
    fixed_leg_tau: np.ndarray

    @property
    def alive(self) -> bool:
        return len(self.fixed_leg_idx) > 0 or len(self.fwd_end) > 0 or bool(self.fixed_periods)


class PricingPlan:
    """Cashflow layout of a portfolio as seen from valuation time ``t``.

    Parameters
    ----------
    swaps : sequence of SwapSpec
    t : float
        Valuation time; the curves passed to :meth:`values` must be anchored here.
    tenors : array
        Curve node tenors (defaults to the ISDA grid).
    """

    def __init__(self, swaps: Sequence[SwapSpec], t: float, tenors=ISDA_TENORS):
        self.t = float(t)
        dates: list[float] = []
        index: dict[float, int] = {}

        def idx(d):
            k = _key(d)
            if k not in index:
                index[k] = len(dates)
                dates.append(float(d))
            return index[k]

        self.layouts: list[_SwapLayout] = []
        self.resets_now: list[tuple[int, float, float, int, float]] = []
        for i, s in enumerate(swaps):
            ft = s.float_schedule.payment_times
            fs, fe, ftau, fixed = [], [], [], []
            for j in range(1, len(ft)):
                if ft[j] <= t + TIME_EPS:
                    continue
                tau = ft[j] - ft[j - 1]
                if ft[j - 1] <= t + TIME_EPS:
                    e = idx(ft[j])
                    fixed.append((float(ft[j - 1]), float(ft[j]), e, tau))
                    if abs(ft[j - 1] - t) <= TIME_EPS:
                        self.resets_now.append((i, float(ft[j - 1]), float(ft[j]), e, tau))
                else:
                    fs.append(idx(ft[j - 1]))
                    fe.append(idx(ft[j]))
                    ftau.append(tau)
            pt = s.fixed_schedule.payment_times
            live = np.nonzero(pt[1:] > t + TIME_EPS)[0] + 1
            self.layouts.append(_SwapLayout(
                s.payer, s.notional, s.fixed_rate,
                np.array(fs, dtype=np.intp), np.array(fe, dtype=np.intp), np.array(ftau),
                fixed,
                np.array([idx(pt[k]) for k in live], dtype=np.intp),
                np.array([pt[k] - pt[k - 1] for k in live]),
            ))
        self.dates = np.array(dates)
        self.taus = self.dates - self.t
        self._interp = interp_plan(tenors, np.maximum(self.taus, 0.0))
        self.swaps = tuple(swaps)

    @property
    def alive(self) -> bool:
        return any(lay.alive for lay in self.layouts)

    def discount_factors(self, yields: np.ndarray) -> np.ndarray:
        """``P(t, date)`` for every plan date; ``yields`` is ``(..., 12)``."""
        return np.exp(-interp_yields(yields, self._interp) * self.taus)

    def capture_fixings(self, yields: np.ndarray, store: FixingStore,
                        dfs: np.ndarray | None = None) -> None:
        """Fix every period resetting at ``t`` off the given curve (if not already fixed)."""
        if not self.resets_now:
            return
        if dfs is None:
            dfs = self.discount_factors(yields)
        for _, reset, pay, e, tau in self.resets_now:
            if (_key(reset), _key(pay)) not in store:
                store.set(reset, pay, (1.0 / dfs[..., e] - 1.0) / tau)

    def legs(self, yields: np.ndarray, fixings: Mapping | None = None,
             dfs: np.ndarray | None = None):
        """Per swap ``(float_pv, annuity)`` per unit notional."""
        if dfs is None:
            dfs = self.discount_factors(yields)
        store = fixings if fixings is not None else FixingStore()
        if self.resets_now and any((_key(r), _key(p)) not in store
                                   for _, r, p, _, _ in self.resets_now):
            store = FixingStore(store)
            self.capture_fixings(yields, store, dfs)
        out = []
        for lay in self.layouts:
            df_end = dfs[..., lay.fwd_end]
            fwd = (dfs[..., lay.fwd_start] / df_end - 1.0) / lay.fwd_tau
            float_pv = _sum_last(lay.fwd_tau * df_end * fwd)
            # stored fixings must broadcast against the leading curve dims
            for r, p, e, tau in lay.fixed_periods:
                float_pv = float_pv + tau * dfs[..., e] * store.get_fixing(r, p)
            annuity = _sum_last(lay.fixed_leg_tau * dfs[..., lay.fixed_leg_idx])
            out.append((float_pv, annuity))
        return out

    def swap_values(self, yields: np.ndarray, fixings: Mapping | None = None,
                    dfs: np.ndarray | None = None) -> list:
        vals = []
        for lay, (flt, ann) in zip(self.layouts, self.legs(yields, fixings, dfs)):
            k = lay.fixed_rate
            if np.ndim(k):
                k = np.asarray(k).reshape(np.shape(k) + (1,) * (np.ndim(ann) - np.ndim(k)))
            vals.append((lay.payer * lay.notional) * (flt - k * ann))
        return vals

    def values(self, yields: np.ndarray, fixings: Mapping | None = None,
               dfs: np.ndarray | None = None):
        """Portfolio value for each curve in ``yields`` (``(..., 12)`` -> ``(...)``)."""
        vals = self.swap_values(yields, fixings, dfs)
        if not vals:
            return np.zeros(np.shape(yields)[:-1])
        total = vals[0]
        for v in vals[1:]:
            total = total + v
        return total


# ---------------------------------------------------------------------------
# scalar API


def _swap_for_schedule(fixed_schedule: Schedule) -> SwapSpec:
    return SwapSpec(1.0, 0.0, 1, fixed_schedule, fixed_schedule)


def annuity(curve: YieldCurve, fixed_schedule: Schedule, t: float) -> float:
    """``sum tau_k P(t, T_k)`` over fixed dates after ``t``; 0 once expired."""
    if t >= fixed_schedule.end - TIME_EPS:
        return 0.0
    plan = PricingPlan([_swap_for_schedule(fixed_schedule)], t, curve.grid.tenors)
    lay = plan.layouts[0]
    return float(_sum_last(lay.fixed_leg_tau * plan.discount_factors(curve.yields)[lay.fixed_leg_idx]))


def swap_rate(curve: YieldCurve, spec: SwapSpec, t: float,
              fixings: Mapping | None = None) -> float:
    """Strike that prices the swap to zero at ``t``."""
    if t >= spec.maturity - TIME_EPS:
        raise ExpiredSwapError(f"swap matured at {spec.maturity}, valuation time {t}")
    plan = PricingPlan([spec], t, curve.grid.tenors)
    flt, ann = plan.legs(curve.yields, fixings)[0]
    if not ann > 0:
        raise ExpiredSwapError("annuity is not positive")
    return float(flt / ann)


def price_swap(curve: YieldCurve, spec: SwapSpec, t: float,
               fixings: Mapping | None = None) -> float:
    plan = PricingPlan([spec], t, curve.grid.tenors)
    return float(plan.values(curve.yields, fixings))


def price_portfolio(curve: YieldCurve, portfolio, t: float,
                    fixings: Mapping | None = None) -> float:
    swaps = list(portfolio)
    if not swaps:
        return 0.0
    plan = PricingPlan(swaps, t, curve.grid.tenors)
    return float(plan.values(curve.yields, fixings))


# ---------------------------------------------------------------------------
# templates and portfolio files


@dataclass(frozen=True)
class SwapTemplate:
    """Swap terms whose strike is resolved against the inception curve.

    ``strike`` set -> absolute fixed rate. Otherwise the strike is the ATM
    rate at inception plus ``spread``, plus the market-state spread when
    ``spread_from_state`` is true.
    """

    maturity: float
    start: float = 0.0
    payer: int = 1
    fixed_freq: int = 2
    float_freq: int = 4
    notional: float = DEFAULT_NOTIONAL
    strike: float | None = None
    spread: float = 0.0
    spread_from_state: bool = False

    def spec(self, fixed_rate=0.0) -> SwapSpec:
        return SwapSpec(self.notional, fixed_rate, self.payer,
                        make_schedule(self.start, self.maturity, self.fixed_freq),
                        make_schedule(self.start, self.maturity, self.float_freq))

    def to_dict(self) -> dict:
        if self.strike is not None:
            strike = self.strike
        elif self.spread_from_state:
            strike = "ATM+delta"
        else:
            strike = f"ATM{self.spread:+.17g}" if self.spread else "ATM"
        return {"notional": self.notional, "w": self.payer, "fixed_leg_freq": self.fixed_freq,
                "float_leg_freq": self.float_freq, "start": self.start,
                "maturity": self.maturity, "strike": strike}


_ATM_RE = re.compile(r"^ATM\s*(?:([+-])\s*(delta|δ|[0-9.eE+-]+))?$")


def template_from_dict(d: Mapping) -> SwapTemplate:
    strike = d.get("strike", "ATM")
    kw = dict(maturity=float(d["maturity"]), start=float(d.get("start", 0.0)),
              payer=int(d.get("w", 1)), fixed_freq=int(d.get("fixed_leg_freq", 2)),
              float_freq=int(d.get("float_leg_freq", 4)),
              notional=float(d.get("notional", DEFAULT_NOTIONAL)))
    if isinstance(strike, (int, float)):
        return SwapTemplate(strike=float(strike), **kw)
    m = _ATM_RE.match(str(strike).strip())
    if not m:
        raise ValueError(f"cannot parse strike {strike!r}; use a number, 'ATM', 'ATM+0.001' or 'ATM+delta'")
    sign, val = m.groups()
    if val is None:
        return SwapTemplate(**kw)
    if val in ("delta", "δ"):
        if sign != "+":
            raise ValueError("only 'ATM+delta' is supported for the state spread")
        return SwapTemplate(spread_from_state=True, **kw)
    return SwapTemplate(spread=float(sign + val), **kw)


def load_portfolio_file(path) -> list[SwapTemplate]:
    raw = json.loads(Path(path).read_text())
    swaps = raw["swaps"] if isinstance(raw, dict) else raw
    return [template_from_dict(s) for s in swaps]


def dump_portfolio_file(templates: Sequence[SwapTemplate], path) -> None:
    Path(path).write_text(json.dumps({"swaps": [t.to_dict() for t in templates]}, indent=2))


def single_swap_templates(notional: float = DEFAULT_NOTIONAL) -> list[SwapTemplate]:
    """1Y-forward 5Y payer swap, quarterly float vs semi-annual fixed, strike ATM + delta."""
    return [SwapTemplate(maturity=6.0, start=1.0, payer=1, fixed_freq=2, float_freq=4,
                         notional=notional, spread_from_state=True)]


def six_swap_templates(notional: float = DEFAULT_NOTIONAL) -> list[SwapTemplate]:
    """Six spot-starting ATM swaps maturing at 5..10Y, payer on even index.

    The first three pay quarterly float vs semi-annual fixed, the rest
    semi-annual float vs annual fixed.
    """
    out = []
    for phi in range(6):
        fixed_freq, float_freq = (2, 4) if phi < 3 else (1, 2)
        out.append(SwapTemplate(maturity=5.0 + phi, start=0.0, payer=1 if phi % 2 == 0 else -1,
                                fixed_freq=fixed_freq, float_freq=float_freq, notional=notional))
    return out


def templates_use_state_spread(templates: Sequence[SwapTemplate]) -> bool:
    return any(t.spread_from_state for t in templates)


def resolve_strikes(templates: Sequence[SwapTemplate], yields0: np.ndarray,
                    state_spread=None) -> Portfolio:
    """Fix strikes from inception curves ``yields0`` (``(12,)`` or ``(P, 12)``)."""
    specs = [t.spec() for t in templates]
    plan = PricingPlan(specs, 0.0)
    legs = plan.legs(yields0)
    out = []
    for t, spec, (flt, ann) in zip(templates, specs, legs):
        if t.strike is not None:
            rate = t.strike
        else:
            rate = flt / ann + t.spread
            if t.spread_from_state:
                if state_spread is None:
                    raise ValueError("template needs a market-state spread but none was given")
                rate = rate + state_spread
        out.append(spec.with_rate(rate))
    return Portfolio(out)
