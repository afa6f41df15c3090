import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dimlearn.instruments import (
    ExpiredSwapError,
    FixingStore,
    MissingFixingError,
    Portfolio,
    PricingPlan,
    Schedule,
    SwapSpec,
    SwapTemplate,
    annuity,
    dump_portfolio_file,
    load_portfolio_file,
    make_schedule,
    price_portfolio,
    price_swap,
    resolve_strikes,
    single_swap_templates,
    six_swap_templates,
    swap_rate,
    template_from_dict,
)
from dimlearn.termstructure import ISDA_TENORS, NelsonSiegelParams, YieldCurve, ns_curve

CURVE = YieldCurve([0.010, 0.012, 0.015, 0.017, 0.020, 0.023, 0.025, 0.028, 0.031, 0.032, 0.0325, 0.033])


def swap(start, end, k=0.02, payer=1, fixed_freq=2, float_freq=4, notional=100.0):
    return SwapSpec(notional, k, payer, make_schedule(start, end, fixed_freq),
                    make_schedule(start, end, float_freq))


def _oracle_df(curve, tau):
    if tau <= 0:
        return 1.0
    ten, ys = list(ISDA_TENORS), list(curve.yields)
    if tau <= ten[0]:
        y = ys[0]
    elif tau >= ten[-1]:
        y = ys[-1]
    else:
        j = next(i for i in range(len(ten)) if ten[i] >= tau)
        y = ys[j - 1] + (ys[j] - ys[j - 1]) * (tau - ten[j - 1]) / (ten[j] - ten[j - 1])
    return math.exp(-y * tau)


def _oracle_swap_rate(curve, start, end, fixed_freq, float_freq):
    fl = sum(_oracle_df(curve, start + (j - 1) / float_freq) - _oracle_df(curve, start + j / float_freq)
             for j in range(1, int((end - start) * float_freq) + 1))
    ann = sum(_oracle_df(curve, start + j / fixed_freq) / fixed_freq
              for j in range(1, int((end - start) * fixed_freq) + 1))
    return fl / ann


def test_schedule_validation_and_accruals():
    s = make_schedule(1.0, 2.0, 4)
    assert np.allclose(s.accruals, 0.25)
    assert s.start == 1.0 and s.end == 2.0
    with pytest.raises(ValueError):
        make_schedule(0.0, 1.1, 2)
    with pytest.raises(ValueError):
        Schedule([0.0, 1.0, 0.5])


def test_swap_spec_validation():
    with pytest.raises(ValueError):
        SwapSpec(100, 0.01, 0, make_schedule(0, 1, 2), make_schedule(0, 1, 4))
    with pytest.raises(ValueError):
        SwapSpec(100, 0.01, 1, make_schedule(0, 1, 2), make_schedule(0, 2, 4))


def test_annuity_unit_discounting():
    assert annuity(YieldCurve.flat(0.0), make_schedule(0, 1, 2), 0.0) == pytest.approx(1.0, abs=1e-15)


def test_annuity_closed_form():
    got = annuity(YieldCurve.flat(0.05), make_schedule(0, 2, 1), 0.0)
    assert got == pytest.approx(math.exp(-0.05) + math.exp(-0.10), rel=1e-15)


def test_annuity_mid_life_enumeration():
    sched = make_schedule(0, 5, 2)
    t = 1.3
    expected = sum(0.5 * _oracle_df(CURVE, T - t) for T in sched.payment_times[1:] if T > t)
    assert annuity(CURVE, sched, t) == pytest.approx(expected, rel=1e-14)
    assert annuity(CURVE, sched, 5.0) == 0.0


def test_swap_rate_flat_curve_reprices():
    s = swap(0, 5)
    k = swap_rate(YieldCurve.flat(0.03), s, 0.0)
    assert abs(price_swap(YieldCurve.flat(0.03), s.with_rate(k), 0.0)) < 1e-12 * 100
    # continuous 3% expressed with quarterly float and semi-annual fixed accruals
    assert k == pytest.approx(0.030226, abs=5e-6)


def test_forward_swap_rate_on_ns_curve_vs_oracle():
    c = ns_curve(NelsonSiegelParams(0.03, 0.01, 0.005))
    k = swap_rate(c, swap(1, 6), 0.0)
    assert k == pytest.approx(_oracle_swap_rate(c, 1, 6, 2, 4), rel=1e-13)


def test_expired_swap_rate_raises():
    with pytest.raises(ExpiredSwapError):
        swap_rate(CURVE, swap(0, 2), 2.0)


def test_payer_receiver_bit_exact():
    p = price_swap(CURVE, swap(0, 7, k=0.021), 0.0)
    r = price_swap(CURVE, swap(0, 7, k=0.021, payer=-1), 0.0)
    assert p == -r and p != 0


def test_single_period_closed_form():
    s = SwapSpec(100, 0.02, 1, Schedule([0.5, 1.0]), Schedule([0.5, 1.0]))
    p0, p1 = _oracle_df(CURVE, 0.5), _oracle_df(CURVE, 1.0)
    fwd = (p0 / p1 - 1) / 0.5
    assert price_swap(CURVE, s, 0.0) == pytest.approx(100 * 0.5 * p1 * (fwd - 0.02), rel=1e-13)


def test_missing_fixing_identifies_reset():
    s = swap(0, 3)
    with pytest.raises(MissingFixingError) as err:
        price_swap(CURVE, s, 0.6)
    assert err.value.reset_time == 0.5


def test_in_flight_period_uses_stored_fixing():
    s = swap(0, 3)
    f = FixingStore()
    f.set(0.5, 0.75, 0.04)
    t = 0.6
    v = price_swap(CURVE, s, t, f)
    # hand enumeration
    flt = 0.25 * _oracle_df(CURVE, 0.75 - t) * 0.04
    for j in range(4, 13):
        flt += _oracle_df(CURVE, (j - 1) / 4 - t) - _oracle_df(CURVE, j / 4 - t)
    ann = sum(0.5 * _oracle_df(CURVE, T - t) for T in np.arange(1, 7) * 0.5 if T > t)
    assert v == pytest.approx(100 * (flt - 0.02 * ann), rel=1e-12)


def test_reset_at_valuation_time_uses_supplied_curve():
    s = swap(0, 2)
    direct = price_swap(CURVE, s, 0.5)
    f = FixingStore()
    PricingPlan([s], 0.5).capture_fixings(CURVE.yields, f)
    assert price_swap(CURVE, s, 0.5, f) == direct
    f2 = FixingStore()
    f2.set(0.5, 0.75, 0.1)
    assert price_swap(CURVE, s, 0.5, f2) != direct


def test_linearity_in_notional():
    a = price_swap(CURVE, swap(0, 5, notional=100), 0.0)
    assert price_swap(CURVE, swap(0, 5, notional=200), 0.0) == 2 * a
    assert price_swap(CURVE, swap(0, 5, notional=37.3), 0.0) == pytest.approx(a * 0.373, rel=1e-14)


def test_portfolio_cases():
    assert price_portfolio(CURVE, Portfolio(), 0.0) == 0.0
    s = swap(0, 4, k=0.025)
    assert price_portfolio(CURVE, [s, swap(0, 4, k=0.025, payer=-1)], 0.0) == 0.0
    swaps = [swap(0, 4), swap(1, 6, payer=-1), swap(0, 10, fixed_freq=1, float_freq=2)]
    total = price_portfolio(CURVE, swaps, 0.0)
    assert total == pytest.approx(sum(price_swap(CURVE, x, 0.0) for x in swaps), rel=0, abs=1e-13)


def test_six_swap_portfolio_atm_at_inception():
    pf = resolve_strikes(six_swap_templates(), CURVE.yields)
    assert len(pf) == 6
    assert abs(price_portfolio(CURVE, pf, 0.0)) < 1e-12 * 100
    assert [s.payer for s in pf] == [1, -1, 1, -1, 1, -1]
    assert [s.maturity for s in pf] == [5, 6, 7, 8, 9, 10]


def test_single_swap_template_resolves_with_spread():
    pf = resolve_strikes(single_swap_templates(), CURVE.yields, 0.001)
    s = pf.swaps[0]
    atm = swap_rate(CURVE, s, 0.0)
    assert s.fixed_rate == pytest.approx(atm + 0.001, abs=1e-16)
    with pytest.raises(ValueError):
        resolve_strikes(single_swap_templates(), CURVE.yields)


def test_batched_strikes_match_scalar():
    ys = np.stack([CURVE.yields, CURVE.yields + 0.01, CURVE.yields - 0.005])
    pf = resolve_strikes(single_swap_templates(), ys, np.array([0.0, 0.001, -0.001]))
    ks = pf.swaps[0].fixed_rate
    for i in range(3):
        one = resolve_strikes(single_swap_templates(), ys[i], [0.0, 0.001, -0.001][i]).swaps[0]
        assert one.fixed_rate == ks[i]


@pytest.mark.parametrize("text,expected", [
    ("ATM", dict(spread=0.0, spread_from_state=False)),
    ("ATM+0.001", dict(spread=0.001)),
    ("ATM-0.002", dict(spread=-0.002)),
    ("ATM+delta", dict(spread_from_state=True)),
    (0.025, dict(strike=0.025)),
])
def test_template_strike_parsing(text, expected):
    t = template_from_dict({"maturity": 5, "strike": text})
    for k, v in expected.items():
        assert getattr(t, k) == v


def test_template_strike_rejects_garbage():
    with pytest.raises(ValueError):
        template_from_dict({"maturity": 5, "strike": "OTM"})


def test_portfolio_file_round_trip(tmp_path):
    path = tmp_path / "pf.json"
    templates = six_swap_templates() + single_swap_templates() + [SwapTemplate(3.0, strike=0.02),
                                                                  SwapTemplate(4.0, spread=0.0005)]
    dump_portfolio_file(templates, path)
    assert set(json.loads(path.read_text())["swaps"][0]) == {
        "notional", "w", "fixed_leg_freq", "float_leg_freq", "start", "maturity", "strike"}
    assert load_portfolio_file(path) == templates


curves = st.lists(st.floats(-0.02, 0.08), min_size=12, max_size=12).map(YieldCurve)
schedules = st.tuples(st.sampled_from([0.0, 0.5, 1.0, 2.0]), st.integers(1, 20),
                      st.sampled_from([(1, 2), (2, 4), (1, 4), (2, 2)]))


@settings(max_examples=100, deadline=None)
@given(curves, schedules, st.sampled_from([1, -1]), st.floats(1.0, 1e6))
def test_atm_fixed_point_property(curve, sched, payer, notional):
    start, years, (ff, lf) = sched
    s = swap(start, start + years, payer=payer, fixed_freq=ff, float_freq=lf, notional=notional)
    k = swap_rate(curve, s, 0.0)
    assert abs(price_swap(curve, s.with_rate(k), 0.0)) < 1e-12 * notional
