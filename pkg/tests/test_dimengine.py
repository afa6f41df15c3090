import math

import numpy as np
import pytest

from dimlearn import dimengine
from dimlearn.dimengine import (
    DimTrajectory,
    SimulationGrid,
    dim_at_inception,
    event_times,
    mc_dim,
    n_draws,
    simulate_batch,
    simulate_im_path,
)
from dimlearn.instruments import (
    FixingStore,
    Portfolio,
    PricingPlan,
    price_portfolio,
    resolve_strikes,
    single_swap_templates,
    six_swap_templates,
)
from dimlearn.ratemodel import HullWhiteModel, VasicekModel, model_yields
from dimlearn.simm import delta_margin, load_simm_config, pv01_sensitivities
from dimlearn.streams import path_normals
from dimlearn.termstructure import NelsonSiegelParams

SIMM = load_simm_config()
VAS = VasicekModel(0.05, 0.01, 0.03, 0.01)
GRID = SimulationGrid(40, 6.0)


def single_swap(model, delta=0.0):
    y0 = model.yields_grid(0.0, np.atleast_1d(model.short_rate(0.0, model.x0())))[0]
    return resolve_strikes(single_swap_templates(), y0, delta)


PF = single_swap(VAS)


def test_grid_times():
    g = SimulationGrid(4, 2.0)
    assert g.h == 0.5
    assert np.array_equal(g.times, [0.5, 1.0, 1.5, 2.0])
    with pytest.raises(ValueError):
        SimulationGrid(0, 1.0)
    with pytest.raises(ValueError):
        SimulationGrid(3, 0.0)


def test_events_include_off_grid_resets():
    g = SimulationGrid(10, 6.0)  # step 0.6 misses most quarterly resets
    ev = event_times(PF, g)
    times = [t for t, _ in ev]
    assert times == sorted(times)
    assert sum(1 for _, m in ev if m is not None) == 10
    resets = PF.swaps[0].float_schedule.payment_times[:-1]
    for r in resets:
        assert any(abs(t - r) < 1e-12 for t in times)
    assert n_draws(PF, g) == len(ev)


def test_zero_portfolio_gives_zero_paths():
    z = path_normals(1, 0, n_draws(Portfolio(), GRID), 0, 8)
    assert np.array_equal(simulate_batch(VAS, Portfolio(), GRID, z, SIMM), np.zeros((8, 40)))


def test_zero_notional_gives_exact_zero():
    t = single_swap_templates(notional=0.0)
    pf = resolve_strikes(t, model_yields(VAS, VAS.initial_state()).yields, 0.0)
    traj = mc_dim(VAS, pf, GRID, 64, 3)
    assert np.array_equal(traj.values, np.zeros(40))
    assert np.all(np.isfinite(traj.stderr))


def test_deterministic_model_paths_identical():
    m = VasicekModel(0.05, 0.0, 0.03, 0.01)
    pf = single_swap(m)
    z = path_normals(4, 0, n_draws(pf, GRID), 0, 16)
    paths = simulate_batch(m, pf, GRID, z, SIMM)
    assert np.all(paths == paths[0])
    one = mc_dim(m, pf, GRID, 1, 9).values
    many = mc_dim(m, pf, GRID, 300, 9)
    assert np.allclose(many.values, one, rtol=1e-14, atol=0)
    assert np.all(many.stderr <= 1e-14 * np.maximum(one, 1e-300))


def test_hull_white_deterministic_profile():
    m = HullWhiteModel(0.03, 0.0, NelsonSiegelParams(0.03, 0.01, 0.005))
    pf = single_swap(m)
    z = path_normals(4, 0, n_draws(pf, GRID), 0, 4)
    paths = simulate_batch(m, pf, GRID, z, SIMM)
    assert np.all(paths == paths[0])
    # the deterministic path at t=0.15 is the t0 curve rolled forward; IM at the first
    # monitoring time from the scalar API
    t = GRID.times[0]
    st = m.initial_state()
    from dimlearn.ratemodel import evolve
    st = evolve(m, st, t, 0.0)
    curve = model_yields(m, st)
    sens = pv01_sensitivities(lambda c: price_portfolio(c, pf, t, FixingStore()), curve)
    disc = math.exp(-t * m.short_rate(0.0, 0.0))
    assert paths[0, 0] == pytest.approx(delta_margin(sens, SIMM) * disc, rel=1e-12)


GOLDEN = {0: 3.0679733902866455, 9: 2.719182854256715, 20: 1.931767209111121, 39: 0.0}


def test_golden_path_reproduces():
    p = simulate_im_path(VAS, PF, GRID, seed=20240601, state_index=0, path_index=7, simm=SIMM)
    for i, v in GOLDEN.items():
        assert p.discounted_im[i] == v


def test_path_independent_of_batch_position():
    nd = n_draws(PF, GRID)
    z = path_normals(5, 2, nd, 0, 50)
    batch = simulate_batch(VAS, PF, GRID, z, SIMM)
    for j in (0, 17, 49):
        one = simulate_im_path(VAS, PF, GRID, 5, 2, j, SIMM).discounted_im
        assert np.array_equal(one, batch[j])


def test_keep_rates_and_nonnegativity():
    r = simulate_im_path(VAS, PF, GRID, 1, 0, 0, SIMM, keep_rates=True)
    assert r.short_rates.shape == (40,)
    assert np.all(r.discounted_im >= 0)


def test_discounting_is_left_point():
    m = VasicekModel(0.5, 0.0, 0.04, 0.01)
    pf = single_swap(m)
    z = np.zeros((1, n_draws(pf, GRID)))
    im, rates = simulate_batch(m, pf, GRID, z, SIMM, keep_rates=True)
    undiscounted = simulate_batch(m, pf, GRID, z, SIMM)  # same path
    assert np.array_equal(im, undiscounted)
    h = GRID.h
    r_left = np.r_[m.r0, rates[0, :-1]]
    disc = np.exp(-h * np.cumsum(r_left))
    # recover IM before discounting at step 3 from the scalar API
    t = GRID.times[3]
    x = m.x0() * math.exp(-m.a * t)
    from dimlearn.ratemodel import ShortRateState
    curve = model_yields(m, ShortRateState(t, x, x + m.theta))
    store = FixingStore()
    for tr in pf.swaps[0].float_schedule.payment_times[:-1]:
        if tr <= t:
            xr = m.x0() * math.exp(-m.a * tr)
            PricingPlan(pf.swaps, tr).capture_fixings(
                model_yields(m, ShortRateState(tr, xr, xr + m.theta)).yields, store)
    sens = pv01_sensitivities(lambda c: price_portfolio(c, pf, t, store), curve)
    assert im[0, 3] == pytest.approx(delta_margin(sens, SIMM) * disc[3], rel=1e-12)


def test_expired_portfolio_margin_is_zero():
    g = SimulationGrid(20, 8.0)
    traj = mc_dim(VAS, PF, g, 64, 2)
    assert np.all(traj.values[g.times >= 6.0 - 1e-12] == 0)
    assert np.all(traj.values[(g.times > 0) & (g.times < 5.5)] > 0)


def test_mixed_maturity_portfolio_decays_stepwise():
    pf = resolve_strikes(six_swap_templates(), model_yields(VAS, VAS.initial_state()).yields)
    g = SimulationGrid(24, 12.0)
    traj = mc_dim(VAS, pf, g, 128, 3)
    assert np.all(traj.values[g.times >= 10.0] == 0)
    assert traj.values[g.times < 10.0][-1] > 0


def test_mc_dim_single_path_is_the_label():
    traj = mc_dim(VAS, PF, GRID, 1, 77, state_index=3)
    assert np.array_equal(traj.values, simulate_im_path(VAS, PF, GRID, 77, 3, 0, SIMM).discounted_im)
    assert np.array_equal(traj.stderr, np.zeros(40))


def test_mc_dim_rejects_zero_paths():
    with pytest.raises(ValueError):
        mc_dim(VAS, PF, GRID, 0, 1)


def test_mc_dim_invariant_to_chunking_and_workers():
    a = mc_dim(VAS, PF, GRID, 3000, 8, chunk=1024)
    b = mc_dim(VAS, PF, GRID, 3000, 8, chunk=4096)
    c = mc_dim(VAS, PF, GRID, 3000, 8, chunk=1024, workers=2)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.values, c.values)
    assert np.array_equal(a.stderr, b.stderr) and np.array_equal(a.stderr, c.stderr)


def test_estimates_at_two_path_counts_agree():
    m = 2 ** 14
    a = mc_dim(VAS, PF, GRID, m, 100)
    b = mc_dim(VAS, PF, GRID, 2 * m, 200)
    both = np.sqrt(a.stderr ** 2 + b.stderr ** 2)
    live = both > 0
    assert np.all(np.abs(a.values - b.values)[live] <= 3 * both[live])


def test_single_path_labels_are_unbiased():
    k = 2 ** 12
    z = np.vstack([path_normals(31, i, n_draws(PF, GRID)) for i in range(k)])
    labels = simulate_batch(VAS, PF, GRID, z, SIMM)
    ref = mc_dim(VAS, PF, GRID, k, 32)
    se = np.sqrt(labels.var(axis=0, ddof=1) / k + ref.stderr ** 2)
    live = se > 0
    assert np.all(np.abs(labels.mean(axis=0) - ref.values)[live] <= 3 * se[live])


def test_dim_at_inception_definition():
    assert dim_at_inception(VAS, Portfolio()) == 0.0
    curve = model_yields(VAS, VAS.initial_state())
    sens = pv01_sensitivities(lambda c: price_portfolio(c, PF, 0.0), curve)
    assert dim_at_inception(VAS, PF, SIMM) == pytest.approx(delta_margin(sens, SIMM), rel=1e-14)
    assert dim_at_inception(VAS, PF, SIMM) > 0


def test_dim_at_inception_is_short_time_limit():
    g = SimulationGrid(1, 1 / 512)
    traj = mc_dim(VAS, PF, g, 2 ** 14, 5)
    d0 = dim_at_inception(VAS, PF, SIMM)
    # O(h) slack: the deviation seen at a step 8x larger (plus its noise), scaled down by 8
    coarse = mc_dim(VAS, PF, SimulationGrid(1, 1 / 64), 2 ** 14, 6)
    slack = (abs(coarse.values[0] - d0) + 3 * coarse.stderr[0]) / 8
    assert abs(traj.values[0] - d0) <= 3 * traj.stderr[0] + slack


def test_failure_reports_step(monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("bad")
    monkeypatch.setattr(dimengine, "delta_margin", boom)
    z = path_normals(1, 0, n_draws(PF, GRID), 0, 2)
    with pytest.raises(RuntimeError, match="monitoring step 0"):
        simulate_batch(VAS, PF, GRID, z, SIMM)


def test_wrong_draw_count_rejected():
    with pytest.raises(ValueError):
        simulate_batch(VAS, PF, GRID, np.zeros((2, 3)), SIMM)


def test_trajectory_csv_round_trip(tmp_path):
    traj = mc_dim(VAS, PF, SimulationGrid(6, 6.0), 50, 1)
    traj.to_csv(tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().startswith("t,dim,stderr\n")
    back = DimTrajectory.from_csv(tmp_path / "d.csv")
    assert np.array_equal(back.values, traj.values) and np.array_equal(back.stderr, traj.stderr)
    assert np.array_equal(back.times, traj.times)
