import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from piib.ib_discrete import solve_batch
from piib.pathintegral import GroundTruthTables
from piib.pipeline import (
    REGIONS,
    CoverageError,
    EvaluationSupportError,
    NormalizationError,
    SweepConfig,
    TradeoffCurve,
    TradeoffPoint,
    beta_sweep,
    compute_cost_per_condition,
    control_cost_per_condition,
    control_vs_compute,
    default_angles,
    normalize_curve,
    optimal_compute_cost,
    optimal_csv,
    quartile_drops,
    read_tradeoff_csv,
    region_aggregate,
    region_of,
    regions_csv,
    successor_cost_table,
    summarize_condition,
    timestep_control_cost,
    tradeoff_csv,
)


def curve(angle, controls, computes=None, betas=None):
    n = len(controls)
    betas = betas if betas is not None else [0.9 + 0.01 * k for k in range(n)]
    computes = computes if computes is not None else [0.1 * k for k in range(n)]
    pts = [TradeoffPoint(b, c, u) for b, c, u in zip(betas, computes, controls)]
    return TradeoffCurve(angle, tuple(pts))


# -- regions and grid ------------------------------------------------------------------


def test_regions_partition_default_angles():
    labels = [region_of(a) for a in default_angles()]
    assert len(default_angles()) == 36
    assert labels.count("Balancing") == 12
    assert labels.count("SwingUpA") == 12
    assert labels.count("SwingUpB") == 12
    assert region_of(60) == "Balancing" and region_of(65) == "SwingUpA"
    assert region_of(120) == "SwingUpA" and region_of(125) == "SwingUpB"


@pytest.mark.parametrize("bad", [0.0, -5.0, 185.0])
def test_region_rejects_out_of_range(bad):
    with pytest.raises(ValueError):
        region_of(bad)


def test_default_grid_has_51_points():
    b = SweepConfig().betas()
    assert b.size == 51
    assert b[0] == 0.9 and b[-1] == 1.0


def test_degenerate_grid_single_beta():
    b = SweepConfig(beta_min=1.0, beta_max=1.0).betas()
    assert b.tolist() == [1.0]


@pytest.mark.parametrize("kw", [{"beta_min": 1.0, "beta_max": 0.9}, {"beta_step": 0.0},
                                {"beta_min": -0.1}, {"lam": 0.0}, {"horizon": 0}])
def test_sweep_config_validation(kw):
    with pytest.raises(ValueError):
        SweepConfig(**kw)


# -- costs -----------------------------------------------------------------------------


def test_successor_table_means_and_empty_bins():
    bins = [np.array([[0, 1], [0, 1], [2, 1]])]
    costs = [np.array([[1.0, 4.0], [3.0, 6.0], [5.0, 8.0]])]
    m = successor_cost_table(bins, costs, 3)
    assert m.shape == (2, 1, 3)
    np.testing.assert_allclose(m[0, 0], [2.0, np.nan, 5.0])
    np.testing.assert_allclose(m[1, 0], [np.nan, 6.0, np.nan])


def test_dirac_decoder_gives_that_bin_cost():
    m_t = np.array([[2.0, 7.0, np.nan]])
    c = timestep_control_cost(np.array([[1.0]]), np.array([[0.0, 1.0, 0.0]]), m_t)
    assert c[0] == pytest.approx(7.0)


def test_uniform_decoder_gives_unweighted_mean_of_occupied_bins():
    m_t = np.array([[2.0, 7.0, np.nan, 3.0]])
    c = timestep_control_cost(np.array([[1.0]]), np.full((1, 4), 0.25), m_t)
    assert c[0] == pytest.approx(4.0)


def test_decoder_missing_support_drops_that_y():
    m_t = np.array([[2.0, np.nan]])
    p_yx = np.array([[0.5, 0.5]])
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    c = timestep_control_cost(p_yx, q, m_t)
    assert c[0] == pytest.approx(2.0)


def test_no_evaluable_bin_raises():
    m_t = np.array([[np.nan, 3.0]])
    with pytest.raises(EvaluationSupportError):
        timestep_control_cost(np.array([[1.0]]), np.array([[1.0, 0.0]]), m_t)


def test_compute_cost_is_time_average():
    class S:
        def __init__(self, v):
            self.kl_per_condition = np.array(v)

    out = compute_cost_per_condition([S([1.0, 2.0]), S([3.0, 6.0])])
    np.testing.assert_allclose(out, [2.0, 4.0])


def test_control_cost_sums_over_time():
    class S:
        p_y_given_x = np.array([[1.0]])
        p_u_given_y = np.array([[0.5, 0.5]])

    m = np.array([[[1.0, 3.0]], [[10.0, 20.0]]])
    np.testing.assert_allclose(control_cost_per_condition([S(), S()], m), [2.0 + 15.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 4), st.integers(2, 6), st.integers(0, 10_000))
def test_compute_cost_bounded_by_log_m(n, m, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(m, 0.3), size=n)
    for s in solve_batch(p, [0.5, 1.0, 3.0]):
        assert np.all(s.kl_per_condition >= -1e-12)
        assert np.all(s.kl_per_condition <= math.log(m) + 1e-12)


# -- curve analysis ----------------------------------------------------------------------


def test_optimal_strictly_decreasing_is_last_point():
    c = curve(5.0, [5.0, 4.0, 3.0, 2.0])
    cc, beta = optimal_compute_cost(c)
    assert beta == c.points[-1].beta and cc == c.points[-1].compute_cost


def test_optimal_u_shape_interior():
    c = curve(5.0, [5.0, 1.0, 3.0])
    assert optimal_compute_cost(c)[1] == c.points[1].beta


def test_optimal_tie_goes_to_smaller_compute_then_beta():
    c = curve(5.0, [2.0, 1.0, 1.0], computes=[0.0, 0.8, 0.3])
    assert optimal_compute_cost(c) == (0.3, c.points[2].beta)
    c = curve(5.0, [1.0, 1.0], computes=[0.2, 0.2])
    assert optimal_compute_cost(c)[1] == c.points[0].beta


def test_normalize_examples():
    n = normalize_curve(curve(5.0, [10.0, 20.0, 30.0]))
    assert n.control_costs.tolist() == [0.0, 50.0, 100.0]
    again = normalize_curve(n)
    assert again.control_costs.tolist() == n.control_costs.tolist()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=20).filter(lambda v: len(set(v)) > 1))
def test_normalize_exact_endpoints(vals):
    n = normalize_curve(curve(5.0, vals))
    c = n.control_costs
    assert c.min() == 0.0 and c.max() == 100.0
    np.testing.assert_array_equal(n.compute_costs, curve(5.0, vals).compute_costs)


def test_normalize_constant_curve_raises():
    with pytest.raises(NormalizationError):
        normalize_curve(curve(5.0, [3.0, 3.0]))


def test_quartile_drops_steep_start():
    c = curve(100.0, [10.0, 2.0, 1.5, 1.2, 1.0], computes=[0.0, 1.0, 2.0, 3.0, 4.0])
    d1, d4 = quartile_drops(c)
    assert d1 == pytest.approx(8.0) and d4 == pytest.approx(0.2)


def test_quartile_drops_flat_compute():
    c = curve(100.0, [3.0, 2.0], computes=[1.0, 1.0])
    assert quartile_drops(c) == (0.0, 0.0)


def test_control_vs_compute_averages_duplicates():
    c = curve(5.0, [4.0, 2.0, 1.0], computes=[0.5, 0.5, 1.0])
    x, y = control_vs_compute(c)
    assert x.tolist() == [0.5, 1.0] and y.tolist() == [3.0, 1.0]


def test_region_aggregate_statistics():
    curves = [curve(a, [5.0, 4.0, 6.0]) for a in default_angles()]
    conds, regions = region_aggregate(curves, expected_angles=default_angles())
    assert [r.region for r in regions] == list(REGIONS)
    for r in regions:
        assert r.n == 12
        assert r.min_optimal_compute == r.max_optimal_compute == pytest.approx(0.1)
    s = conds[0]
    assert s.control_at_beta_min == 5.0 and s.cost_gap == 2.0


def test_cost_gap_constant_curve_is_zero():
    assert summarize_condition(curve(5.0, [2.0, 2.0])).cost_gap == 0.0


def test_region_aggregate_coverage():
    curves = [curve(a, [1.0, 0.5]) for a in default_angles()[:-1]]
    with pytest.raises(CoverageError):
        region_aggregate(curves, expected_angles=default_angles())
    with pytest.raises(CoverageError):
        region_aggregate([curve(5.0, [1.0, 0.5])])
    conds, regions = region_aggregate([curve(5.0, [1.0, 0.5])], partial=True)
    assert [r.region for r in regions] == ["Balancing"]


# -- sweep -------------------------------------------------------------------------------


def toy_tables(rng, T=3, N=3, M=5):
    tabs = rng.dirichlet(np.ones(M), size=(T, N))
    return GroundTruthTables(np.arange(M + 1, dtype=float), tabs)


def test_sweep_shapes_and_order():
    rng = np.random.default_rng(1)
    tabs = toy_tables(rng)
    m = rng.uniform(1, 10, size=(3, 3, 5))
    sweep = SweepConfig(beta_min=0.5, beta_max=3.0, beta_step=0.5, horizon=3, angles=(5.0, 90.0, 180.0))
    curves = beta_sweep(tabs, m, sweep)
    assert len(curves) == 3
    for c in curves:
        assert c.betas.tolist() == sweep.betas().tolist()
        assert np.all(c.compute_costs >= 0) and np.all(c.compute_costs <= math.log(5) + 1e-12)


def test_sweep_x_independent_tables_are_flat():
    rng = np.random.default_rng(2)
    row = rng.dirichlet(np.ones(4), size=2)
    tabs = GroundTruthTables(np.arange(5.0), np.repeat(row[:, None, :], 2, axis=1))
    m = np.ones((2, 2, 4))
    sweep = SweepConfig(horizon=2, angles=(5.0, 150.0))
    curves = beta_sweep(tabs, m, sweep)
    # the level is KL of the shared row against uniform, averaged over t
    level = np.mean([np.sum(r * np.log(4 * r)) for r in row])
    for c in curves:
        np.testing.assert_allclose(c.compute_costs, level, atol=1e-9)
        np.testing.assert_allclose(c.control_costs, 2.0)


def test_sweep_uniform_tables_cost_nothing():
    tabs = GroundTruthTables(np.arange(5.0), np.full((2, 3, 4), 0.25))
    sweep = SweepConfig(horizon=2, angles=(5.0, 90.0, 150.0))
    for c in beta_sweep(tabs, np.ones((2, 3, 4)), sweep):
        np.testing.assert_allclose(c.compute_costs, 0.0, atol=1e-12)


def test_sweep_degenerate_grid():
    rng = np.random.default_rng(3)
    tabs = toy_tables(rng, T=2)
    sweep = SweepConfig(beta_min=1.0, beta_max=1.0, horizon=2, angles=(5.0, 90.0, 180.0))
    curves = beta_sweep(tabs, rng.uniform(size=(2, 3, 5)), sweep)
    assert all(len(c.points) == 1 and c.points[0].beta == 1.0 for c in curves)


def test_sweep_validates_alignment():
    rng = np.random.default_rng(4)
    tabs = toy_tables(rng, T=2)
    with pytest.raises(ValueError):
        beta_sweep(tabs, np.ones((2, 3, 5)), SweepConfig(horizon=2, angles=(5.0,)))
    with pytest.raises(ValueError):
        beta_sweep(tabs, np.ones((2, 3, 5)), SweepConfig(horizon=3, angles=(5.0, 10.0, 15.0)))
    with pytest.raises(ValueError):
        beta_sweep(tabs, np.ones((2, 3, 5)), SweepConfig(horizon=2, angles=(5.0, 10.0, 15.0)),
                   control_estimator="other")


def test_sweep_mean_signal_estimator_runs():
    rng = np.random.default_rng(5)
    tabs = GroundTruthTables(np.linspace(-1, 1, 6), rng.dirichlet(np.ones(5), size=(2, 2)))
    sweep = SweepConfig(beta_min=1.0, beta_max=1.0, horizon=2, angles=(5.0, 10.0))
    curves = beta_sweep(tabs, np.ones((2, 2, 5)), sweep, control_estimator="mean_signal")
    assert all(np.isfinite(c.control_costs).all() for c in curves)


def test_sweep_calls_hook_per_solve():
    rng = np.random.default_rng(6)
    tabs = toy_tables(rng, T=2)
    seen = []
    sweep = SweepConfig(beta_min=0.5, beta_max=1.0, beta_step=0.5, horizon=2, angles=(5.0, 90.0, 180.0))
    beta_sweep(tabs, rng.uniform(size=(2, 3, 5)), sweep, on_solution=lambda t, s: seen.append((t, s.beta)))
    assert sorted(seen) == [(0, 0.5), (0, 1.0), (1, 0.5), (1, 1.0)]


# -- CSV ---------------------------------------------------------------------------------


def test_tradeoff_csv_round_trip_and_order():
    curves = [curve(90.0, [3.0, 1.0 / 3.0]), curve(5.0, [2.0, 1.0])]
    text = tradeoff_csv(curves)
    lines = text.splitlines()
    assert lines[0] == "angle_deg,region,beta,compute_cost_nats,control_cost,converged"
    assert lines[1].startswith("5.0,Balancing,")
    back = read_tradeoff_csv(text)
    assert [c.initial_angle for c in back] == [5.0, 90.0]
    assert back[1].control_costs[1] == 1.0 / 3.0


def test_summary_csvs_have_one_row_each():
    curves = [curve(a, [5.0, 4.0]) for a in default_angles()]
    conds, regions = region_aggregate(curves)
    assert len(optimal_csv(conds).splitlines()) == 37
    assert len(regions_csv(regions).splitlines()) == 4
