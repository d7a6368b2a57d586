import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rwtail import asymptotics as A
from rwtail import dependence as dep
from rwtail import distributions as D
from rwtail.simulate import Phi

from conftest import TWO_POINT, UNIFORM_W, scenario

WITNESS = {"family": "log_periodic_pareto", "alpha": 2.0}
FGM_WEIGHT = {"copula": "fgm", "kappa": 0.5}
FGM_LOSS = {"copula": "fgm", "kappa": 0.3}


# ---------------------------------------------------------------------------
# product tails and Breiman constants


def test_product_tail_two_point_weights():
    assert A.product_tail(scenario(1, weights=TWO_POINT), 0, 10.0) == pytest.approx(0.025, abs=1e-12)


def test_product_tail_uniform_weights():
    assert A.product_tail(scenario(1, weights=UNIFORM_W), 0, 10.0) == pytest.approx(13 / 1200, rel=1e-9)


@pytest.mark.parametrize("x", [1.5, 10.0, 123.4, 1e5])
def test_unit_weight_gives_the_loss_tail(x):
    s = scenario(1, losses={"family": "frechet", "alpha": 1.5, "scale": 2.0})
    assert A.product_tail(s, 0, x) == pytest.approx(float(s.losses[0].sf(x)), rel=1e-12)


def test_product_tail_with_fgm_weight_link_against_mpmath():
    # P[Theta X > x] = E[f (1 + k e (1 - f))] with f = (theta / x)^2, e = 2 (theta - 0.5) - 1
    s = scenario(1, weights=UNIFORM_W, x_theta=FGM_WEIGHT)
    x = mp.mpf(10)

    def f(t):
        q = (t / x) ** 2
        return q * (1 + mp.mpf("0.5") * (2 * t - 2) * (1 - q))

    exact = float(mp.quad(f, [0.5, 1.5]))
    assert A.product_tail(s, 0, 10.0) == pytest.approx(exact, rel=1e-9)


def test_breiman_constant_examples():
    assert A.breiman_constant(D.Uniform(0.0, 1.0), 0.5, 2.0) == pytest.approx(5 / 12, abs=1e-8)
    assert A.breiman_constant(D.TwoPoint(1.0, 0.5, 2.0, 0.5), 0.0, 2.0) == pytest.approx(2.5, abs=1e-12)
    assert A.breiman_constant(D.BoundedDiscrete((3.0,), (1.0,)), 0.0, 2.5) == pytest.approx(3.0 ** 2.5, rel=1e-14)


def test_breiman_constant_unbounded_weights():
    # E[Theta^2] for Pareto(3, 1) is 3
    assert A.breiman_constant(D.Pareto(3.0), 0.0, 2.0) == pytest.approx(3.0, rel=1e-8)
    with pytest.raises(A.MomentConditionError, match="does not exceed alpha"):
        A.breiman_constant(D.Pareto(2.0), 0.0, 2.0)


def test_breiman_accepts_a_weight_link(s1):
    link = s1.link(0)
    assert A.breiman_constant(s1.weights[0], link, 2.0) == pytest.approx(
        A.breiman_constant(s1.weights[0], link.kappa, 2.0), rel=1e-15)


def test_rv_sum_tail_is_exact_for_pareto():
    one = scenario(1, weights=TWO_POINT)
    assert A.rv_sum_tail(one, 10.0).value == pytest.approx(0.025, abs=1e-12)
    assert A.rv_sum_tail(one, 10.0).value == pytest.approx(A.product_tail(one, 0, 10.0), rel=1e-12)
    two = scenario(2, weights=TWO_POINT)
    assert A.rv_sum_tail(two, 10.0).value == pytest.approx(0.05, abs=1e-12)


@pytest.mark.parametrize("weights", [TWO_POINT, UNIFORM_W])
def test_power_law_exactness_with_independent_weights(weights):
    s = scenario(1, weights=weights)
    for x in (3.0, 10.0, 40.0):
        assert A.product_tail(s, 0, x) == pytest.approx(A.rv_sum_tail(s, x).value, rel=1e-9)


def test_frechet_ratio_tends_to_one():
    s = scenario(1, losses={"family": "frechet", "alpha": 2.0, "scale": 1.0}, weights=UNIFORM_W)
    xs = 2.0 ** np.arange(1, 14)
    dev = np.array([abs(A.product_tail(s, 0, x) / A.rv_sum_tail(s, x).value - 1) for x in xs])
    assert np.all(np.diff(dev) < 0)
    assert dev[-1] < 1e-7


def test_rv_sum_tail_needs_regular_variation():
    s = scenario(1, losses={"family": "lognormal", "mu": 0.0, "sigma": 1.0})
    with pytest.raises(A.TheoremScopeError):
        A.rv_sum_tail(s, 10.0)


# ---------------------------------------------------------------------------
# first-order sum tails and scope


def test_sum_tail_first_order_examples():
    s = scenario(2, weights=UNIFORM_W)
    v = A.sum_tail_first_order(s, 10.0)
    assert v.value == pytest.approx(2 * 13 / 1200, rel=1e-9)
    assert v.tag == "sum-product-tails" and v.mask == ("sum", "partial_max", "max_summand")
    one = scenario(1, weights=TWO_POINT)
    assert A.sum_tail_first_order(one, 7.0).value == A.product_tail(one, 0, 7.0)


def test_pqai_mask_drops_the_max_summand():
    s = scenario(2, weights=UNIFORM_W, regime="pQAI")
    assert A.sum_tail_first_order(s, 10.0).mask == ("sum", "partial_max")
    assert A.masked_quantities(s) == ("max_summand", "stopped_max_summand")


def test_negative_control_is_refused():
    s = scenario(2, regime="negative-control", x_x={"copula": "survival_clayton", "theta": 1.0})
    for call in (lambda: A.sum_tail_first_order(s, 10.0), lambda: A.dclass_tail_bounds(s, 10.0),
                 lambda: A.ruin_first_order(s, 10.0), lambda: A.rv_sum_tail(s, 10.0)):
        with pytest.raises(A.TheoremScopeError, match="negative-control"):
            call()


def test_pqai_refuses_losses_outside_consistent_variation():
    s = scenario(1, losses=WITNESS, regime="pQAI")
    with pytest.raises(A.TheoremScopeError, match="not in C"):
        A.sum_tail_first_order(s, 10.0)


def test_light_dominated_loss_is_out_of_scope():
    s = scenario(1, losses={"family": "lognormal", "mu": 0.0, "sigma": 1.0})
    with pytest.raises(A.TheoremScopeError, match="dominatedly varying"):
        A.sum_tail_first_order(s, 10.0)


# ---------------------------------------------------------------------------
# joint product tails


def test_joint_tail_factorizes_under_independence():
    s = scenario(2, weights=UNIFORM_W)
    for xi, xj in [(10.0, 10.0), (4.0, 25.0), (100.0, 7.0)]:
        expected = A.product_tail(s, 0, xi) * A.product_tail(s, 1, xj)
        assert A.joint_product_tail(s, (0, 1), xi, xj) == pytest.approx(expected, rel=1e-9)
    plain = scenario(2)
    assert A.joint_product_tail(plain, (0, 1), 10.0, 10.0) == pytest.approx(1e-4, rel=1e-12)


def test_joint_tail_of_fgm_losses():
    # 1 - u - v + C(u, v) at u = v = 0.99 with C(u, v) = uv (1 + 0.3 (1 - u)(1 - v))
    s = scenario(2, x_x=FGM_LOSS)
    expected = 1e-4 * (1 + 0.3 * 0.99 * 0.99)
    assert A.joint_product_tail(s, (0, 1), 10.0, 10.0) == pytest.approx(expected, rel=1e-9)
    assert expected == pytest.approx(1.294e-4, rel=1e-3)


def test_joint_tail_agrees_with_simulation():
    s = scenario(2, weights=UNIFORM_W, x_theta=FGM_WEIGHT, x_x=FGM_LOSS,
                 theta_theta={"copula": "gaussian", "rho": 0.4})
    x = A.invert_level(lambda z: A.joint_product_tail(s, (0, 1), z, z), 1e-3)
    smp = dep.sample_joint(s.joint, 1, 10 ** 7, workers=4)
    prod = smp.theta * smp.x
    mc = np.mean((prod[:, 0] > x) & (prod[:, 1] > x))
    assert mc == pytest.approx(1e-3, rel=0.05)


# ---------------------------------------------------------------------------
# two-sided bounds


def test_bounds_collapse_for_consistent_variation(s1):
    lo, hi = A.dclass_tail_bounds(s1, 30.0)
    first = A.sum_tail_first_order(s1, 30.0).value
    assert lo.value == hi.value == first


def test_witness_bounds_scale_with_declared_index():
    s = scenario(2, losses=WITNESS, weights=UNIFORM_W)
    base = A.product_tails(s, 20.0).sum()
    lo, hi = A.dclass_tail_bounds(s, 20.0)
    assert lo.value == pytest.approx(0.8 * base, rel=1e-14)
    assert hi.value == pytest.approx(1.25 * base, rel=1e-14)


def test_phi_one_bounds_are_tail_bounds(s1):
    g = A.genmoment_bounds(s1, Phi("one"), 25.0)
    d = A.dclass_tail_bounds(s1, 25.0)
    assert [v.value for v in g] == pytest.approx([v.value for v in d], rel=1e-14)


def test_identity_moment_bounds():
    lo, hi = A.genmoment_bounds(scenario(1), Phi("identity"), 10.0)
    assert lo.value == pytest.approx(0.2, abs=1e-10) and hi.value == pytest.approx(0.2, abs=1e-10)
    lo, hi = A.genmoment_bounds(scenario(2), Phi("identity"), 10.0)
    assert lo.value == pytest.approx(0.4, abs=1e-10) and hi.value == pytest.approx(0.4, abs=1e-10)


def test_power_moment_against_closed_form():
    # E[X^1.5 1{X > 10}] = 2 * 10^(-0.5) / 0.5 for Pareto(2, 1)
    lo, _ = A.genmoment_bounds(scenario(1), Phi("power", p=1.5), 10.0)
    assert lo.value == pytest.approx(4 * 10 ** -0.5, rel=1e-9)


def test_witness_identity_moment_by_lattice_series():
    # Pareto part: (1 - w) * 0.2; lattice part: w * (10 * 2^-8 + 6 * 2^-8 + sum_{k>=4} 2^k * 2^(-2k-2))
    w = 4 / 15
    exact = (1 - w) * 0.2 + w * (16 / 256 + 1 / 32)
    assert A.partial_moment(scenario(1, losses=WITNESS), 0, Phi("identity"), 10.0) == pytest.approx(exact, rel=1e-10)


def test_moment_bounds_reject_divergent_phi():
    from rwtail.simulate import DivergenceError
    with pytest.raises(DivergenceError):
        A.genmoment_bounds(scenario(1), Phi("power", p=2.0), 10.0)


def test_es_bounds_examples():
    lo, hi = A.es_bounds(scenario(1), 10.0, 0.01)
    assert lo.value == pytest.approx(20.0, rel=1e-10) and hi.value == pytest.approx(20.0, rel=1e-10)
    w = scenario(2, losses=WITNESS, weights=TWO_POINT)
    lo, hi = A.es_bounds(w, 10.0, 0.02)
    assert hi.value / lo.value == pytest.approx(1 / 0.64, rel=1e-12)
    with pytest.raises(ValueError):
        A.es_bounds(scenario(1), 10.0, 0.0)


def test_mes_bounds_single_summand_are_es_bounds():
    s = scenario(1, weights=UNIFORM_W)
    b = A.mes_bounds(s, 0, 10.0, 0.011)
    lo, hi = A.es_bounds(s, 10.0, 0.011)
    assert b.lower.value == pytest.approx(lo.value, rel=1e-14)
    assert b.upper.value == pytest.approx(hi.value, rel=1e-14)
    assert not b.warnings


def test_mes_upper_is_half_the_es_for_exchangeable_pairs():
    s = scenario(2)
    x = 1000.0
    tail = A.sum_tail_first_order(s, x).value
    b = A.mes_bounds(s, 0, x, tail)
    es_lo, _ = A.es_bounds(s, x, tail)
    assert b.upper.value == pytest.approx(es_lo.value / 2, rel=1e-12)
    assert b.upper.value == pytest.approx(x, rel=1e-3)   # A(x) / 2 with A(x) = 2x


def test_mes_lower_bound_only_under_ptai():
    s = scenario(2, weights=UNIFORM_W, regime="pQAI")
    b = A.mes_bounds(s, 0, 10.0, 0.02)
    assert b.lower is None and b.upper.tag == "mes-upper"


def test_mes_dominance_warning():
    s = model_two_tails()
    b = A.mes_bounds(s, 0, 10.0, 0.05)
    assert any("summand 2" in w for w in b.warnings)


def model_two_tails():
    from rwtail import model
    rec = {"n": 2, "losses": [{"family": "pareto", "alpha": 3.0}, {"family": "pareto", "alpha": 2.0}],
           "weights": {"family": "bounded_discrete", "atoms": [1.0], "probs": [1.0]}, "regime": "pTAI"}
    return model.build_scenario(rec)


# ---------------------------------------------------------------------------
# stopped sums and ruin


def test_stopped_first_order_examples():
    s = scenario(3, weights=TWO_POINT, stopping={1: 1 / 3, 2: 1 / 3, 3: 1 / 3})
    v = A.stopped_first_order(s, 10.0)
    assert v.value == pytest.approx(0.05, abs=1e-12)
    assert v.extras["rv_value"] == pytest.approx(0.05, abs=1e-12)
    single = scenario(1, weights=UNIFORM_W, stopping={1: 1.0})
    assert A.stopped_first_order(single, 10.0).value == A.product_tail(single, 0, 10.0)


def test_stopped_first_order_needs_a_stopping_law():
    with pytest.raises(A.TheoremScopeError):
        A.stopped_first_order(scenario(1), 10.0)


def test_ruin_first_order_examples():
    s = scenario(2, weights=UNIFORM_W)
    p = A.product_tail(s, 0, 10.0)
    assert A.ruin_first_order(s, 10.0, 1).value == p
    assert A.ruin_first_order(s, 10.0, 2).value == pytest.approx(2 * p, rel=1e-15)
    r = scenario(2, weights=UNIFORM_W, stopping={1: 0.5, 2: 0.5})
    assert A.ruin_first_order(r, 10.0, random=True).value == pytest.approx(1.5 * p, rel=1e-15)
    with pytest.raises(ValueError):
        A.ruin_first_order(s, 10.0, 3)


def test_level_inversion_round_trips(s1):
    for level in (1e-3, 1e-5):
        x = A.level_to_x(s1, level)
        assert A.reference_sum(s1, x) == pytest.approx(level, rel=1e-10)


# ---------------------------------------------------------------------------
# invariants


def test_values_decrease_in_x(s1):
    xs = np.geomspace(2.0, 2000.0, 25)
    vals = [A.sum_tail_first_order(s1, x).value for x in xs]
    assert np.all(np.diff(vals) < 0)
    mom = [A.partial_moment(s1, 0, Phi("identity"), x) for x in xs]
    assert np.all(np.diff(mom) < 0)


@settings(max_examples=25, deadline=None)
@given(x=st.floats(1.5, 1e4), weight=st.floats(0.05, 0.6), n=st.integers(1, 3))
def test_lower_bound_never_exceeds_upper(x, weight, n):
    wit = {"family": "log_periodic_pareto", "alpha": 2.0, "weight": weight}
    s = scenario(n, losses=wit, weights=TWO_POINT, x_theta={"copula": "fgm", "kappa": -0.3})
    lo, hi = A.dclass_tail_bounds(s, x)
    assert 0 < lo.value <= hi.value
    glo, ghi = A.genmoment_bounds(s, Phi("identity"), x)
    assert glo.value <= ghi.value


# ---------------------------------------------------------------------------
# convergence reports


def test_verdict_rule():
    band = (0.9, 1.1)
    assert A.verdict(1.0, (0.95, 1.05), 0.02, band) == "within-tol"
    assert A.verdict(1.3, (1.2, 1.4), 0.05, band) == "outside-tol"
    assert A.verdict(1.15, (1.05, 1.25), 0.05, band) == "inconclusive"
    assert A.verdict(1.0, (0.2, 1.8), 0.4, band) == "inconclusive"
    assert A.verdict(math.nan, (math.nan, math.nan), math.nan, band) == "inconclusive"


def test_single_pareto_report_has_ratio_one():
    s = scenario(1)
    rep = A.convergence_report(s, "sum", [1e-2, 1e-3, 1e-4], A.MCSettings(m=10 ** 4, seed=3))
    assert rep.passed and rep.claimed
    assert rep.xs == sorted(rep.xs)
    for row in rep.rows:
        assert row.ratio == pytest.approx(1.0, rel=1e-12)
        assert row.verdict == "within-tol"
    assert rep.csv_rows()[0] == list(A.CSV_COLUMNS)


def test_report_grid_must_increase():
    row = A.ReportRow(1.0, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 1.0, "within-tol")
    with pytest.raises(ValueError):
        A.ConvergenceReport("sum", "h", "crude", 1, 0, 0.1, True, (row, row))


def test_pqai_reports_skip_the_max_summand():
    s = scenario(2, weights=UNIFORM_W, regime="pQAI")
    reps = A.convergence_reports(s, ["sum", "max_summand"], [1e-2], A.MCSettings(m=2 * 10 ** 4, seed=1))
    assert [r.quantity for r in reps] == ["sum"]


def test_shortfall_reports_share_one_run():
    s = scenario(2, weights=UNIFORM_W)
    reps = A.convergence_reports(s, ["es", "mes[1]", "mes[2]"], [1e-2], A.MCSettings(m=2 * 10 ** 5, seed=4))
    es, m1, m2 = (r.rows[0] for r in reps)
    assert m1.mc + m2.mc == pytest.approx(es.mc, rel=1e-12)
    assert all(r.method == "crude" for r in reps)
