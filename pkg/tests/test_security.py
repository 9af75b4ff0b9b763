import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from scipy import optimize, stats

from qds import decoy, reference, security as sec
from qds.tally import SamplingSplit, sampled_rates


# -- entropy and phase error -------------------------------------------------

def _h_mp(x):
    x = mpmath.mpf(x)
    return float(-x * mpmath.log(x, 2) - (1 - x) * mpmath.log(1 - x, 2))


@given(st.floats(1e-9, 1 - 1e-9))
def test_binary_entropy_matches_mpmath(x):
    assert sec.binary_entropy(x) == pytest.approx(_h_mp(x), abs=1e-12)


def test_binary_entropy_example_and_edges():
    assert sec.binary_entropy(0.0433) == pytest.approx(0.2572, abs=1e-4)
    assert sec.binary_entropy(0.0) == sec.binary_entropy(1.0) == 0.0
    with pytest.raises(ValueError):
        sec.binary_entropy(1.5)


def _phase_closed_form(e_b):
    # stationary point of x*e_b + f(x) solved by hand
    c = 1 - 3 * e_b
    u = c * math.sqrt(1.5) / math.sqrt(1 - c * c)
    x = (u + 3 / math.sqrt(2)) / 2
    f = (3 - 2 * x + math.sqrt(6 - 6 * math.sqrt(2) * x + 4 * x * x)) / 6
    return x, x * e_b + f


def test_phase_error_example():
    x, ep = _phase_closed_form(0.0112)
    assert x == pytest.approx(3.363, abs=1e-3)
    assert sec.phase_error_from_bit_error(0.0112) == pytest.approx(ep, abs=1e-9)
    assert round(ep, 4) == 0.2108


@given(st.floats(1e-6, 0.3))
def test_phase_error_matches_closed_form_and_numeric_minimum(e_b):
    got = sec.phase_error_from_bit_error(e_b)
    assert got == pytest.approx(_phase_closed_form(e_b)[1], abs=1e-8)
    res = optimize.minimize_scalar(lambda x: x * e_b + sec.phase_bound_kernel(x), bounds=(-50, 1e4),
                                   method="bounded", options={"xatol": 1e-10})
    assert got <= res.fun + 1e-9


def test_phase_error_at_zero_is_the_limit():
    assert sec.phase_error_from_bit_error(0.0) == pytest.approx((2 - math.sqrt(2)) / 4)
    assert sec.phase_error_from_bit_error(1e-9) == pytest.approx((2 - math.sqrt(2)) / 4, abs=1e-3)


def _cond_entropy_joint(e_p, e_b, a):
    joint = [1 + a - e_b - e_p, e_p - a, e_b - a, a]
    hj = -sum(p * math.log2(p) for p in joint if p > 0)
    return hj - sec.binary_entropy(e_b)


def test_conditional_entropy_example():
    assert sec.conditional_entropy(0.2108, 0.0112, 0.00164) == pytest.approx(0.7428, abs=1e-4)


@given(st.floats(1e-4, 0.2), st.floats(0.01, 0.4), st.floats(0, 1))
def test_conditional_entropy_is_joint_minus_marginal(e_b, e_p, frac):
    a = frac * min(e_b, e_p)
    assume(e_b + e_p - a <= 1)
    assert sec.conditional_entropy(e_p, e_b, a) == pytest.approx(_cond_entropy_joint(e_p, e_b, a), abs=1e-10)


@pytest.mark.parametrize("e11,s11", [(0.0112, 0.0433), (0.0129, 0.0410), (0.0103, 0.0446)])
def test_s11_examples(e11, s11):
    got = sec.solve_s11(e11)
    assert got == pytest.approx(s11, abs=1e-4)
    h, _, _ = sec.min_entropy_bound(e11)
    assert sec.binary_entropy(got) == pytest.approx(h, abs=1e-10)


@given(st.floats(1e-4, 0.05), st.floats(1e-4, 0.02))
def test_s11_decreases_with_error_rate(e, d):
    assert sec.solve_s11(e + d) <= sec.solve_s11(e) + 1e-12


@given(st.floats(0.0, 0.49))
def test_min_entropy_bound_positive_or_no_secrecy(e):
    try:
        h, e_p, _ = sec.min_entropy_bound(e)
    except sec.NoSecrecyError:
        assert sec.phase_error_from_bit_error(e) >= 0.5
    else:
        assert h > 0 and e_p < 0.5


def test_no_secrecy_at_high_error():
    with pytest.raises(sec.NoSecrecyError):
        sec.solve_s11(0.4)


def test_error_rate_outside_domain():
    with pytest.raises(ValueError):
        sec.solve_s11(0.5)


# -- sampling without replacement -------------------------------------------

def test_sampling_deviation_example():
    assert sec.sampling_deviation(137597, 321856, 1.519e-3, 1e-6) == pytest.approx(5.72e-4, rel=2e-3)


def test_sampling_deviation_degenerate_rates():
    assert sec.sampling_deviation(100, 100, 0.0, 1e-6) == math.inf
    assert sec.sampling_deviation(100, 100, 0.5, 0.9) == 0.0
    with pytest.raises(ValueError):
        sec.sampling_deviation(0, 100, 0.1, 1e-6)


@given(st.integers(50, 10**6), st.integers(50, 10**6), st.floats(1e-3, 0.5), st.floats(1e-12, 1e-2))
def test_sampling_deviation_shrinks_with_looser_failure(n, k, lam, eps):
    assert sec.sampling_deviation(n, k, lam, eps) >= sec.sampling_deviation(n, k, lam, eps * 10) >= 0.0


@given(st.integers(100, 10**6), st.integers(100, 10**6), st.floats(1e-3, 0.4), st.floats(1e-12, 1e-3))
def test_tail_and_deviation_are_inverse(n, k, lam, eps):
    g = sec.sampling_deviation(n, k, lam, eps)
    assume(0 < g < math.inf)
    assert sec.log_sampling_tail(n, k, lam, g) == pytest.approx(math.log(eps), abs=1e-6)


def _exact_violation(n, k, bad, eps):
    x = np.arange(bad + 1)
    pmf = stats.hypergeom.pmf(x, n + k, bad, n)
    gap = (bad - x) / k - x / n
    return pmf[gap > sec.sampling_deviation(n, k, bad / (n + k), eps)].sum()


def test_sampling_deviation_is_only_asymptotically_tight():
    # the expression is the leading term of a small-eps expansion; at moderate
    # eps it undershoots the exact tail by a small factor
    v = _exact_violation(10**4, 10**4, 200, 1e-2)
    assert 1e-2 < v < 3e-2
    v6 = _exact_violation(10**4, 10**4, 200, 1e-6)
    assert v6 < 2e-6
    assert _exact_violation(10**4, 10**4, 200, 1e-10) < 2e-10


# -- repudiation, forgery, robustness ---------------------------------------

@pytest.fixture(scope="module")
def cell25():
    counts, split = reference.load_cell(25, 0)
    return counts, split


def test_repudiation_example(cell25):
    _, sp = cell25
    rates = sampled_rates(sp)
    delta = rates.ds + sec.sampling_deviation(sp.m_s, sp.m_r, rates.ds, 1e-6)
    assert delta == pytest.approx(2.0911e-3, rel=1e-3)
    b1, b2 = sp.m_r_b * 0.006 / sp.m_r, sp.m_r_c * 0.02 / sp.m_r
    root = optimize.brentq(lambda x: (x - b1) ** 2 / (2 * x) - (b2 - x - delta) ** 2 / (3 * (x + delta)),
                           b1, b2 - delta, xtol=1e-15)
    a, eps = sec.repudiation_bound(sp.m_r, sp.m_r_b, sp.m_r_c, 0.006, 0.02, delta)
    assert a == pytest.approx(root, rel=1e-9)
    assert a == pytest.approx(2.0117e-3, rel=1e-3)
    assert eps == pytest.approx(7.1e-10, rel=0.1)


def test_repudiation_exponent_scales_with_length():
    _, e1 = sec.repudiation_bound(10**5, 25000, 25000, 0.006, 0.02, 1e-3)
    _, e2 = sec.repudiation_bound(2 * 10**5, 50000, 50000, 0.006, 0.02, 1e-3)
    assert e2 == pytest.approx(e1**2, rel=1e-9)


def test_empty_repudiation_interval():
    with pytest.raises(sec.ThresholdsInfeasibleError, match="empty repudiation interval"):
        sec.repudiation_bound(10**5, 25000, 25000, 0.019, 0.02, 1e-3)


def test_forgery_rules():
    assert sec.forgery_bound(0.04, 0.02, 1000, 100) == 1.0  # T_v11 = 0.2 >= S11
    e1 = sec.forgery_bound(0.0433, 0.02, 80000, 40000)
    e2 = sec.forgery_bound(0.0433, 0.02, 160000, 80000)
    assert e2 == pytest.approx(e1**2, rel=1e-9)
    assert sec.forgery_bound(0.0433, 0.02, 80000, 0.0) == 1.0


@given(st.floats(0.004, 0.05), st.floats(1e-4, 0.01))
def test_robustness_improves_with_larger_ta(t_a, dt):
    _, sp = reference.load_cell(51, 0)
    rates = sampled_rates(sp)
    r1 = sec.robustness_bound(sp.m_r, sp.m_s, rates.ds_b, t_a, sp.m_r_b)
    r2 = sec.robustness_bound(sp.m_r, sp.m_s, rates.ds_b, t_a + dt, sp.m_r_b)
    assert r2 <= r1


def test_honest_abort_when_threshold_below_sampled_rate():
    with pytest.raises(sec.HonestAbortError):
        sec.robustness_bound(1000, 1000, 0.01, 0.001, 250)


def test_exponential_forms_bound_exact_binomial_tails():
    n = 1000
    for true_rate in np.linspace(0.01, 0.2, 12):
        for frac in (0.2, 0.5, 0.8):
            lower = true_rate * frac
            exact = stats.binom.cdf(math.floor(n * lower), n, true_rate)
            assert exact <= math.exp(-((true_rate - lower) ** 2) / (2 * true_rate) * n)
            upper = true_rate * (1 + frac)
            exact_up = stats.binom.sf(math.ceil(n * upper) - 1, n, true_rate)
            assert exact_up <= math.exp(-((upper - true_rate) ** 2) / (3 * true_rate) * n)


# -- full analysis ---------------------------------------------------------

def test_total_security_clamps():
    assert sec.total_security(0.9, 0.9) == 1.0
    assert sec.total_security(0, 0) == pytest.approx(1e-6 + 7e-6)


def test_params_validation():
    with pytest.raises(ValueError):
        sec.SecurityParams(0.02, 0.01)
    with pytest.raises(ValueError):
        sec.SecurityParams(0.0, 0.01)


def test_analyze_25km(cell25):
    counts, sp = cell25
    r = sec.analyze(counts, sp, sec.SecurityParams(0.006, 0.02))
    assert r.secure and r.robust
    assert r.s11 == pytest.approx(0.0433, abs=1e-3)
    assert r.eps_rob == pytest.approx(8.2e-12, rel=0.1)
    assert r.eps_sec < 1e-5
    assert r.log10_eps_rep == pytest.approx(math.log10(r.eps_rep))
    assert r.inputs["split"]["m_r"] == sp.m_r


def test_report_round_trip(cell25):
    counts, sp = cell25
    r = sec.analyze(counts, sp, sec.SecurityParams(0.006, 0.02))
    again = sec.SecurityReport.from_dict(r.to_dict())
    assert again == r


def test_zero_sampled_errors_use_floor(cell25):
    counts, sp = cell25
    clean = SamplingSplit(sp.m_s, sp.m_r, sp.m_s_b, sp.m_r_b, sp.m_s_c, sp.m_r_c, 0, 0)
    r = sec.analyze(counts, clean, sec.SecurityParams(0.006, 0.02))
    assert r.delta > 0 and math.isfinite(r.delta)


def test_analyze_requires_defined_error_bound(cell25):
    counts, sp = cell25
    est = decoy.DecoyEstimate(0.0, None, 4.8, decoy.DEFAULT_EPS_PRIME)
    with pytest.raises(sec.NoSecrecyError):
        sec.analyze(counts, sp, sec.SecurityParams(0.006, 0.02), estimate=est)


@pytest.mark.parametrize("pub", reference.published_cells(), ids=lambda p: f"{p['distance_km']}km_m{p['message']}")
def test_threshold_search_meets_targets(pub):
    counts, sp = reference.load_cell(pub["distance_km"], pub["message"])
    t_a, t_v = sec.threshold_search(counts, sp)
    r = sec.analyze(counts, sp, sec.SecurityParams(t_a, t_v))
    assert r.secure and r.robust and t_a < t_v
    # the published thresholds are feasible too
    published = sec.analyze(counts, sp, sec.SecurityParams(pub["t_a"], pub["t_v"]))
    assert published.secure and published.robust


def test_threshold_search_reports_binding_constraint(cell25):
    counts, sp = cell25
    with pytest.raises(sec.ThresholdsInfeasibleError, match="binding constraint: eps_sec"):
        sec.threshold_search(counts, sp, target_sec=1e-12)
    with pytest.raises(sec.ThresholdsInfeasibleError, match="binding constraint: eps_rob"):
        sec.threshold_search(counts, sp, target_rob=1e-300, t_max=0.01)
