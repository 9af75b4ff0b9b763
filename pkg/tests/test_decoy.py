import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, optimize

from qds import decoy, photonic, reference
from qds.tally import CountsTable

import oracles


def _gamma_by_quadrature(eps):
    density = lambda x: math.exp(-x * x / 2) / math.sqrt(2 * math.pi)
    tail = lambda g: integrate.quad(density, g, math.inf)[0] - eps
    return optimize.brentq(tail, 0.0, 12.0, xtol=1e-12)


@pytest.mark.parametrize("eps", [0.1, 1e-3, decoy.DEFAULT_EPS_PRIME, 1e-10])
def test_gamma_matches_quadrature(eps):
    assert decoy.gamma_from_failure(eps) == pytest.approx(_gamma_by_quadrature(eps), abs=1e-8)


def test_default_gamma_value():
    # eps' = 7e-6 / 11 leaves about 4.844 standard deviations
    assert decoy.gamma_from_failure(decoy.DEFAULT_EPS_PRIME) == pytest.approx(4.84397, abs=1e-4)


def test_gamma_rejects_bad_probability():
    with pytest.raises(decoy.DecoyError):
        decoy.gamma_from_failure(0.0)


def test_fluctuation_example():
    gamma = decoy.gamma_from_failure(decoy.DEFAULT_EPS_PRIME)
    lo, hi = decoy.fluctuate_gain(1e-4, 1e9, gamma)
    spread = gamma / math.sqrt(1e9 * 1e-4)
    assert lo == pytest.approx(1e-4 * (1 - spread))
    assert hi == pytest.approx(1e-4 * (1 + spread))
    assert decoy.fluctuate_gain(0.0, 1e9, gamma) == (0.0, 0.0)
    assert decoy.fluctuate_gain(1e-9, 10, gamma)[0] == 0.0


@pytest.mark.parametrize("pub", reference.published_cells(), ids=lambda p: f"{p['distance_km']}km_m{p['message']}")
def test_bundled_cells_reproduce_published_bounds(pub):
    counts, _ = reference.load_cell(pub["distance_km"], pub["message"])
    est = decoy.estimate(counts)
    assert est.y11_lower == pytest.approx(pub["y11"], rel=0.10)
    assert abs(est.e11_upper - pub["e11"]) <= 1e-3
    assert not est.y11_clamped and not est.e11_suspicious


@pytest.mark.parametrize("name", photonic.PRESETS)
def test_infinite_data_bounds_bracket_exact_values(name):
    src, ch_b, ch_c = photonic.preset(name)
    exp = oracles.expected_counts(src, ch_b, ch_c, 1e16)
    table = CountsTable(**{k: np.rint(v).astype(np.int64) for k, v in exp.items()})
    est = decoy.estimate(table, eps_prime=0.5)  # zero standard deviations
    y_true, e_true = oracles.single_photon_pair_truth(
        ch_b.transmittance, ch_c.transmittance, ch_b.dark_probability(src.rep_rate),
        ch_c.dark_probability(src.rep_rate), ch_b.misalignment, ch_c.misalignment)
    assert est.y11_lower <= y_true
    assert est.y11_lower > 0.9 * y_true
    assert est.e11_upper >= e_true


@given(st.floats(0.5, 8.0), st.floats(0.1, 3.0))
def test_bounds_loosen_as_gamma_grows(g, extra):
    counts, _ = reference.load_cell(25, 1)
    y1 = decoy.y11_lower(counts, g)
    y2 = decoy.y11_lower(counts, g + extra)
    assert y2 <= y1
    assert decoy.e11_upper(counts, y1, g) <= decoy.e11_upper(counts, y2, g + extra) + 1e-15


def test_collapsed_yield_gives_undefined_error_bound():
    counts = CountsTable(sent=np.full((3, 3), 10**6), effective=np.zeros((3, 3), dtype=int))
    est = decoy.estimate(counts)
    assert est.y11_lower == 0.0 and est.e11_upper is None
    with pytest.raises(decoy.DecoyError):
        decoy.e11_upper(counts, 0.0, est.gamma)


def test_missing_intensity_set():
    counts, _ = reference.load_cell(25, 0)
    counts.sent[0, 0] = 0
    counts.effective[0, 0] = counts.concl_b[0, 0] = counts.concl_c[0, 0] = 0
    counts.err_b[0, 0] = counts.err_c[0, 0] = 0
    with pytest.raises(decoy.DecoyError, match="no pulses"):
        decoy.estimate(counts)
