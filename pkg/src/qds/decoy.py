"""Finite-size decoy-state bounds on Charlie's single-photon-pair statistics.

Gains enter the analytic bounds with a sign; each one is replaced by the
end of its Gaussian confidence interval that weakens the bound.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

from .tally import DECOY, SIGNAL, VACUUM, CountsTable

log = logging.getLogger(__name__)

N_ESTIMATIONS = 11
DEFAULT_EPS_PRIME = 7e-6 / N_ESTIMATIONS


class DecoyError(ValueError):
    pass


def normal_upper_tail(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def gamma_from_failure(eps_prime: float, tol: float = 1e-13) -> float:
    """Number of standard deviations whose Gaussian upper tail is ``eps_prime``."""
    if not 0.0 < eps_prime < 1.0:
        raise DecoyError(f"failure probability must lie in (0, 1), got {eps_prime}")
    lo, hi = -40.0, 40.0
    # tail is decreasing; keep Q(lo) >= eps > Q(hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if normal_upper_tail(mid) >= eps_prime:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def fluctuate_gain(q: float, n: float, gamma: float) -> tuple[float, float]:
    """Lower and upper gain after ``gamma`` standard errors of fluctuation.

    An empty cell (``q == 0``) stays at zero on both sides.
    """
    if n <= 0:
        raise DecoyError(f"pulse count must be positive, got {n}")
    if q < 0:
        raise DecoyError(f"gain must be non-negative, got {q}")
    if q == 0:
        return 0.0, 0.0
    spread = gamma / math.sqrt(n * q)
    return max(q * (1.0 - spread), 0.0), q * (1.0 + spread)


def _bounded(counts: CountsTable, which: str, a: int, b: int, gamma: float, upper: bool) -> float:
    n = counts.sent[a, b]
    if n <= 0:
        raise DecoyError(f"no pulses recorded for intensity set ({a},{b})")
    lo, hi = fluctuate_gain(getattr(counts, which)[a, b] / n, n, gamma)
    return hi if upper else lo


def _y11_raw(counts: CountsTable, gamma: float) -> float:
    mu, nu = counts.mu, counts.nu
    if not mu > nu > 0:
        raise DecoyError(f"need mu > nu > 0, got mu={mu}, nu={nu}")

    def q(a, b, upper):
        return _bounded(counts, "concl_c", a, b, gamma, upper)

    decoy_part = (math.exp(2 * nu) * q(DECOY, DECOY, False)
                  - math.exp(nu) * (q(DECOY, VACUUM, True) + q(VACUUM, DECOY, True)))
    signal_part = (math.exp(2 * mu) * q(SIGNAL, SIGNAL, True)
                   - math.exp(mu) * (q(SIGNAL, VACUUM, False) + q(VACUUM, SIGNAL, False)))
    total = mu**3 * decoy_part - nu**3 * signal_part + (mu**3 - nu**3) * q(VACUUM, VACUUM, False)
    return total / (mu**2 * nu**2 * (mu - nu))


def y11_lower(counts: CountsTable, gamma: float) -> float:
    """Lower bound on the yield of single-photon pairs with a conclusive
    result at Charlie, clamped to [0, 1]."""
    raw = _y11_raw(counts, gamma)
    if raw < 0:
        log.warning("single-photon yield bound is negative (%.3g); clamped to 0", raw)
    return min(max(raw, 0.0), 1.0)


def e11_upper(counts: CountsTable, y11: float, gamma: float) -> float:
    """Upper bound on the bit error rate of Charlie's single-photon-pair
    conclusive results, given the yield lower bound ``y11``."""
    if y11 <= 0:
        raise DecoyError("single-photon yield bound is zero; error-rate bound undefined")
    nu = counts.nu

    def eq(a, b, upper):
        return _bounded(counts, "err_c", a, b, gamma, upper)

    num = (math.exp(2 * nu) * eq(DECOY, DECOY, True)
           - math.exp(nu) * (eq(DECOY, VACUUM, False) + eq(VACUUM, DECOY, False))
           + eq(VACUUM, VACUUM, True))
    return min(max(num / (nu**2 * y11), 0.0), 1.0)


@dataclass(frozen=True)
class DecoyEstimate:
    y11_lower: float
    e11_upper: float | None
    gamma: float
    eps_prime: float
    n_estimations: int = N_ESTIMATIONS
    y11_clamped: bool = False

    @property
    def e11_suspicious(self) -> bool:
        return self.e11_upper is not None and self.e11_upper > 0.5


def estimate(counts: CountsTable, eps_prime: float = DEFAULT_EPS_PRIME) -> DecoyEstimate:
    """Both bounds at the confidence implied by ``eps_prime``.

    ``e11_upper`` is ``None`` when the yield bound collapses to zero.
    """
    gamma = gamma_from_failure(eps_prime)
    raw = _y11_raw(counts, gamma)
    y = y11_lower(counts, gamma)
    e = e11_upper(counts, y, gamma) if y > 0 else None
    return DecoyEstimate(y11_lower=float(y), e11_upper=None if e is None else float(e), gamma=gamma,
                         eps_prime=eps_prime, y11_clamped=bool(raw < 0))
