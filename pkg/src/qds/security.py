"""Entropy functions and the repudiation / forgery / robustness bounds.

Failure probabilities are computed from their natural logarithms so that
values far below the double-precision range of ``exp`` stay meaningful in
the ``log_*`` fields of :class:`SecurityReport`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from . import decoy
from .tally import DECOY, SIGNAL, CountsTable, SamplingSplit, sampled_rates

SQRT2 = math.sqrt(2.0)
# joint bit-flip/phase-shift probability per unit bit error rate
JOINT_FLIP_FACTOR = (2.0 - SQRT2) / 4.0
EPS_SAMPLING = 1e-6
ROOT_TOL = 1e-12


class SecurityError(ValueError):
    """Base for inputs under which a bound cannot be established."""


class NoSecrecyError(SecurityError):
    pass


class ThresholdsInfeasibleError(SecurityError):
    pass


class HonestAbortError(SecurityError):
    pass


def _bisect(fn, lo: float, hi: float, tol: float = ROOT_TOL, max_iter: int = 400) -> float:
    """Root of an increasing function on [lo, hi] with fn(lo) <= 0 <= fn(hi)."""
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if fn(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def binary_entropy(x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"binary entropy needs x in [0, 1], got {x}")
    if x in (0.0, 1.0):
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def phase_bound_kernel(x: float) -> float:
    return (3.0 - 2.0 * x + math.sqrt(6.0 - 6.0 * SQRT2 * x + 4.0 * x * x)) / 6.0


def _kernel_slope(x: float) -> float:
    return (-2.0 + (4.0 * x - 3.0 * SQRT2) / math.sqrt(6.0 - 6.0 * SQRT2 * x + 4.0 * x * x)) / 6.0


def phase_error_from_bit_error(e_b: float, tol: float = 1e-10) -> float:
    """Minimum over x of ``x*e_b + f(x)``.

    The objective is convex, so its slope is bisected. At ``e_b == 0`` the
    infimum is the x -> infinity limit ``(2 - sqrt 2) / 4``.
    """
    if not 0.0 <= e_b < 0.5:
        raise ValueError(f"bit error rate must lie in [0, 1/2), got {e_b}")
    if e_b == 0.0:
        return JOINT_FLIP_FACTOR
    lo, hi = -10.0, 10.0
    while e_b + _kernel_slope(hi) <= 0:
        hi *= 2.0
    x = _bisect(lambda t: e_b + _kernel_slope(t), lo, hi, tol)
    return x * e_b + phase_bound_kernel(x)


def conditional_entropy(e_p: float, e_b: float, a: float) -> float:
    """Entropy of the phase error given the bit error, with joint-flip
    probability ``a``."""
    if not (0.0 <= a <= min(e_b, e_p) and e_b + e_p - a <= 1.0 and e_b < 1.0):
        raise ValueError(f"invalid (e_p, e_b, a) = ({e_p}, {e_b}, {a})")

    def term(weight: float, ratio_den: float) -> float:
        if weight <= 0.0:
            return 0.0
        return -weight * math.log2(weight / ratio_den)

    return (term(1.0 + a - e_b - e_p, 1.0 - e_b)
            + term(e_p - a, 1.0 - e_b)
            + term(e_b - a, e_b)
            + term(a, e_b))


def min_entropy_bound(e11: float) -> tuple[float, float, float]:
    """Return ``(1 - H(e_p|e_b), e_p, a)`` for a single-photon error rate."""
    a = JOINT_FLIP_FACTOR * e11
    e_p = phase_error_from_bit_error(e11)
    if e_p >= 0.5:
        raise NoSecrecyError(f"phase error bound {e_p:.4g} >= 1/2 at e11={e11}; forgery is not bounded")
    return 1.0 - conditional_entropy(e_p, e11, a), e_p, a


def solve_s11(e11: float) -> float:
    """Lower bound on the mismatch rate a forger makes on Charlie's
    single-photon-pair conclusive results."""
    h, _, _ = min_entropy_bound(e11)
    if h <= 0.0:
        raise NoSecrecyError(f"min-entropy bound {h:.4g} <= 0 at e11={e11}; forgery is not bounded")
    if h >= 1.0:
        return 0.5
    return _bisect(lambda s: binary_entropy(s) - h, 0.0, 0.5)


def sampling_correction(n: float, k: float, lam: float) -> float:
    return math.exp(1.0 / (8.0 * (n + k)) + 1.0 / (12.0 * k)
                    - 1.0 / (12.0 * k * lam + 1.0) - 1.0 / (12.0 * k * (1.0 - lam) + 1.0))


def sampling_deviation(n: float, k: float, lam: float, eps: float) -> float:
    """Deviation of the rest-string rate from the sampled rate ``lam`` after
    sampling ``n`` of ``n + k`` items without replacement, failing with
    probability ``eps``."""
    if n < 1 or k < 1:
        raise ValueError(f"need n, k >= 1, got n={n}, k={k}")
    if lam <= 0.0 or lam >= 1.0:
        return math.inf
    var = lam * (1.0 - lam)
    arg = math.sqrt(n + k) * sampling_correction(n, k, lam) / (math.sqrt(2.0 * math.pi * n * k * var) * eps)
    if arg <= 1.0:
        return 0.0
    return math.sqrt(2.0 * (n + k) * var / (n * k) * math.log(arg))


def log_sampling_tail(n: float, k: float, lam: float, t: float) -> float:
    """Natural log of the sampling tail ``h(n, k, lam, t)``."""
    var = lam * (1.0 - lam)
    return (-n * k * t * t / (2.0 * (n + k) * var) + math.log(sampling_correction(n, k, lam))
            - 0.5 * math.log(2.0 * math.pi * n * k * var / (n + k)))


def _exp(log_value: float) -> float:
    return math.exp(min(log_value, 0.0))


def repudiation_root(b1: float, b2: float, delta: float) -> float:
    if not b1 < b2 - delta:
        raise ThresholdsInfeasibleError(
            f"empty repudiation interval: M_r^B T_a/M_r={b1:.4g} >= M_r^C T_v/M_r - Delta={b2 - delta:.4g}"
        )

    def balance(x: float) -> float:
        return (x - b1) ** 2 / (2.0 * x) - (b2 - (x + delta)) ** 2 / (3.0 * (x + delta))

    return _bisect(balance, b1, b2 - delta)


def repudiation_bound(m_r: int, m_r_b: int, m_r_c: int, t_a: float, t_v: float, delta: float) -> tuple[float, float]:
    """Crossover rate ``A`` and the probability of a successful repudiation."""
    a, log_eps = _repudiation(m_r, m_r_b, m_r_c, t_a, t_v, delta)
    return a, _exp(log_eps)


def _repudiation(m_r, m_r_b, m_r_c, t_a, t_v, delta):
    b1 = m_r_b * t_a / m_r
    b2 = m_r_c * t_v / m_r
    a = repudiation_root(b1, b2, delta)
    return a, -((a - b1) ** 2) / (2.0 * a) * m_r


def single_photon_conclusive_count(counts: CountsTable, y11: float, ratio_r: float) -> float:
    """Expected single-photon pairs among Charlie's conclusive rest-string results."""
    mu, nu = counts.mu, counts.nu
    n = counts.sent
    pairs = (n[SIGNAL, SIGNAL] * math.exp(-2 * mu) * mu * mu
             + n[SIGNAL, DECOY] * math.exp(-mu - nu) * mu * nu
             + n[DECOY, SIGNAL] * math.exp(-mu - nu) * mu * nu)
    return ratio_r * pairs * y11


def _forgery(s11, t_v, m_r_c, m_r11_c):
    if m_r11_c <= 0:
        return math.inf, 0.0
    t_v11 = t_v * m_r_c / m_r11_c
    if t_v11 >= s11:
        return t_v11, 0.0
    return t_v11, -((s11 - t_v11) ** 2) / (2.0 * s11) * m_r11_c


def forgery_bound(s11: float, t_v: float, m_r_c: int, m_r11_c: float) -> float:
    """Probability of a successful forgery; 1 when the single-photon
    threshold reaches ``s11``."""
    return _exp(_forgery(s11, t_v, m_r_c, m_r11_c)[1])


def _robustness(m_r, m_s, delta_s_b, t_a, m_r_b):
    t = m_r_b * t_a / m_r - delta_s_b
    if t <= 0:
        raise HonestAbortError(
            f"M_r^B T_a/M_r - Delta_s^B = {t:.4g} <= 0: honest runs would abort at T_a={t_a}"
        )
    lam = _floor_rate(delta_s_b, m_r + m_s)
    return log_sampling_tail(m_r, m_s, lam, t)


def robustness_bound(m_r: int, m_s: int, delta_s_b: float, t_a: float, m_r_b: int) -> float:
    """Probability that an honest Bob rejects."""
    return _exp(_robustness(m_r, m_s, delta_s_b, t_a, m_r_b))


def total_security(eps_for: float, eps_rep: float, eps_sampling: float = EPS_SAMPLING,
                   eps_prime: float = decoy.DEFAULT_EPS_PRIME) -> float:
    return min(1.0, eps_for + eps_rep + eps_sampling + decoy.N_ESTIMATIONS * eps_prime)


def _floor_rate(rate: float, total: int) -> float:
    # a zero observed mismatch rate is replaced by one mismatch in the whole string
    return max(rate, 1.0 / total)


@dataclass(frozen=True)
class SecurityParams:
    t_a: float
    t_v: float
    eps_sampling: float = EPS_SAMPLING
    eps_prime: float = decoy.DEFAULT_EPS_PRIME
    target_sec: float = 1e-5
    target_rob: float = 1e-6

    def __post_init__(self) -> None:
        if not 0.0 < self.t_a < self.t_v < 0.5:
            raise ValueError(f"thresholds must satisfy 0 < T_a < T_v < 1/2, got T_a={self.t_a}, T_v={self.t_v}")


@dataclass
class SecurityReport:
    params: SecurityParams
    es_b: float
    es_c: float
    delta_s_b: float
    delta_s_c: float
    delta_s: float
    delta: float
    y11_lower: float
    e11_upper: float
    a: float
    e_p11: float
    s11: float
    m_r11_c: float
    t_v11: float
    crossover: float
    eps_rep: float
    eps_for: float
    eps_rob: float
    eps_sec: float
    log10_eps_rep: float
    log10_eps_for: float
    log10_eps_rob: float
    inputs: dict = field(default_factory=dict)

    @property
    def secure(self) -> bool:
        return self.eps_sec < self.params.target_sec

    @property
    def robust(self) -> bool:
        return self.eps_rob < self.params.target_rob

    def to_dict(self) -> dict:
        out = asdict(self)
        out["secure"] = self.secure
        out["robust"] = self.robust
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SecurityReport":
        data = {k: v for k, v in data.items() if k not in ("secure", "robust")}
        data["params"] = SecurityParams(**data["params"])
        return cls(**data)


def analyze(counts: CountsTable, split: SamplingSplit, params: SecurityParams,
            estimate: decoy.DecoyEstimate | None = None) -> SecurityReport:
    """Full security report of one group at thresholds ``params``.

    Raises a :class:`SecurityError` subclass when a bound cannot be formed.
    """
    est = estimate or decoy.estimate(counts, params.eps_prime)
    if est.e11_upper is None:
        raise NoSecrecyError("single-photon yield bound is zero; no forgery bound")
    rates = sampled_rates(split)
    ds = _floor_rate(rates.ds, split.m)
    delta = rates.ds + sampling_deviation(split.m_s, split.m_r, ds, params.eps_sampling)

    crossover, log_rep = _repudiation(split.m_r, split.m_r_b, split.m_r_c, params.t_a, params.t_v, delta)
    h, e_p, a = min_entropy_bound(est.e11_upper)
    s11 = solve_s11(est.e11_upper)
    m_r11_c = single_photon_conclusive_count(counts, est.y11_lower, split.m_r / split.m)
    t_v11, log_for = _forgery(s11, params.t_v, split.m_r_c, m_r11_c)
    log_rob = _robustness(split.m_r, split.m_s, rates.ds_b, params.t_a, split.m_r_b)

    eps_rep, eps_for, eps_rob = _exp(log_rep), _exp(log_for), _exp(log_rob)
    ln10 = math.log(10.0)
    return SecurityReport(
        params=params,
        es_b=rates.es_b, es_c=rates.es_c,
        delta_s_b=rates.ds_b, delta_s_c=rates.ds_c, delta_s=rates.ds, delta=delta,
        y11_lower=est.y11_lower, e11_upper=est.e11_upper,
        a=a, e_p11=e_p, s11=s11, m_r11_c=m_r11_c, t_v11=t_v11, crossover=crossover,
        eps_rep=eps_rep, eps_for=eps_for, eps_rob=eps_rob,
        eps_sec=total_security(eps_for, eps_rep, params.eps_sampling, params.eps_prime),
        log10_eps_rep=min(log_rep, 0.0) / ln10,
        log10_eps_for=min(log_for, 0.0) / ln10,
        log10_eps_rob=min(log_rob, 0.0) / ln10,
        inputs={
            "mu": counts.mu, "nu": counts.nu,
            "sent": counts.sent.tolist(), "effective": counts.effective.tolist(),
            "concl_b": counts.concl_b.tolist(), "concl_c": counts.concl_c.tolist(),
            "err_b": counts.err_b.tolist(), "err_c": counts.err_c.tolist(),
            "split": asdict(split),
            "gamma": est.gamma,
        },
    )


def threshold_search(counts: CountsTable, split: SamplingSplit,
                     estimate: decoy.DecoyEstimate | None = None,
                     target_sec: float = 1e-5, target_rob: float = 1e-6,
                     step: float = 5e-4, t_max: float = 0.1,
                     eps_sampling: float = EPS_SAMPLING,
                     eps_prime: float = decoy.DEFAULT_EPS_PRIME) -> tuple[float, float]:
    """Grid search for thresholds meeting both targets.

    Among feasible pairs the one with the smallest robustness failure wins;
    ties go to the smallest ``T_v``, then the largest ``T_a``.
    """
    est = estimate or decoy.estimate(counts, eps_prime)
    if est.e11_upper is None:
        raise NoSecrecyError("single-photon yield bound is zero; no forgery bound")
    rates = sampled_rates(split)
    delta = rates.ds + sampling_deviation(split.m_s, split.m_r, _floor_rate(rates.ds, split.m), eps_sampling)
    s11 = solve_s11(est.e11_upper)
    m_r11_c = single_photon_conclusive_count(counts, est.y11_lower, split.m_r / split.m)
    floor = eps_sampling + decoy.N_ESTIMATIONS * eps_prime

    grid = [round(i * step, 12) for i in range(1, int(round(t_max / step)) + 1)]
    best = None
    rob_ok = False
    for t_a in reversed(grid):
        try:
            log_rob = _robustness(split.m_r, split.m_s, rates.ds_b, t_a, split.m_r_b)
        except HonestAbortError:
            break
        if _exp(log_rob) >= target_rob or (best is not None and log_rob > best[0]):
            # robustness only worsens as T_a shrinks
            break
        rob_ok = True
        for t_v in grid:
            if t_v <= t_a or t_v >= 0.5:
                continue
            try:
                _, log_rep = _repudiation(split.m_r, split.m_r_b, split.m_r_c, t_a, t_v, delta)
            except ThresholdsInfeasibleError:
                continue
            log_for = _forgery(s11, t_v, split.m_r_c, m_r11_c)[1]
            if _exp(log_for) + _exp(log_rep) + floor < target_sec:
                key = (log_rob, t_v, -t_a)
                if best is None or key < best:
                    best = key
                break
    if best is None:
        binding = "eps_sec" if rob_ok else "eps_rob"
        raise ThresholdsInfeasibleError(
            f"no (T_a, T_v) on a {step} grid up to {t_max} meets eps_sec < {target_sec} "
            f"and eps_rob < {target_rob}; binding constraint: {binding}"
        )
    return -best[2], best[1]
