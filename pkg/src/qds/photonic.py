"""Monte-Carlo model of the quantum stage.

Alice emits phase-randomised weak coherent pulse pairs (one arm to Bob, one
to Charlie) carrying the same BB84 state; each receiver measures in a random
basis behind a lossy fibre and threshold detectors.

Randomness is drawn from Philox substreams keyed by ``(seed, stream, block)``
where a block is a fixed range of pulse positions, so results do not depend
on how blocks are spread over worker processes.

Two samplers are provided. ``"pulse"`` walks every emitted pulse pair and
also tallies the true single-photon-pair statistics. ``"coincidence"`` draws
the number of coincident clicks per intensity set directly and then samples
each retained event conditioned on both arms clicking; it has the same
distribution of retained events but costs time proportional to the number of
clicks, which makes full experimental pulse counts affordable.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .states import (Basis, PolarizationState, announced_pair_codes, sift_codes)
from .tally import CountsTable, EventStream, accumulate

PULSE_BLOCK = 1 << 20
COINCIDENCE_BLOCK = 1 << 26

STREAM_PULSE = 0
STREAM_COINCIDENCE = 1
STREAM_SAMPLING = 2
STREAM_SOURCE = 3


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox generator for ``(seed, *key)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=tuple(key))))


@dataclass(frozen=True)
class SourceConfig:
    """Weak-coherent pulse-pair source.

    Intensity probabilities are stored as given and normalised on use.
    """

    mu: float = 0.22
    nu: float = 0.066
    omega: float = 0.0
    p_mu: float = 0.65
    p_nu: float = 0.35
    p_omega: float = 0.05
    rep_rate: float = 75e6

    def __post_init__(self) -> None:
        if self.omega != 0.0:
            raise ValueError("the vacuum intensity omega must be 0")
        if not self.mu > self.nu > self.omega:
            raise ValueError(f"need mu > nu > omega, got {self.mu}, {self.nu}, {self.omega}")
        probs = (self.p_omega, self.p_nu, self.p_mu)
        if min(probs) < 0 or sum(probs) <= 0:
            raise ValueError(f"intensity probabilities must be non-negative with a positive sum, got {probs}")
        if self.rep_rate <= 0:
            raise ValueError("rep_rate must be positive")

    @property
    def intensities(self) -> np.ndarray:
        """Mean photon numbers indexed by level (vacuum, decoy, signal)."""
        return np.array([self.omega, self.nu, self.mu])

    @property
    def level_probs(self) -> np.ndarray:
        p = np.array([self.p_omega, self.p_nu, self.p_mu], dtype=float)
        return p / p.sum()

    @property
    def set_probs(self) -> np.ndarray:
        """Joint probabilities of the nine intensity sets, flattened row-major."""
        return np.outer(self.level_probs, self.level_probs).ravel()


@dataclass(frozen=True)
class ChannelConfig:
    attenuation_db: float
    insertion_loss_db: float = 1.2
    detector_efficiency: float = 0.52
    dark_count_rate: float = 10.0
    misalignment: float = 0.0

    def __post_init__(self) -> None:
        if self.attenuation_db < 0 or self.insertion_loss_db < 0:
            raise ValueError("losses must be non-negative")
        for name in ("detector_efficiency", "misalignment"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.dark_count_rate < 0:
            raise ValueError("dark_count_rate must be non-negative")

    @property
    def transmittance(self) -> float:
        return self.detector_efficiency * 10 ** (-(self.attenuation_db + self.insertion_loss_db) / 10)

    def dark_probability(self, rep_rate: float) -> float:
        p = self.dark_count_rate / rep_rate
        if p > 1:
            raise ValueError("dark count rate exceeds the repetition rate")
        return p


def misalignment_for_error_rate(error_rate: float) -> float:
    """Flip probability giving conclusive error rate ``error_rate``.

    A flip only produces a conclusive result (always a wrong one) when the
    receiver measured in the sent basis, so the rate is ``(e/2) / (1/4 + e/2)``.
    """
    return error_rate / (2.0 * (1.0 - error_rate))


# attenuation (dB) and the sampled conclusive error rates at Bob and Charlie,
# averaged over the two message slots of each distance
_PRESET_TABLE = {
    "25km": (4.9, 0.0037, 0.00275),
    "51km": (9.8, 0.0037, 0.00235),
    "76km": (14.8, 0.00325, 0.0028),
    "102km": (19.8, 0.0048, 0.0041),
}
PRESET_THRESHOLDS = {
    "25km": (0.006, 0.020),
    "51km": (0.006, 0.020),
    "76km": (0.0055, 0.019),
    "102km": (0.007, 0.022),
}
PRESET_PULSES = {"25km": 1_500_000_000, "51km": 13_500_000_000,
                 "76km": 121_500_000_000, "102km": 2_506_500_000_000}
PRESETS = tuple(_PRESET_TABLE)


def preset(name: str) -> tuple[SourceConfig, ChannelConfig, ChannelConfig]:
    """Source and the two (symmetric) channels of a laboratory distance."""
    try:
        att, err_b, err_c = _PRESET_TABLE[name]
    except KeyError:
        raise ValueError(f"unknown distance preset {name!r}; choose from {', '.join(PRESETS)}") from None
    return (SourceConfig(),
            ChannelConfig(att, misalignment=misalignment_for_error_rate(err_b)),
            ChannelConfig(att, misalignment=misalignment_for_error_rate(err_c)))


# -- single-pulse reference path ------------------------------------------

@dataclass(frozen=True)
class PulsePairRecord:
    position: int
    state: PolarizationState
    intensity_b: int
    intensity_c: int
    photons_b: int
    photons_c: int


@dataclass(frozen=True)
class DetectionRecord:
    position: int
    basis: Basis
    outcome: PolarizationState
    is_dark_or_double: bool


def sample_pair(cfg: SourceConfig, rng: np.random.Generator, position: int = 0) -> PulsePairRecord:
    level_b, level_c = rng.choice(3, size=2, p=cfg.level_probs)
    state = PolarizationState(int(rng.integers(0, 4)))
    intens = cfg.intensities
    return PulsePairRecord(position, state, int(level_b), int(level_c),
                           int(rng.poisson(intens[level_b])), int(rng.poisson(intens[level_c])))


def transmit_and_detect(n_photons: int, ch: ChannelConfig, basis: Basis, true_state: PolarizationState,
                        rng: np.random.Generator, rep_rate: float = 75e6,
                        position: int = 0) -> DetectionRecord | None:
    """Send ``n_photons`` through ``ch`` and measure in ``basis``; ``None`` if
    neither detector clicks."""
    if n_photons < 0:
        raise ValueError("photon number must be non-negative")
    survivors = rng.binomial(n_photons, ch.transmittance)
    if true_state.basis is basis:
        p_zero = 1.0 - ch.misalignment if (true_state & 1) == 0 else ch.misalignment
    else:
        p_zero = 0.5
    on_zero = rng.binomial(survivors, p_zero)
    dark = rng.random(2) < ch.dark_probability(rep_rate)
    clicks = (on_zero > 0 or dark[0], survivors - on_zero > 0 or dark[1])
    if not any(clicks):
        return None
    if all(clicks):
        idx = int(rng.integers(0, 2))
    else:
        idx = 0 if clicks[0] else 1
    noisy = all(clicks) or bool(dark.any())
    return DetectionRecord(position, basis, basis.states[idx], noisy)


# -- vectorised samplers ----------------------------------------------------

def _assign_outcomes(survivors, dark0, dark1, basis, state, misalignment, rng):
    """Detector outcomes for arms known to click."""
    same = (state >> 1) == basis
    p_zero = np.where(same, np.where((state & 1) == 0, 1.0 - misalignment, misalignment), 0.5)
    on_zero = rng.binomial(survivors, p_zero)
    c0 = (on_zero > 0) | dark0
    c1 = (survivors - on_zero > 0) | dark1
    both = c0 & c1
    tie = rng.integers(0, 2, len(survivors), dtype=np.int8)
    idx = np.where(both, tie, np.where(c0, 0, 1)).astype(np.int8)
    return (basis * 2 + idx).astype(np.int8)


def _sparse_darks(size: int, p_dark: float, rng) -> tuple[np.ndarray, np.ndarray]:
    d = np.zeros((size, 2), dtype=bool)
    if p_dark > 0:
        hits = rng.binomial(2 * size, p_dark)
        if hits:
            d.ravel()[rng.choice(2 * size, hits, replace=False)] = True
    return d[:, 0], d[:, 1]


@dataclass
class SinglePhotonTally:
    """Ground truth for pulse pairs with exactly one photon in each arm."""

    pairs: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), dtype=np.int64))
    conclusive_c: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), dtype=np.int64))
    errors_c: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), dtype=np.int64))

    def __add__(self, other: "SinglePhotonTally") -> "SinglePhotonTally":
        return SinglePhotonTally(self.pairs + other.pairs, self.conclusive_c + other.conclusive_c,
                                 self.errors_c + other.errors_c)

    @property
    def y11(self) -> float:
        return self.conclusive_c.sum() / self.pairs.sum()

    @property
    def e11(self) -> float:
        return self.errors_c.sum() / self.conclusive_c.sum()


def _events(position, state, coin, level_b, level_c, basis_b, outcome_b, basis_c, outcome_c, sent):
    first, second = announced_pair_codes(state, coin)
    return EventStream(position=position.astype(np.int64), state=state, coin=coin,
                       level_b=level_b, level_c=level_c, basis_b=basis_b, outcome_b=outcome_b,
                       basis_c=basis_c, outcome_c=outcome_c,
                       sift_b=sift_codes(first, second, outcome_b),
                       sift_c=sift_codes(first, second, outcome_c), sent=sent)


_PHOTON_CATEGORIES = 4  # photon numbers 0, 1, 2 and ">= 3" per level; bit layout below relies on 4


def _level_photon_table(src: SourceConfig) -> np.ndarray:
    """Cumulative probabilities of (level, photon-number category) for one arm."""
    probs = []
    for p_level, lam in zip(src.level_probs, src.intensities):
        pmf = [math.exp(-lam) * lam**j / math.factorial(j) for j in range(_PHOTON_CATEGORIES - 1)]
        probs.extend(p_level * np.array(pmf + [max(1.0 - sum(pmf), 0.0)]))
    cdf = np.cumsum(probs)
    return cdf[:-1] / cdf[-1]


def _draw_arm(src: SourceConfig, cdf: np.ndarray, size: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Intensity level and photon number of one arm from a single uniform each."""
    cat = np.searchsorted(cdf, rng.random(size), side="right").astype(np.int8)
    level = cat >> 2
    photons = (cat & 3).astype(np.int64)
    tail = np.flatnonzero(photons == _PHOTON_CATEGORIES - 1)
    if len(tail):
        lam = src.intensities[level[tail]]
        photons[tail] = _poisson_at_least(lam, _PHOTON_CATEGORIES - 1, rng.random(len(tail)))
    return level, photons


def _pulse_block(src: SourceConfig, ch_b: ChannelConfig, ch_c: ChannelConfig, seed: int, block: int, start: int,
                 size: int) -> tuple[EventStream, SinglePhotonTally]:
    rng = substream(seed, STREAM_PULSE, block)
    cdf = _level_photon_table(src)
    level_b, n_b = _draw_arm(src, cdf, size, rng)
    level_c, n_c = _draw_arm(src, cdf, size, rng)
    state = rng.integers(0, 4, size, dtype=np.int8)
    coin = rng.integers(0, 2, size, dtype=np.int8)
    basis_b = rng.integers(0, 2, size, dtype=np.int8)
    basis_c = rng.integers(0, 2, size, dtype=np.int8)
    k_b = _survivors(n_b, ch_b.transmittance, rng)
    k_c = _survivors(n_c, ch_c.transmittance, rng)
    d0_b, d1_b = _sparse_darks(size, ch_b.dark_probability(src.rep_rate), rng)
    d0_c, d1_c = _sparse_darks(size, ch_c.dark_probability(src.rep_rate), rng)

    eff = ((k_b > 0) | d0_b | d1_b) & ((k_c > 0) | d0_c | d1_c)
    idx = np.flatnonzero(eff)
    out_b = _assign_outcomes(k_b[idx], d0_b[idx], d1_b[idx], basis_b[idx], state[idx], ch_b.misalignment, rng)
    out_c = _assign_outcomes(k_c[idx], d0_c[idx], d1_c[idx], basis_c[idx], state[idx], ch_c.misalignment, rng)

    cell = level_b.astype(np.intp) * 3 + level_c
    sent = np.bincount(cell, minlength=9).reshape(3, 3).astype(np.int64)
    ev = _events(start + idx, state[idx], coin[idx], level_b[idx], level_c[idx],
                 basis_b[idx], out_b, basis_c[idx], out_c, sent)

    single = (n_b == 1) & (n_c == 1)
    single_eff = single[idx]
    concl = single_eff & (ev.sift_c >= 0)
    wrong = concl & (ev.sift_c != ev.alice_bit)
    ev_cell = cell[idx]
    truth = SinglePhotonTally(
        pairs=np.bincount(cell[single], minlength=9).reshape(3, 3).astype(np.int64),
        conclusive_c=np.bincount(ev_cell[concl], minlength=9).reshape(3, 3).astype(np.int64),
        errors_c=np.bincount(ev_cell[wrong], minlength=9).reshape(3, 3).astype(np.int64),
    )
    return ev, truth


def _survivors(photons: np.ndarray, eta: float, rng) -> np.ndarray:
    out = np.zeros(len(photons), dtype=np.int64)
    lit = np.flatnonzero(photons)
    out[lit] = rng.binomial(photons[lit], eta)
    return out


def _poisson_at_least(lam: np.ndarray, m: int, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw from Poisson(lam) conditioned on being >= m (lam > 0)."""
    lam = np.asarray(lam, dtype=float)
    k = np.full(len(lam), m, dtype=np.int64)
    # P(X = m) / P(X >= m); gammainc(m, lam) is P(X >= m) for m >= 1
    tail_mass = special.gammainc(m, lam) if m > 0 else np.ones_like(lam)
    term = np.exp(m * np.log(lam) - lam - special.gammaln(m + 1)) / tail_mass
    cdf = term.copy()
    todo = u > cdf
    n = m
    while todo.any() and n < m + 400:
        n += 1
        term = term * lam / n
        cdf = cdf + term
        k[todo] += 1
        todo &= u > cdf
    return k


def _conditional_arm(levels, intens, ch: ChannelConfig, rep_rate, rng):
    """Surviving photons and dark clicks of an arm, given that it clicked."""
    size = len(levels)
    lam = intens[levels] * ch.transmittance
    pd = ch.dark_probability(rep_rate)
    p_photon = -np.expm1(-lam)
    p_click = 1.0 - np.exp(-lam) * (1.0 - pd) ** 2
    frac = np.divide(p_photon, p_click, out=np.zeros_like(p_photon), where=p_click > 0)
    photon = rng.random(size) < frac
    survivors = np.zeros(size, dtype=np.int64)
    lit = np.flatnonzero(photon)
    survivors[lit] = _poisson_at_least(lam[lit], 1, rng.random(len(lit)))
    free_dark = rng.random((size, 2)) < pd
    # with no photon at least one detector fired in the dark: (1,0), (0,1) or (1,1)
    forced = rng.choice(3, size, p=_forced_dark_probs(pd)) if pd > 0 else np.zeros(size, dtype=np.intp)
    dark0 = np.where(photon, free_dark[:, 0], forced != 1)
    dark1 = np.where(photon, free_dark[:, 1], forced != 0)
    return survivors, dark0, dark1


def _forced_dark_probs(pd: float) -> np.ndarray:
    w = np.array([pd * (1 - pd), pd * (1 - pd), pd * pd])
    return w / w.sum()


def _coincidence_block(src: SourceConfig, ch_b: ChannelConfig, ch_c: ChannelConfig, seed: int, block: int,
                       start: int, size: int) -> tuple[EventStream, None]:
    rng = substream(seed, STREAM_COINCIDENCE, block)
    intens = src.intensities
    sent = rng.multinomial(size, src.set_probs)

    def click_prob(ch):
        pd = ch.dark_probability(src.rep_rate)
        return 1.0 - np.exp(-intens * ch.transmittance) * (1.0 - pd) ** 2

    p_coinc = np.outer(click_prob(ch_b), click_prob(ch_c)).ravel()
    hits = rng.binomial(sent, np.clip(p_coinc, 0.0, 1.0))
    total = int(hits.sum())
    offsets = np.sort(rng.choice(size, total, replace=False)) if total else np.zeros(0, dtype=np.int64)
    labels = np.repeat(np.arange(9), hits)
    rng.shuffle(labels)
    level_b = (labels // 3).astype(np.int8)
    level_c = (labels % 3).astype(np.int8)
    state = rng.integers(0, 4, total, dtype=np.int8)
    coin = rng.integers(0, 2, total, dtype=np.int8)
    basis_b = rng.integers(0, 2, total, dtype=np.int8)
    basis_c = rng.integers(0, 2, total, dtype=np.int8)
    k_b, d0_b, d1_b = _conditional_arm(level_b, intens, ch_b, src.rep_rate, rng)
    k_c, d0_c, d1_c = _conditional_arm(level_c, intens, ch_c, src.rep_rate, rng)
    out_b = _assign_outcomes(k_b, d0_b, d1_b, basis_b, state, ch_b.misalignment, rng)
    out_c = _assign_outcomes(k_c, d0_c, d1_c, basis_c, state, ch_c.misalignment, rng)
    ev = _events(start + offsets, state, coin, level_b, level_c, basis_b, out_b, basis_c, out_c,
                 sent.reshape(3, 3).astype(np.int64))
    return ev, None


_SAMPLERS = {"pulse": (_pulse_block, PULSE_BLOCK), "coincidence": (_coincidence_block, COINCIDENCE_BLOCK)}


def _run_block(args):
    method, src, ch_b, ch_c, seed, block, start, size = args
    return _SAMPLERS[method][0](src, ch_b, ch_c, seed, block, start, size)


@dataclass
class QuantumStageResult:
    events: EventStream
    counts: CountsTable
    truth: SinglePhotonTally | None
    n_pulses: int
    method: str


def run_quantum_stage(src: SourceConfig, ch_b: ChannelConfig, ch_c: ChannelConfig, n_pulses: int, seed: int,
                      method: str = "pulse", workers: int = 1) -> QuantumStageResult:
    """Simulate ``n_pulses`` pulse pairs and keep the coincident clicks.

    ``truth`` (single-photon-pair tallies) is only recorded by the pulse
    sampler.
    """
    if n_pulses < 1:
        raise ValueError("n_pulses must be at least 1")
    if method not in _SAMPLERS:
        raise ValueError(f"unknown sampler {method!r}; choose 'pulse' or 'coincidence'")
    block_size = _SAMPLERS[method][1]
    n_blocks = math.ceil(n_pulses / block_size)
    jobs = [(method, src, ch_b, ch_c, seed, b, b * block_size, min(block_size, n_pulses - b * block_size))
            for b in range(n_blocks)]
    if workers > 1 and n_blocks > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_block, jobs, chunksize=max(1, n_blocks // (4 * workers))))
    else:
        parts = [_run_block(job) for job in jobs]
    events = EventStream.concat([p[0] for p in parts])
    truth = None
    if method == "pulse":
        truth = sum((p[1] for p in parts), SinglePhotonTally())
    counts = accumulate(events, mu=src.mu, nu=src.nu, duration_s=n_pulses / src.rep_rate)
    return QuantumStageResult(events, counts, truth, n_pulses, method)

