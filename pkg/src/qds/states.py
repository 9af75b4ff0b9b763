"""Polarization states and the nonorthogonal-pair sieving rules.

States are integer-coded so the simulator can sift whole arrays at once::

    H=0, V=1  (Z basis)     P=2 (+), M=3 (-)  (X basis)

With this layout ``state // 2`` is the basis and ``state ^ 1`` the orthogonal
partner.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class PolarizationState(IntEnum):
    H = 0
    V = 1
    P = 2
    M = 3

    @property
    def basis(self) -> "Basis":
        return Basis(self.value >> 1)

    @property
    def orthogonal(self) -> "PolarizationState":
        return PolarizationState(self.value ^ 1)

    def is_orthogonal_to(self, other: "PolarizationState") -> bool:
        return self.value ^ 1 == int(other)


class Basis(IntEnum):
    Z = 0
    X = 1

    @property
    def states(self) -> tuple[PolarizationState, PolarizationState]:
        return PolarizationState(2 * self.value), PolarizationState(2 * self.value + 1)


INCONCLUSIVE = -1


@dataclass(frozen=True)
class AnnouncedPair:
    """Two mutually nonorthogonal states, Z-basis element first."""

    first: PolarizationState
    second: PolarizationState

    def __post_init__(self) -> None:
        if self.first.basis is not Basis.Z or self.second.basis is not Basis.X:
            raise ValueError(f"announced pair must be (Z state, X state), got ({self.first.name}, {self.second.name})")

    def index_of(self, state: PolarizationState) -> int:
        if state == self.first:
            return 0
        if state == self.second:
            return 1
        raise ValueError(f"{state.name} is not in the announced pair")


@dataclass(frozen=True)
class SiftOutcome:
    bit: int | None = None

    @property
    def conclusive(self) -> bool:
        return self.bit is not None

    def __str__(self) -> str:
        return "-" if self.bit is None else str(self.bit)


def nonorthogonal_partners(state: PolarizationState) -> tuple[PolarizationState, PolarizationState]:
    """The two states of the opposite basis."""
    return Basis(1 - state.basis).states


def make_announced_pair(sent: PolarizationState, coin: int) -> AnnouncedPair:
    partner = nonorthogonal_partners(sent)[coin]
    if sent.basis is Basis.Z:
        return AnnouncedPair(sent, partner)
    return AnnouncedPair(partner, sent)


def sift(pair: AnnouncedPair, measured_basis: Basis, outcome: PolarizationState) -> SiftOutcome:
    """Conclusive when ``outcome`` excludes one announced state.

    The bit is the announced-pair index of the state that was *not* excluded.
    """
    if outcome.basis is not measured_basis:
        raise ValueError(f"outcome {outcome.name} does not lie in basis {measured_basis.name}")
    if outcome.is_orthogonal_to(pair.first):
        return SiftOutcome(1)
    if outcome.is_orthogonal_to(pair.second):
        return SiftOutcome(0)
    return SiftOutcome()


# -- array forms used by the simulator -------------------------------------

def announced_pair_codes(sent: np.ndarray, coin: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`make_announced_pair`; returns (first, second) codes."""
    sent = np.asarray(sent, dtype=np.int8)
    coin = np.asarray(coin, dtype=np.int8)
    partner = ((1 - (sent >> 1)) << 1) + coin
    in_z = (sent >> 1) == 0
    first = np.where(in_z, sent, partner).astype(np.int8)
    second = np.where(in_z, partner, sent).astype(np.int8)
    return first, second


def alice_bits(sent: np.ndarray) -> np.ndarray:
    """Announced-pair index of the sent state (0 if Z basis, else 1)."""
    return (np.asarray(sent) >> 1).astype(np.int8)


def sift_codes(first: np.ndarray, second: np.ndarray, outcome: np.ndarray) -> np.ndarray:
    """Vectorised :func:`sift`: 0/1 for conclusive, ``INCONCLUSIVE`` otherwise."""
    outcome = np.asarray(outcome, dtype=np.int8)
    flipped = outcome ^ 1
    res = np.full(outcome.shape, INCONCLUSIVE, dtype=np.int8)
    res[flipped == second] = 0
    res[flipped == first] = 1
    return res
