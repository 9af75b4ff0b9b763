"""Three-party signing flow: group distribution, signing, authentication by
Bob and transfer verification by Charlie."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import decoy, security
from .photonic import (STREAM_SAMPLING, ChannelConfig, SourceConfig, run_quantum_stage, substream)
from .tally import CountsTable, SamplingSplit, emit_counts, parse_counts, split_sampling

log = logging.getLogger(__name__)


def _encode(values: np.ndarray) -> str:
    lut = np.array([ord("-"), ord("0"), ord("1")], dtype=np.uint8)
    return lut[np.asarray(values, dtype=np.int64) + 1].tobytes().decode("ascii")


def _decode(text: str) -> np.ndarray:
    raw = np.frombuffer(text.encode("ascii"), dtype=np.uint8)
    out = np.full(len(raw), -1, dtype=np.int8)
    out[raw == ord("0")] = 0
    out[raw == ord("1")] = 1
    bad = (raw != ord("0")) & (raw != ord("1")) & (raw != ord("-"))
    if bad.any():
        raise ValueError(f"invalid character {chr(raw[np.argmax(bad)])!r} in data string")
    return out


class ProtocolError(ValueError):
    pass


@dataclass
class GroupRecord:
    """One group of quantum states, reserved for signing bit ``future_bit``
    at message position ``slot``.

    ``alice``, ``bob`` and ``charlie`` are the rest strings: Alice's bits and
    each receiver's sift results (-1 where inconclusive).
    """

    group_id: int
    slot: int
    future_bit: int
    counts: CountsTable
    split: SamplingSplit
    alice: np.ndarray
    bob: np.ndarray
    charlie: np.ndarray
    params: security.SecurityParams
    report: security.SecurityReport | None = None
    status: str = "ok"

    @property
    def usable(self) -> bool:
        return self.report is not None and self.report.secure and self.report.robust

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id, "slot": self.slot, "future_bit": self.future_bit,
            "counts": emit_counts(self.counts, self.split),
            "alice": _encode(self.alice), "bob": _encode(self.bob), "charlie": _encode(self.charlie),
            "params": asdict(self.params),
            "report": None if self.report is None else self.report.to_dict(),
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GroupRecord":
        counts, split = parse_counts(data["counts"])
        if split is None:
            raise ProtocolError(f"group {data['group_id']} has no sampling block")
        return cls(
            group_id=data["group_id"], slot=data["slot"], future_bit=data["future_bit"],
            counts=counts, split=split,
            alice=_decode(data["alice"]), bob=_decode(data["bob"]), charlie=_decode(data["charlie"]),
            params=security.SecurityParams(**data["params"]),
            report=None if data["report"] is None else security.SecurityReport.from_dict(data["report"]),
            status=data["status"],
        )


def group_seed(seed: int, group_id: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(7, group_id)).generate_state(1, np.uint64)[0])


def run_group(src: SourceConfig, ch_b: ChannelConfig, ch_c: ChannelConfig, n_pulses: int,
              params: security.SecurityParams, seed: int, group_id: int = 0, slot: int = 0,
              future_bit: int = 0, p_sample: float = 0.3, method: str = "coincidence",
              workers: int = 1, strict: bool = False) -> GroupRecord:
    """Quantum stage, disclosure, sampling and security analysis of one group.

    When the security analysis cannot be completed the group keeps its data
    strings, ``report`` is ``None`` and ``status`` says why; pass
    ``strict=True`` to raise instead.
    """
    gseed = group_seed(seed, group_id)
    stage = run_quantum_stage(src, ch_b, ch_c, n_pulses, gseed, method=method, workers=workers)
    counts = stage.counts
    counts.message = future_bit
    overall = stage.events.select(stage.events.overall_mask())
    split, sample_mask = split_sampling(overall, p_sample, substream(gseed, STREAM_SAMPLING))
    rest = overall.select(~sample_mask)

    report, status = None, "ok"
    try:
        report = security.analyze(counts, split, params)
    except (security.SecurityError, decoy.DecoyError, ValueError) as exc:
        if strict:
            raise
        status = f"{type(exc).__name__}: {exc}"
        log.info("group %d: security analysis unavailable (%s)", group_id, status)
    return GroupRecord(group_id=group_id, slot=slot, future_bit=future_bit, counts=counts, split=split,
                       alice=rest.alice_bit, bob=rest.sift_b, charlie=rest.sift_c,
                       params=params, report=report, status=status)


def run_message_groups(n_bits: int, src: SourceConfig, ch_b: ChannelConfig, ch_c: ChannelConfig,
                       n_pulses: int, params: security.SecurityParams, seed: int, **kwargs) -> list[GroupRecord]:
    """Two groups per message position, one for each possible bit value."""
    groups = []
    for slot in range(n_bits):
        for bit in (0, 1):
            gid = 2 * slot + bit
            groups.append(run_group(src, ch_b, ch_c, n_pulses, params, seed, group_id=gid,
                                    slot=slot, future_bit=bit, **kwargs))
    return groups


def text_to_bits(message: str) -> str:
    return "".join(f"{b:08b}" for b in message.encode("ascii"))


def bits_to_text(bits: str) -> str:
    return bytes(int(bits[i:i + 8], 2) for i in range(0, len(bits), 8)).decode("ascii")


@dataclass
class SignedBit:
    slot: int
    bit: int
    group_id: int
    declared: np.ndarray


@dataclass
class SignatureBundle:
    """Message bits with Alice's declared rest string for each."""

    bits: str
    entries: list[SignedBit] = field(default_factory=list)

    def to_text(self) -> str:
        lines = ["# qds signature bundle v1", f"length = {len(self.bits)}", f"bits = {self.bits}"]
        for e in self.entries:
            lines.append(f"{e.slot} {e.bit} {e.group_id} {_encode(e.declared)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SignatureBundle":
        header: dict[str, str] = {}
        entries = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" in line:
                key, value = (s.strip() for s in line.split("=", 1))
                header[key] = value
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise ProtocolError(f"bundle line {lineno}: expected 'slot bit group declared'")
            declared = _decode(parts[3]) if len(parts) == 4 else np.zeros(0, dtype=np.int8)
            entries.append(SignedBit(int(parts[0]), int(parts[1]), int(parts[2]), declared))
        bits = header.get("bits", "")
        if int(header.get("length", -1)) != len(bits):
            raise ProtocolError("announced message length does not match the bits")
        if len(entries) != len(bits):
            raise ProtocolError(f"bundle has {len(entries)} entries for {len(bits)} bits")
        for e in entries:
            if e.slot >= len(bits) or str(e.bit) != bits[e.slot]:
                raise ProtocolError(f"entry for slot {e.slot} does not match the message bits")
        return cls(bits, entries)


def sign(message_bits: str, groups: list[GroupRecord]) -> SignatureBundle:
    """Alice's signature: for each bit, the rest string of the matching group.

    Only Alice's own data (``alice``) is read from the groups.
    """
    by_key = {}
    for g in groups:
        by_key.setdefault((g.slot, g.future_bit), g)
    entries = []
    for slot, ch in enumerate(message_bits):
        if ch not in "01":
            raise ProtocolError(f"message bit {slot} is {ch!r}, not 0/1")
        g = by_key.get((slot, int(ch)))
        if g is None:
            raise ProtocolError(f"no group reserved for bit {ch} at position {slot}; cannot sign")
        entries.append(SignedBit(slot, int(ch), g.group_id, g.alice.copy()))
    return SignatureBundle(message_bits, entries)


@dataclass
class BitVerdict:
    slot: int
    group_id: int
    mismatches: int
    conclusive: int
    rate: float
    threshold: float
    accepted: bool


@dataclass
class Verdict:
    role: str
    bits: list[BitVerdict]

    @property
    def accepted(self) -> bool:
        return all(b.accepted for b in self.bits)


def _check(bundle: SignatureBundle, groups: list[GroupRecord], role: str) -> Verdict:
    by_id = {g.group_id: g for g in groups}
    verdicts = []
    for e in bundle.entries:
        g = by_id.get(e.group_id)
        if g is None:
            raise ProtocolError(f"unknown group id {e.group_id}")
        own = g.bob if role == "bob" else g.charlie
        threshold = g.params.t_a if role == "bob" else g.params.t_v
        if g.future_bit != e.bit or g.slot != e.slot or len(e.declared) != len(own):
            verdicts.append(BitVerdict(e.slot, e.group_id, 0, 0, 1.0, threshold, False))
            continue
        conclusive = own >= 0
        n_concl = int(conclusive.sum())
        mism = int((conclusive & (own != e.declared)).sum())
        rate = mism / n_concl if n_concl else 1.0
        verdicts.append(BitVerdict(e.slot, e.group_id, mism, n_concl, rate, threshold, rate < threshold))
    return Verdict(role, verdicts)


def authenticate(bundle: SignatureBundle, bob_groups: list[GroupRecord]) -> Verdict:
    """Bob accepts a bit when his conclusive mismatch rate is below T_a."""
    return _check(bundle, bob_groups, "bob")


def verify_transfer(bundle: SignatureBundle, charlie_groups: list[GroupRecord]) -> Verdict:
    """Charlie accepts a forwarded bit when his mismatch rate is below T_v."""
    return _check(bundle, charlie_groups, "charlie")


def tamper(bundle: SignatureBundle, fraction: float, rng: np.random.Generator,
           slots: set[int] | None = None) -> SignatureBundle:
    """Copy of ``bundle`` with ``fraction`` of each declared string flipped at
    random positions; only entries in ``slots`` are touched when given."""
    entries = []
    for e in bundle.entries:
        declared = e.declared.copy()
        if slots is None or e.slot in slots:
            n_flip = int(round(fraction * len(declared)))
            idx = rng.choice(len(declared), n_flip, replace=False)
            declared[idx] = 1 - declared[idx]
        entries.append(SignedBit(e.slot, e.bit, e.group_id, declared))
    return SignatureBundle(bundle.bits, entries)


def save_groups(path: str | Path, groups: list[GroupRecord]) -> None:
    payload = {"format": "qds-groups", "version": 1, "groups": [g.to_dict() for g in groups]}
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load_groups(path: str | Path) -> list[GroupRecord]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != "qds-groups":
        raise ProtocolError(f"{path} is not a group archive")
    return [GroupRecord.from_dict(d) for d in payload["groups"]]
