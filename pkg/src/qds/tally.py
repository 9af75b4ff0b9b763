"""Count tables, the random sampling split and the counts-file format.

Every 3x3 matrix is indexed ``[bob_level, charlie_level]`` with levels
ordered vacuum, decoy, signal -- the row/column layout of the published
count tables.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

VACUUM, DECOY, SIGNAL = 0, 1, 2
LEVEL_NAMES = ("0", "nu", "mu")

# Bit values of these sets stay secret and form the signature string.
OVERALL_SETS = ((SIGNAL, SIGNAL), (SIGNAL, DECOY), (DECOY, SIGNAL))
# Disclosed after the quantum stage for decoy estimation.
DISCLOSED_SETS = (
    (SIGNAL, VACUUM), (VACUUM, SIGNAL), (DECOY, DECOY),
    (DECOY, VACUUM), (VACUUM, DECOY), (VACUUM, VACUUM),
)

MATRIX_BLOCKS = {
    "N": "sent",
    "M": "effective",
    "M_B": "concl_b",
    "M_C": "concl_c",
    "ERR_B": "err_b",
    "ERR_C": "err_c",
}


class CountsValidationError(ValueError):
    """Malformed counts file or a table that breaks a count invariant."""


def _zeros() -> np.ndarray:
    return np.zeros((3, 3), dtype=np.int64)


def set_label(a: int, b: int) -> str:
    return f"[{LEVEL_NAMES[a]},{LEVEL_NAMES[b]}]"


@dataclass
class CountsTable:
    """Per-intensity-set tallies of one signing group.

    ``sent`` counts emitted pulse pairs, ``effective`` the coincident clicks,
    ``concl_b``/``concl_c`` the conclusive results at each receiver and
    ``err_b``/``err_c`` the wrong inferences among those.
    """

    sent: np.ndarray = field(default_factory=_zeros)
    effective: np.ndarray = field(default_factory=_zeros)
    concl_b: np.ndarray = field(default_factory=_zeros)
    concl_c: np.ndarray = field(default_factory=_zeros)
    err_b: np.ndarray = field(default_factory=_zeros)
    err_c: np.ndarray = field(default_factory=_zeros)
    mu: float = 0.22
    nu: float = 0.066
    message: int | None = None
    duration_s: float | None = None
    distance_km: float | None = None

    def __post_init__(self) -> None:
        for name in MATRIX_BLOCKS.values():
            arr = np.asarray(getattr(self, name))
            if arr.shape != (3, 3):
                raise CountsValidationError(f"{name} must be 3x3, got shape {arr.shape}")
            setattr(self, name, arr.astype(np.int64))
        self.validate()

    def validate(self) -> None:
        checks = (
            ("M", self.effective, "N", self.sent),
            ("M_B", self.concl_b, "M", self.effective),
            ("M_C", self.concl_c, "M", self.effective),
            ("ERR_B", self.err_b, "M_B", self.concl_b),
            ("ERR_C", self.err_c, "M_C", self.concl_c),
        )
        for block, attr in MATRIX_BLOCKS.items():
            arr = getattr(self, attr)
            bad = np.argwhere(arr < 0)
            if len(bad):
                a, b = bad[0]
                raise CountsValidationError(f"{block}{set_label(a, b)}={arr[a, b]} is negative")
        for small_name, small, big_name, big in checks:
            bad = np.argwhere(small > big)
            if len(bad):
                a, b = bad[0]
                raise CountsValidationError(
                    f"{small_name}{set_label(a, b)}={small[a, b]} exceeds {big_name}{set_label(a, b)}={big[a, b]}"
                )

    def gain(self, which: str = "concl_c") -> np.ndarray:
        """Ratio of a count matrix to ``sent``; zero where nothing was sent."""
        num = getattr(self, which).astype(float)
        out = np.zeros((3, 3))
        np.divide(num, self.sent, out=out, where=self.sent > 0)
        return out

    def overall(self, which: str) -> int:
        arr = getattr(self, which)
        return int(sum(arr[a, b] for a, b in OVERALL_SETS))

    def __add__(self, other: "CountsTable") -> "CountsTable":
        if (self.mu, self.nu) != (other.mu, other.nu):
            raise ValueError("cannot merge tables recorded with different intensities")
        merged = {name: getattr(self, name) + getattr(other, name) for name in MATRIX_BLOCKS.values()}
        return CountsTable(**merged, mu=self.mu, nu=self.nu, message=self.message,
                           duration_s=self.duration_s, distance_km=self.distance_km)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CountsTable):
            return NotImplemented
        same = all(np.array_equal(getattr(self, n), getattr(other, n)) for n in MATRIX_BLOCKS.values())
        meta = ("mu", "nu", "message", "duration_s", "distance_km")
        return same and all(getattr(self, m) == getattr(other, m) for m in meta)


@dataclass
class SamplingSplit:
    """Partition of the overall string into sampling and rest strings."""

    m_s: int
    m_r: int
    m_s_b: int
    m_r_b: int
    m_s_c: int
    m_r_c: int
    err_s_b: int
    err_s_c: int
    p_sample: float = 0.3

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name != "p_sample" and getattr(self, f.name) < 0:
                raise CountsValidationError(f"sampling {f.name}={getattr(self, f.name)} is negative")
        if self.m_s_b > self.m_s or self.m_s_c > self.m_s:
            raise CountsValidationError("sampled conclusive counts exceed M_s")
        if self.m_r_b > self.m_r or self.m_r_c > self.m_r:
            raise CountsValidationError("rest conclusive counts exceed M_r")
        if self.err_s_b > self.m_s_b or self.err_s_c > self.m_s_c:
            raise CountsValidationError("sampled error counts exceed sampled conclusive counts")

    @property
    def m(self) -> int:
        return self.m_s + self.m_r

    def check_against(self, table: CountsTable) -> None:
        for label, total, attr in (("M", self.m, "effective"),
                                   ("M_B", self.m_s_b + self.m_r_b, "concl_b"),
                                   ("M_C", self.m_s_c + self.m_r_c, "concl_c")):
            if total != table.overall(attr):
                raise CountsValidationError(
                    f"sampling split sums to {label}={total} but the table's overall string has {table.overall(attr)}"
                )


class SampledRates(NamedTuple):
    es_b: float
    es_c: float
    ds_b: float
    ds_c: float
    ds: float


class DegenerateSampleError(ValueError):
    pass


def sampled_rates(split: SamplingSplit) -> SampledRates:
    """Error rates of the sampled conclusive results and the mismatch rates
    they imply over the whole sampling string."""
    if split.m_s <= 0 or split.m_s_b <= 0 or split.m_s_c <= 0:
        raise DegenerateSampleError(
            f"sampling string has M_s={split.m_s}, M_s^B={split.m_s_b}, M_s^C={split.m_s_c}; all must be positive"
        )
    es_b = split.err_s_b / split.m_s_b
    es_c = split.err_s_c / split.m_s_c
    ds_b = es_b * split.m_s_b / split.m_s
    ds_c = es_c * split.m_s_c / split.m_s
    return SampledRates(es_b, es_c, ds_b, ds_c, ds_b + ds_c)


# -- event streams ----------------------------------------------------------

EVENT_FIELDS = ("position", "state", "coin", "level_b", "level_c",
                "basis_b", "outcome_b", "basis_c", "outcome_c", "sift_b", "sift_c")


@dataclass
class EventStream:
    """Effective detection events of one quantum stage, in position order.

    ``sift_*`` hold 0/1 for a conclusive inference and -1 otherwise.
    ``sent`` carries the per-set pulse counts, which the events alone cannot
    reconstruct.
    """

    position: np.ndarray
    state: np.ndarray
    coin: np.ndarray
    level_b: np.ndarray
    level_c: np.ndarray
    basis_b: np.ndarray
    outcome_b: np.ndarray
    basis_c: np.ndarray
    outcome_c: np.ndarray
    sift_b: np.ndarray
    sift_c: np.ndarray
    sent: np.ndarray = field(default_factory=_zeros)

    @classmethod
    def empty(cls) -> "EventStream":
        cols = {name: np.zeros(0, dtype=np.int64 if name == "position" else np.int8) for name in EVENT_FIELDS}
        return cls(**cols)

    def __len__(self) -> int:
        return len(self.position)

    @property
    def alice_bit(self) -> np.ndarray:
        return (self.state >> 1).astype(np.int8)

    def select(self, mask: np.ndarray) -> "EventStream":
        cols = {name: getattr(self, name)[mask] for name in EVENT_FIELDS}
        return EventStream(**cols, sent=self.sent.copy())

    def overall_mask(self) -> np.ndarray:
        mask = np.zeros(len(self), dtype=bool)
        for a, b in OVERALL_SETS:
            mask |= (self.level_b == a) & (self.level_c == b)
        return mask

    @classmethod
    def concat(cls, parts: list["EventStream"]) -> "EventStream":
        if not parts:
            return cls.empty()
        cols = {name: np.concatenate([getattr(p, name) for p in parts]) for name in EVENT_FIELDS}
        return cls(**cols, sent=sum((p.sent for p in parts), _zeros()))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        names = EVENT_FIELDS + ("sent",)
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in names)


def accumulate(events: EventStream, mu: float = 0.22, nu: float = 0.066, **meta) -> CountsTable:
    """Tally an event stream into a :class:`CountsTable`."""
    cell = events.level_b.astype(np.intp) * 3 + events.level_c

    def per_set(mask: np.ndarray | None = None) -> np.ndarray:
        idx = cell if mask is None else cell[mask]
        return np.bincount(idx, minlength=9).reshape(3, 3).astype(np.int64)

    alice = events.alice_bit
    concl_b = events.sift_b >= 0
    concl_c = events.sift_c >= 0
    return CountsTable(
        sent=np.asarray(events.sent, dtype=np.int64),
        effective=per_set(),
        concl_b=per_set(concl_b),
        concl_c=per_set(concl_c),
        err_b=per_set(concl_b & (events.sift_b != alice)),
        err_c=per_set(concl_c & (events.sift_c != alice)),
        mu=mu, nu=nu, **meta,
    )


def split_sampling(overall: EventStream, p_sample: float, rng: np.random.Generator) -> tuple[SamplingSplit, np.ndarray]:
    """Assign each overall-string position to the sample with ``p_sample``.

    Returns the split counts and the boolean sample mask over ``overall``.
    """
    if not 0.0 < p_sample < 1.0:
        raise ValueError(f"p_sample must lie in (0, 1), got {p_sample}")
    mask = rng.random(len(overall)) < p_sample
    alice = overall.alice_bit
    cb = overall.sift_b >= 0
    cc = overall.sift_c >= 0
    eb = cb & (overall.sift_b != alice)
    ec = cc & (overall.sift_c != alice)
    rest = ~mask
    split = SamplingSplit(
        m_s=int(mask.sum()), m_r=int(rest.sum()),
        m_s_b=int((cb & mask).sum()), m_r_b=int((cb & rest).sum()),
        m_s_c=int((cc & mask).sum()), m_r_c=int((cc & rest).sum()),
        err_s_b=int((eb & mask).sum()), err_s_c=int((ec & mask).sum()),
        p_sample=p_sample,
    )
    return split, mask


# -- counts file ------------------------------------------------------------

SAMPLING_KEYS = ("m_s", "m_r", "m_s_b", "m_r_b", "m_s_c", "m_r_c", "err_s_b", "err_s_c")
_META_KEYS = {"distance_km": float, "message": int, "duration_s": float, "mu": float, "nu": float}


def _fmt_num(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def emit_counts(table: CountsTable, split: SamplingSplit | None = None) -> str:
    """Serialise a table (and optional sampling block) to canonical text."""
    lines = ["# qds counts table v1", "# rows: Bob-arm intensity, columns: Charlie-arm intensity"]
    for key in ("distance_km", "message", "duration_s", "mu", "nu"):
        value = getattr(table, key)
        if value is not None:
            lines.append(f"{key} = {_fmt_num(value)}")
    for block, attr in MATRIX_BLOCKS.items():
        arr = getattr(table, attr)
        lines.append("")
        lines.append(f"[{block}]")
        lines.append(f"{'':>4} " + " ".join(f"{name:>14}" for name in LEVEL_NAMES))
        for a in range(3):
            lines.append(f"{LEVEL_NAMES[a]:>4} " + " ".join(f"{int(v):>14d}" for v in arr[a]))
    if split is not None:
        lines.append("")
        lines.append("[sampling]")
        lines.append(f"p_sample = {_fmt_num(split.p_sample)}")
        for key in SAMPLING_KEYS:
            lines.append(f"{key} = {getattr(split, key)}")
    return "\n".join(lines) + "\n"


def _parse_count(token: str, where: str) -> int:
    try:
        value = float(token)
    except ValueError:
        raise CountsValidationError(f"{where}: {token!r} is not a number") from None
    if not np.isfinite(value) or not value.is_integer():
        raise CountsValidationError(f"{where}: {token!r} is not a whole count")
    if value < 0:
        raise CountsValidationError(f"{where}={token} is negative")
    return int(value)


def parse_counts(text: str) -> tuple[CountsTable, SamplingSplit | None]:
    meta: dict = {}
    blocks: dict[str, np.ndarray] = {}
    sampling: dict[str, str] = {}
    section = None
    rows_seen = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        header = re.fullmatch(r"\[(\w+)\]", line)
        if header:
            section = header.group(1)
            if section in MATRIX_BLOCKS:
                if section in blocks:
                    raise CountsValidationError(f"line {lineno}: duplicate block [{section}]")
                blocks[section] = _zeros()
                rows_seen = 0
            elif section != "sampling":
                raise CountsValidationError(f"line {lineno}: unknown block [{section}]")
            continue
        if "=" in line:
            key, value = (s.strip() for s in line.split("=", 1))
            if section is None:
                if key not in _META_KEYS:
                    raise CountsValidationError(f"line {lineno}: unknown key {key!r}")
                try:
                    meta[key] = int(float(value)) if key == "message" else float(value)
                except ValueError:
                    raise CountsValidationError(f"line {lineno}: bad value for {key}: {value!r}") from None
            elif section == "sampling":
                sampling[key] = value
            else:
                raise CountsValidationError(f"line {lineno}: key/value inside matrix block [{section}]")
            continue
        if section not in MATRIX_BLOCKS:
            raise CountsValidationError(f"line {lineno}: unexpected content {line!r}")
        tokens = line.split()
        if tokens == list(LEVEL_NAMES):
            continue
        if len(tokens) != 4 or tokens[0] not in LEVEL_NAMES:
            raise CountsValidationError(f"line {lineno}: expected '<level> c0 cnu cmu' in [{section}], got {line!r}")
        a = LEVEL_NAMES.index(tokens[0])
        for b, tok in enumerate(tokens[1:]):
            blocks[section][a, b] = _parse_count(tok, f"{section}{set_label(a, b)}")
        rows_seen += 1
        if rows_seen > 3:
            raise CountsValidationError(f"line {lineno}: block [{section}] has more than 3 rows")
    missing = [b for b in MATRIX_BLOCKS if b not in blocks]
    if missing:
        raise CountsValidationError(f"missing block(s): {', '.join(missing)}")
    table = CountsTable(**{attr: blocks[b] for b, attr in MATRIX_BLOCKS.items()}, **meta)
    split = None
    if sampling:
        unknown = set(sampling) - set(SAMPLING_KEYS) - {"p_sample"}
        if unknown:
            raise CountsValidationError(f"unknown sampling key(s): {', '.join(sorted(unknown))}")
        absent = [k for k in SAMPLING_KEYS if k not in sampling]
        if absent:
            raise CountsValidationError(f"sampling block missing: {', '.join(absent)}")
        split = SamplingSplit(
            **{k: _parse_count(sampling[k], f"sampling {k}") for k in SAMPLING_KEYS},
            p_sample=float(sampling.get("p_sample", 0.3)),
        )
        split.check_against(table)
    return table, split


def ingest_counts(path: str | Path) -> tuple[CountsTable, SamplingSplit | None]:
    return parse_counts(Path(path).read_text(encoding="utf-8"))


def write_counts(path: str | Path, table: CountsTable, split: SamplingSplit | None = None) -> None:
    Path(path).write_text(emit_counts(table, split), encoding="utf-8")
