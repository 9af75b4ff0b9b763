"""Bundled experimental counts and their published summary values, plus the
comparison used by ``reproduce-paper``."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

from . import security
from .tally import CountsTable, SamplingSplit, parse_counts

_PACKAGE = "qds.data.reference"


@dataclass(frozen=True)
class Tolerance:
    kind: str  # "abs", "rel" or "factor"
    value: float

    def holds(self, computed: float, published: float) -> bool:
        if self.kind == "abs":
            return abs(computed - published) <= self.value
        if self.kind == "rel":
            return abs(computed - published) <= self.value * abs(published)
        if computed <= 0 or published <= 0:
            return False
        return abs(math.log10(computed / published)) <= math.log10(self.value)


TOLERANCES = {
    "s11": Tolerance("abs", 1e-3),
    "y11": Tolerance("rel", 0.10),
    "e11": Tolerance("abs", 1e-3),
    "eps_rep": Tolerance("factor", 3.0),
    "eps_rob": Tolerance("factor", 3.0),
    "eps_for": Tolerance("factor", 100.0),
}
EPS_SEC_LIMIT = 1e-5


def _files():
    return resources.files(_PACKAGE)


def published_cells() -> list[dict]:
    return json.loads((_files() / "table1.json").read_text(encoding="utf-8"))["cells"]


def cell_name(distance_km: int, message: int) -> str:
    return f"{distance_km}km_m{message}"


def load_cell(distance_km: int, message: int) -> tuple[CountsTable, SamplingSplit]:
    res = _files() / f"{cell_name(distance_km, message)}.counts"
    if not res.is_file():
        raise FileNotFoundError(f"no bundled counts for {cell_name(distance_km, message)}")
    counts, split = parse_counts(res.read_text(encoding="utf-8"))
    if split is None:
        raise ValueError(f"bundled counts {cell_name(distance_km, message)} lack a sampling block")
    return counts, split


@dataclass
class Comparison:
    cell: str
    quantity: str
    computed: float
    published: float
    tolerance: Tolerance | None
    ok: bool

    @property
    def delta(self) -> float:
        return self.computed - self.published


def compare_cell(pub: dict, counts: CountsTable | None = None, split: SamplingSplit | None = None) -> list[Comparison]:
    """Recompute one cell from its counts and compare with the published row."""
    if counts is None or split is None:
        counts, split = load_cell(pub["distance_km"], pub["message"])
    name = cell_name(pub["distance_km"], pub["message"])
    report = security.analyze(counts, split, security.SecurityParams(pub["t_a"], pub["t_v"]))
    computed = {
        "e11": report.e11_upper, "y11": report.y11_lower, "s11": report.s11,
        "eps_rep": report.eps_rep, "eps_for": report.eps_for, "eps_rob": report.eps_rob,
        "es_b": report.es_b, "es_c": report.es_c,
    }
    rows = []
    for key, value in computed.items():
        tol = TOLERANCES.get(key)
        ok = True if tol is None else tol.holds(value, pub[key])
        rows.append(Comparison(name, key, value, pub[key], tol, ok))
    rows.append(Comparison(name, "eps_sec", report.eps_sec, EPS_SEC_LIMIT, None,
                           report.eps_sec < EPS_SEC_LIMIT))
    return rows


def reproduce_all() -> list[Comparison]:
    rows = []
    for pub in published_cells():
        rows.extend(compare_cell(pub))
    return rows

