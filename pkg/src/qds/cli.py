"""Command-line front end.

Exit codes: 0 success, 1 verdict rejected or reference mismatch,
2 no feasible thresholds, 3 bad input.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from . import decoy, photonic, protocol, reference, security
from .tally import CountsValidationError, ingest_counts, write_counts

EXIT_OK, EXIT_REJECT, EXIT_INFEASIBLE, EXIT_INPUT = 0, 1, 2, 3
MODES = ("simulate", "estimate", "analyze", "sign", "verify", "reproduce-paper")

log = logging.getLogger("qds")


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    mode: str
    preset: str = "25km"
    seed: int = 0
    pulses: int | None = None
    p_sample: float = 0.3
    method: str = "coincidence"
    workers: int = 1
    groups: int = 1
    message: str | None = None
    t_a: float | None = None
    t_v: float | None = None
    target_sec: float = 1e-5
    target_rob: float = 1e-6
    role: str = "bob"
    input: Path | None = None
    sampling: Path | None = None
    archive: Path | None = None
    output: Path | None = None
    source: photonic.SourceConfig | None = None
    channel_b: photonic.ChannelConfig | None = None
    channel_c: photonic.ChannelConfig | None = None

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            flags = ", ".join("--" + n.replace("input", "in").replace("output", "out").replace("_", "") for n in missing)
            raise InputError(f"mode {self.mode!r} needs {flags}")


def _typed_section(section, cls):
    known = {f.name for f in fields(cls)}
    out = {}
    for key, raw in section.items():
        if key not in known:
            raise InputError(f"unknown key {key!r} in [{section.name}]")
        out[key] = float(raw)
    return out


def _read_config(path: Path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    return parser


_RUN_KEYS = {"preset": str, "seed": int, "pulses": int, "p_sample": float, "method": str, "workers": int,
             "groups": int, "message": str, "t_a": float, "t_v": float, "target_sec": float,
             "target_rob": float, "role": str}


def build_config(args: argparse.Namespace) -> RunConfig:
    """Merge config file and flags (flags win) and validate for the mode."""
    cfg = RunConfig(mode=args.mode)
    ini = _read_config(args.config) if args.config else None
    if ini is not None and ini.has_section("run"):
        for key, raw in ini["run"].items():
            if key not in _RUN_KEYS:
                raise InputError(f"unknown key {key!r} in [run]")
            try:
                setattr(cfg, key, _RUN_KEYS[key](raw))
            except ValueError as exc:
                raise InputError(f"[run] {key}: {exc}") from exc
    flag_map = {"distance_preset": "preset", "seed": "seed", "pulses": "pulses", "p_sample": "p_sample",
                "method": "method", "workers": "workers", "groups": "groups", "message": "message",
                "ta": "t_a", "tv": "t_v", "role": "role", "input": "input", "sampling": "sampling",
                "archive": "archive", "output": "output"}
    for flag, attr in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, value)
    if cfg.preset not in photonic.PRESETS:
        raise InputError(f"unknown preset {cfg.preset!r}; choose from {', '.join(photonic.PRESETS)}")
    if cfg.role not in ("bob", "charlie"):
        raise InputError(f"role must be bob or charlie, got {cfg.role!r}")

    src, ch_b, ch_c = photonic.preset(cfg.preset)
    try:
        if ini is not None:
            if ini.has_section("source"):
                src = replace(src, **_typed_section(ini["source"], photonic.SourceConfig))
            if ini.has_section("channel_b"):
                ch_b = replace(ch_b, **_typed_section(ini["channel_b"], photonic.ChannelConfig))
            if ini.has_section("channel_c"):
                ch_c = replace(ch_c, **_typed_section(ini["channel_c"], photonic.ChannelConfig))
    except ValueError as exc:
        raise InputError(f"config: {exc}") from exc
    cfg.source, cfg.channel_b, cfg.channel_c = src, ch_b, ch_c

    if cfg.mode == "simulate":
        cfg.require("output")
    elif cfg.mode in ("estimate", "analyze"):
        cfg.require("input")
    elif cfg.mode == "sign":
        cfg.require("message", "archive", "output")
    elif cfg.mode == "verify":
        cfg.require("input", "archive")
    return cfg


def _params(cfg: RunConfig) -> security.SecurityParams:
    t_a, t_v = photonic.PRESET_THRESHOLDS[cfg.preset]
    try:
        return security.SecurityParams(cfg.t_a if cfg.t_a is not None else t_a,
                                       cfg.t_v if cfg.t_v is not None else t_v,
                                       target_sec=cfg.target_sec, target_rob=cfg.target_rob)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _write_text(path: Path | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def cmd_simulate(cfg: RunConfig) -> int:
    params = _params(cfg)
    n_pulses = cfg.pulses or photonic.PRESET_PULSES[cfg.preset]
    common = dict(p_sample=cfg.p_sample, method=cfg.method, workers=cfg.workers)
    if cfg.message is not None:
        bits = protocol.text_to_bits(cfg.message)
        groups = protocol.run_message_groups(len(bits), cfg.source, cfg.channel_b, cfg.channel_c,
                                             n_pulses, params, cfg.seed, **common)
    else:
        groups = [protocol.run_group(cfg.source, cfg.channel_b, cfg.channel_c, n_pulses, params, cfg.seed,
                                     group_id=g, slot=g // 2, future_bit=g % 2, **common)
                  for g in range(cfg.groups)]
    first = groups[0]
    first.counts.distance_km = float(cfg.preset.removesuffix("km"))
    write_counts(cfg.output, first.counts, first.split)
    if cfg.archive is not None:
        protocol.save_groups(cfg.archive, groups)
    usable = sum(g.usable for g in groups)
    print(f"simulated {len(groups)} group(s) of {n_pulses} pulses at {cfg.preset}; "
          f"{usable} pass the security targets")
    for g in groups:
        if g.report is None:
            print(f"  group {g.group_id}: {g.status}")
    return EXIT_OK


def _load_counts(cfg: RunConfig):
    counts, split = ingest_counts(cfg.input)
    if cfg.sampling is not None:
        _, split = ingest_counts(cfg.sampling)
    return counts, split


def cmd_estimate(cfg: RunConfig) -> int:
    counts, _ = _load_counts(cfg)
    est = decoy.estimate(counts)
    out = asdict(est)
    _write_text(cfg.output, _json(out))
    if cfg.output is not None:
        e11 = "undefined" if est.e11_upper is None else f"{est.e11_upper:.4%}"
        print(f"Y11 >= {est.y11_lower:.4g}, e11 <= {e11}")
    return EXIT_OK


def cmd_analyze(cfg: RunConfig) -> int:
    counts, split = _load_counts(cfg)
    if split is None:
        raise InputError("counts file has no [sampling] block; pass --sampling")
    if cfg.t_a is None or cfg.t_v is None:
        try:
            t_a, t_v = security.threshold_search(counts, split, target_sec=cfg.target_sec,
                                                 target_rob=cfg.target_rob)
        except security.SecurityError as exc:
            print(f"infeasible: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE
        cfg.t_a, cfg.t_v = t_a, t_v
    try:
        report = security.analyze(counts, split, _params(cfg))
    except security.SecurityError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    _write_text(cfg.output, _json(report.to_dict()))
    if cfg.output is not None:
        print(f"T_a={report.params.t_a:g} T_v={report.params.t_v:g} S11={report.s11:.4%} "
              f"eps_sec={report.eps_sec:.3g} eps_rob={report.eps_rob:.3g}")
    return EXIT_OK if report.secure and report.robust else EXIT_INFEASIBLE


def cmd_sign(cfg: RunConfig) -> int:
    groups = protocol.load_groups(cfg.archive)
    bundle = protocol.sign(protocol.text_to_bits(cfg.message), groups)
    _write_text(cfg.output, bundle.to_text())
    print(f"signed {len(bundle.bits)} bits")
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    bundle = protocol.SignatureBundle.from_text(Path(cfg.input).read_text(encoding="utf-8"))
    groups = protocol.load_groups(cfg.archive)
    check = protocol.authenticate if cfg.role == "bob" else protocol.verify_transfer
    verdict = check(bundle, groups)
    lines = [f"{'slot':>4} {'group':>5} {'mismatch':>8} {'conclusive':>10} {'rate':>9} {'threshold':>9}  verdict"]
    for b in verdict.bits:
        lines.append(f"{b.slot:4d} {b.group_id:5d} {b.mismatches:8d} {b.conclusive:10d} {b.rate:9.5f} "
                     f"{b.threshold:9.5f}  {'accept' if b.accepted else 'reject'}")
    lines.append(f"{cfg.role}: {'accept' if verdict.accepted else 'reject'}")
    _write_text(cfg.output, "\n".join(lines) + "\n")
    if cfg.output is not None:
        print(lines[-1])
    return EXIT_OK if verdict.accepted else EXIT_REJECT


def _fmt(x: float) -> str:
    return f"{x:.4g}"


def cmd_reproduce_paper(cfg: RunConfig) -> int:
    rows = reference.reproduce_all()
    print(f"{'cell':<10} {'quantity':<8} {'computed':>11} {'published':>11} {'delta':>11}  ok")
    for r in rows:
        print(f"{r.cell:<10} {r.quantity:<8} {_fmt(r.computed):>11} {_fmt(r.published):>11} "
              f"{_fmt(r.delta):>11}  {'yes' if r.ok else 'NO'}")
    if cfg.output is not None:
        with open(cfg.output, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["cell", "quantity", "computed", "published", "delta", "ok"])
            for r in rows:
                w.writerow([r.cell, r.quantity, repr(r.computed), repr(r.published), repr(r.delta), int(r.ok)])
    bad = [r for r in rows if not r.ok]
    print(f"{len(rows) - len(bad)}/{len(rows)} comparisons within tolerance")
    return EXIT_OK if not bad else EXIT_REJECT


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "analyze": cmd_analyze,
            "sign": cmd_sign, "verify": cmd_verify, "reproduce-paper": cmd_reproduce_paper}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are input errors, not code 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qds", description="Simulate and analyse a three-party quantum digital signature.")
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--config", type=Path, help="INI file with [run], [source], [channel_b], [channel_c] sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--pulses", type=int, help="pulse pairs per group (default: the preset's experimental count)")
    p.add_argument("--distance-preset", choices=photonic.PRESETS)
    p.add_argument("--in", dest="input", type=Path)
    p.add_argument("--out", dest="output", type=Path)
    p.add_argument("--role", choices=("bob", "charlie"))
    p.add_argument("--archive", type=Path, help="group archive (JSON) written by simulate, read by sign/verify")
    p.add_argument("--sampling", type=Path, help="separate counts file whose [sampling] block is used")
    p.add_argument("--message", help="ASCII text to sign; with simulate, two groups per bit are produced")
    p.add_argument("--groups", type=int)
    p.add_argument("--ta", type=float, help="authentication threshold")
    p.add_argument("--tv", type=float, help="verification threshold")
    p.add_argument("--p-sample", type=float)
    p.add_argument("--method", choices=("pulse", "coincidence"))
    p.add_argument("--workers", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        return COMMANDS[cfg.mode](cfg)
    except (InputError, CountsValidationError, protocol.ProtocolError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
