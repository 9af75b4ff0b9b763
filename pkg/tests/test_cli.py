import contextlib
import json
from importlib import resources

import pytest

from qds import cli, protocol
from qds.tally import ingest_counts


def fixture(name):
    return resources.files("qds.data.reference") / name


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def signed(tmp_path_factory):
    d = tmp_path_factory.mktemp("signed")
    archive = d / "groups.json"
    assert cli.main(["--mode", "simulate", "--distance-preset", "51km", "--pulses", "2000000000",
                     "--seed", "5", "--message", "Q", "--out", str(d / "g0.counts"),
                     "--archive", str(archive)]) == 0
    assert cli.main(["--mode", "sign", "--message", "Q", "--archive", str(archive),
                     "--out", str(d / "sig.txt")]) == 0
    return d


def test_reproduce_reference_table(capsys, tmp_path):
    code, out, _ = run(capsys, "--mode", "reproduce-paper", "--out", tmp_path / "t.csv")
    assert code == 0
    row = next(l for l in out.splitlines() if l.startswith("25km_m0") and " s11 " in l)
    assert "0.0433" in row
    assert "72/72" in out
    assert (tmp_path / "t.csv").read_text().startswith("cell,quantity")


def test_estimate_on_fixture(capsys, tmp_path):
    code, _, _ = run(capsys, "--mode", "estimate", "--in", fixture("25km_m0.counts"), "--out", tmp_path / "e.json")
    assert code == 0
    est = json.loads((tmp_path / "e.json").read_text())
    assert est["y11_lower"] == pytest.approx(2.74e-3, rel=0.1)
    assert est["e11_upper"] == pytest.approx(0.0112, abs=1e-3)


def test_analyze_with_and_without_thresholds(capsys, tmp_path):
    cell = fixture("51km_m0.counts")
    code, _, _ = run(capsys, "--mode", "analyze", "--in", cell, "--ta", 0.006, "--tv", 0.02,
                     "--out", tmp_path / "r.json")
    assert code == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["eps_sec"] < 1e-5
    code, out, _ = run(capsys, "--mode", "analyze", "--in", cell, "--out", tmp_path / "s.json")
    assert code == 0 and "T_a=" in out


def test_analyze_infeasible_exits_2(capsys, tmp_path):
    counts = tmp_path / "small.counts"
    assert run(capsys, "--mode", "simulate", "--pulses", 10**8, "--seed", 1, "--out", counts)[0] == 0
    code, _, err = run(capsys, "--mode", "analyze", "--in", counts)
    assert code == 2 and "infeasible" in err


def test_simulated_counts_round_trip(capsys, signed):
    counts, split = ingest_counts(signed / "g0.counts")
    assert split is not None and counts.sent.sum() == 2 * 10**9
    groups = protocol.load_groups(signed / "groups.json")
    assert len(groups) == 16 and groups[0].counts == counts


@pytest.mark.parametrize("role", ["bob", "charlie"])
def test_verify_honest(capsys, signed, role):
    code, out, _ = run(capsys, "--mode", "verify", "--role", role, "--in", signed / "sig.txt",
                       "--archive", signed / "groups.json")
    assert code == 0 and f"{role}: accept" in out


def test_verify_tampered_bundle_rejects(capsys, signed, tmp_path):
    import numpy as np

    bundle = protocol.SignatureBundle.from_text((signed / "sig.txt").read_text())
    bad = protocol.tamper(bundle, 0.05, np.random.default_rng(0))
    (tmp_path / "bad.txt").write_text(bad.to_text())
    code, out, _ = run(capsys, "--mode", "verify", "--role", "charlie", "--in", tmp_path / "bad.txt",
                       "--archive", signed / "groups.json")
    assert code == 1 and "charlie: reject" in out


def test_ini_config(capsys, tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\npreset = 76km\nseed = 4\npulses = 100000000\n\n[channel_c]\nmisalignment = 0.01\n")
    code, out, _ = run(capsys, "--mode", "simulate", "--config", ini, "--out", tmp_path / "c.counts")
    assert code == 0 and "76km" in out
    counts, _ = ingest_counts(tmp_path / "c.counts")
    assert counts.distance_km == 76.0


@pytest.mark.parametrize("argv", [
    ["--mode", "bogus"],
    ["--mode", "simulate"],
    ["--mode", "estimate", "--in", "/nonexistent/x.counts"],
    ["--mode", "sign", "--message", "A", "--archive", "/nonexistent.json", "--out", "/tmp/x"],
])
def test_input_errors_exit_3(capsys, argv):
    with pytest.raises(SystemExit) if argv[1] == "bogus" else contextlib.nullcontext() as info:
        code = cli.main(argv)
    if argv[1] == "bogus":
        assert info.value.code == 3
    else:
        assert code == 3


def test_bad_ini_key_exits_3(capsys, tmp_path):
    ini = tmp_path / "bad.ini"
    ini.write_text("[source]\nbrightness = 3\n")
    code, _, err = run(capsys, "--mode", "simulate", "--config", ini, "--out", tmp_path / "x")
    assert code == 3 and "brightness" in err


def test_malformed_counts_exit_3(capsys, tmp_path):
    p = tmp_path / "broken.counts"
    p.write_text("[sent]\n1 2\n")
    assert run(capsys, "--mode", "estimate", "--in", p)[0] == 3

