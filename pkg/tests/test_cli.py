import hashlib
import os
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from qled import cli, io, polarization as pol
from qled.stream import TimeTagStream

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
GOLDEN = Path(__file__).parent / "golden"
REGEN = os.environ.get("QLED_REGEN_GOLDEN") == "1"


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_rows(path):
    lines = Path(path).read_text().splitlines()
    return lines[0].split(","), [line.split(",") for line in lines[1:]]


def numeric(path):
    _, rows = read_rows(path)
    return np.array([[float(v) for v in r] for r in rows]).reshape(len(rows), -1)


def summary_of(out):
    return dict(kv.split("=") for kv in out.strip().splitlines()[-1].split())


def write_config(tmp_path, base, edits):
    text = (CONFIGS / base).read_text()
    for old, new in edits.items():
        assert old in text
        text = text.replace(old, new)
    path = tmp_path / base
    path.write_text(text)
    return path


def simulate_dir(tmp_path, config, *extra):
    d = tmp_path / "runs"
    d.mkdir(exist_ok=True)
    for b in pol.BASIS_ORDER:
        assert run("simulate", "--config", config, "--basis", b, "--out", d / f"{b}.qtt", *extra) == 0
    return d


# --- simulate -----------------------------------------------------------------

def test_simulate_writes_file_and_manifest(tmp_path, capsys):
    out = tmp_path / "a.qtt"
    assert run("simulate", "--config", CONFIGS / "ideal.conf", "--out", out) == 0
    n = int(capsys.readouterr().out.split()[1])
    s = io.read_qtt(out)
    assert len(s) == n > 0
    manifest = io.read_manifest(io.manifest_path(out))
    assert manifest["measurement.seed"] == "1"
    assert manifest["channel.xx_plus"] == "0"
    assert s.channel_map[0] == "xx_plus"


def test_simulate_is_byte_identical_across_runs(tmp_path):
    a, b = tmp_path / "a.qtt", tmp_path / "b.qtt"
    for path in (a, b):
        run("simulate", "--config", CONFIGS / "ideal.conf", "--out", path, "--seed", 11)
    assert a.read_bytes() == b.read_bytes()
    run("simulate", "--config", CONFIGS / "ideal.conf", "--out", b, "--seed", 12)
    assert a.read_bytes() != b.read_bytes()


def test_simulate_zero_duration(tmp_path):
    cfg = write_config(tmp_path, "ideal.conf", {"duration_s = 0.05": "duration_s = 0"})
    out = tmp_path / "z.qtt"
    assert run("simulate", "--config", cfg, "--out", out) == 0
    assert out.read_bytes()[12:20] == bytes(8)  # record_count
    assert len(io.read_qtt(out)) == 0


def test_simulate_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.conf"
    bad.write_text("[source]\nfss_ueV = x\n")
    assert run("simulate", "--config", bad, "--out", tmp_path / "o.qtt") == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "source.fss_ueV" in err and "[measurement]" in err
    assert run("simulate", "--config", tmp_path / "none.conf", "--out", tmp_path / "o.qtt") == cli.EXIT_IO
    assert run("simulate", "--config", CONFIGS / "ideal.conf", "--basis", "xy",
               "--out", tmp_path / "o.qtt") == cli.EXIT_CONFIG
    assert run("simulate", "--config", CONFIGS / "led_44K.conf", "--temperature", 120,
               "--out", tmp_path / "o.qtt") == cli.EXIT_CONFIG


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        run("simulate")
    assert exc.value.code == 2


def test_console_entry_point(tmp_path):
    exe = shutil.which("qled")
    cmd = [exe] if exe else [sys.executable, "-m", "qled.cli"]
    res = subprocess.run(cmd + ["fss", "fit", "--in", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o.csv")],
                         capture_output=True, text=True)
    assert res.returncode == cli.EXIT_IO
    assert "error" in res.stderr


# --- g2 / xcorr ---------------------------------------------------------------

def test_g2_on_empty_file_gives_header_only(tmp_path):
    src = tmp_path / "e.qtt"
    io.write_qtt(src, TimeTagStream.empty(0, {0: "a", 1: "b"}))
    out = tmp_path / "g2.csv"
    assert run("g2", "--in", src, "--a", 0, "--b", 1, "--out", out) == 0
    assert out.read_text() == "delay_ps,g2,sigma\n"


def test_g2_poisson_calibration_is_flat(tmp_path):
    rng = np.random.default_rng(3)
    duration = 10**11
    ts = np.sort(rng.integers(0, duration, 4 * 10**5))
    s = TimeTagStream(ts, rng.integers(0, 2, len(ts)).astype(np.uint16), np.zeros(len(ts), np.uint8),
                      duration, {0: "a", 1: "b"})
    src = tmp_path / "p.qtt"
    io.write_qtt(src, s)
    out = tmp_path / "g2.csv"
    assert run("g2", "--in", src, "--a", 0, "--b", 1, "--bin-ps", 50000, "--window-ns", 5000, "--out", out) == 0
    g2 = numeric(out)[:, 1]
    assert g2.mean() == pytest.approx(1.0, abs=0.02)


def test_truncated_file_reports_offset(tmp_path, capsys):
    src = tmp_path / "t.qtt"
    run("simulate", "--config", CONFIGS / "ideal.conf", "--out", src)
    data = src.read_bytes()
    n = (len(data) - 28) // 16
    src.write_bytes(data[:-5])
    assert run("xcorr", "--in", src, "--a", 0, "--b", 2, "--out", tmp_path / "x.csv") == cli.EXIT_IO
    assert f"byte offset {28 + (n - 1) * 16}" in capsys.readouterr().err
    assert not (tmp_path / "x.csv").exists()


def test_unknown_channel_label(tmp_path):
    src = tmp_path / "a.qtt"
    run("simulate", "--config", CONFIGS / "ideal.conf", "--out", src)
    assert run("g2", "--in", src, "--a", "nope", "--b", 2, "--out", tmp_path / "x.csv") == cli.EXIT_CONFIG
    assert run("g2", "--in", src, "--a", 9, "--b", 2, "--out", tmp_path / "x.csv") == cli.EXIT_CONFIG
    assert run("g2", "--in", tmp_path / "missing.qtt", "--a", 0, "--b", 2, "--out", tmp_path / "x.csv") == cli.EXIT_IO


def test_xcorr_accepts_arm_labels(tmp_path):
    src = tmp_path / "a.qtt"
    run("simulate", "--config", CONFIGS / "ideal.conf", "--out", src)
    by_label, by_number = tmp_path / "l.csv", tmp_path / "n.csv"
    run("xcorr", "--in", src, "--a", "xx_plus", "--b", "x_plus", "--window-ns", 5, "--out", by_label)
    run("xcorr", "--in", src, "--a", 0, "--b", 2, "--window-ns", 5, "--out", by_number)
    assert by_label.read_text() == by_number.read_text()
    header, rows = read_rows(by_label)
    assert header == ["delay_ps", "counts", "sigma"] and len(rows) == 2 * (5000 // 32) + 1


# --- fidelity -----------------------------------------------------------------

def test_missing_basis_lists_found_and_expected(tmp_path, capsys):
    d = tmp_path / "runs"
    d.mkdir()
    for b in ("hv", "da"):
        run("simulate", "--config", CONFIGS / "ideal.conf", "--basis", b, "--out", d / f"{b}.qtt")
    assert run("fidelity", "--in-dir", d, "--fss-ueV", 0, "--out", tmp_path / "f.csv") == cli.EXIT_IO
    err = capsys.readouterr().err
    assert "lr" in err and "elderra" in err and "elaerd" in err and "hv" in err
    assert run("fidelity", "--in-dir", tmp_path / "nodir", "--fss-ueV", 0, "--out", tmp_path / "f.csv") == cli.EXIT_IO


def test_bad_mode_is_config_error(tmp_path):
    d = simulate_dir(tmp_path, write_config(tmp_path, "ideal.conf", {"duration_s = 0.05": "duration_s = 0.001"}))
    assert run("fidelity", "--in-dir", d, "--fss-ueV", 0, "--mode", "chi=x", "--out", tmp_path / "f.csv") == 2


def test_ideal_set_static_mode_peak(tmp_path, capsys):
    d = simulate_dir(tmp_path, CONFIGS / "ideal.conf")
    out = tmp_path / "f.csv"
    assert run("fidelity", "--in-dir", d, "--fss-ueV", 0, "--mode", "chi=0", "--out", out) == 0
    summary = summary_of(capsys.readouterr().out)
    assert float(summary["peak_fidelity"]) >= 0.98
    header, _ = read_rows(out)
    assert header == ["delay_ps", "fidelity", "sigma"]


def test_uncorrelated_inputs_give_quarter(tmp_path, capsys):
    rng = np.random.default_rng(8)
    d = tmp_path / "runs"
    d.mkdir()
    duration = 5 * 10**10
    for b in pol.BASIS_ORDER:
        ts = np.sort(rng.integers(0, duration, 10**5))
        s = TimeTagStream(ts, rng.integers(0, 4, len(ts)).astype(np.uint16), np.zeros(len(ts), np.uint8),
                          duration, {0: "xx_plus", 1: "xx_minus", 2: "x_plus", 3: "x_minus"})
        io.write_qtt(d / f"{b}.qtt", s)
    out = tmp_path / "f.csv"
    code = run("fidelity", "--in-dir", d, "--fss-ueV", 17.7, "--bin-ps", 2000000, "--window-ns", 20000, "--out", out)
    assert code == cli.EXIT_CHECK_FAILED
    f = numeric(out)
    ok = np.isfinite(f[:, 1])
    assert f[ok, 1].mean() == pytest.approx(0.25, abs=0.01)
    assert np.all(np.abs(f[ok, 1] - 0.25) < 5 * f[ok, 2])


# --- tempsweep ----------------------------------------------------------------

def short_led(tmp_path):
    return write_config(tmp_path, "led_44K.conf", {"duration_s = 0.3": "duration_s = 0.02"})


def test_tempsweep_single_temperature_matches_fidelity(tmp_path, capsys):
    cfg = short_led(tmp_path)
    sweep = tmp_path / "sweep.csv"
    assert run("tempsweep", "--config", cfg, "--temps", "63", "--window-ns", 10, "--out", sweep) == 0
    header, rows = read_rows(sweep)
    assert header == ["temperature_K", "peak_fidelity", "sigma", "hwhm_ps", "x_lifetime_ps"]
    assert len(rows) == 1
    capsys.readouterr()

    d = simulate_dir(tmp_path, cfg, "--temperature", 63)
    assert run("fidelity", "--in-dir", d, "--fss-ueV", 17.7, "--window-ns", 10, "--out", tmp_path / "f.csv") in (0, 1)
    summary = summary_of(capsys.readouterr().out)
    assert float(rows[0][1]) == pytest.approx(float(summary["peak_fidelity"]), abs=5e-5)
    assert float(rows[0][4]) == 900


def test_tempsweep_usage_errors(tmp_path):
    cfg = short_led(tmp_path)
    out = tmp_path / "s.csv"
    assert run("tempsweep", "--config", cfg, "--temps", "", "--out", out) == cli.EXIT_CONFIG
    assert run("tempsweep", "--config", cfg, "--temps", " , ", "--out", out) == cli.EXIT_CONFIG
    assert run("tempsweep", "--config", cfg, "--temps", "44,120", "--out", out) == cli.EXIT_CONFIG
    assert run("tempsweep", "--config", cfg, "--temps", "warm", "--out", out) == cli.EXIT_CONFIG
    assert run("tempsweep", "--config", CONFIGS / "ideal.conf", "--temps", "44", "--out", out) == cli.EXIT_CONFIG
    assert not out.exists()


# --- fss ------------------------------------------------------------------------

def test_fss_synth_then_fit(tmp_path, capsys):
    series, fit = tmp_path / "series.csv", tmp_path / "fit.csv"
    assert run("fss", "synth", "--config", CONFIGS / "fss_qwp.conf", "--out", series) == 0
    assert read_rows(series)[0] == ["chi_rad", "delta_e_ueV", "sigma_ueV"]
    assert run("fss", "fit", "--in", series, "--out", fit) == 0
    header, rows = read_rows(fit)
    assert header == ["parameter", "estimate", "sigma"]
    est = {r[0]: float(r[1]) for r in rows}
    assert est["s_ueV"] == pytest.approx(17.7, abs=0.2)
    assert "s_ueV=" in capsys.readouterr().out


def test_fss_fit_constant_series_is_unresolved(tmp_path, capsys):
    chi = np.linspace(0, np.pi, 90, endpoint=False)
    series = tmp_path / "flat.csv"
    io.write_csv(series, ("chi_rad", "delta_e_ueV", "sigma_ueV"), [(c, 4.0, 0.3) for c in chi])
    fit = tmp_path / "fit.csv"
    assert run("fss", "fit", "--in", series, "--out", fit) == 0
    _, rows = read_rows(fit)
    assert rows[0][0] == "fss_unresolved_upper_bound_ueV"
    assert "unresolved" in capsys.readouterr().out


def test_fss_errors(tmp_path):
    assert run("fss", "fit", "--in", tmp_path / "none.csv", "--out", tmp_path / "o.csv") == cli.EXIT_IO
    short = tmp_path / "short.csv"
    io.write_csv(short, ("chi_rad", "delta_e_ueV", "sigma_ueV"), [(0.1 * i, 1.0, 0.3) for i in range(4)])
    assert run("fss", "fit", "--in", short, "--out", tmp_path / "o.csv") == cli.EXIT_DEGENERATE
    bad = tmp_path / "bad.conf"
    bad.write_text("[fss]\ns_ueV = 1\nfoo = 2\n")
    assert run("fss", "synth", "--config", bad, "--out", tmp_path / "o.csv") == cli.EXIT_CONFIG
    assert run("fss", "synth", "--config", tmp_path / "none.conf", "--out", tmp_path / "o.csv") == cli.EXIT_IO


def test_fss_synth_config_parser():
    cfg = cli.parse_fss_synth_config("[fss]\ns_ueV = 2\nnoise_ueV = 0.1\nseed = 3\n")
    assert cfg["points"] == 180 and cfg["theta_rad"] == 0.0
    with pytest.raises(io.ConfigError) as exc:
        cli.parse_fss_synth_config("[fss]\ns_ueV = q\npoints = 3\np = 2\nnoise_ueV = -1\n")
    assert len(exc.value.problems) == 5


# --- golden files -----------------------------------------------------------------

def _golden(name, produced: Path):
    target = GOLDEN / name
    if REGEN:
        GOLDEN.mkdir(exist_ok=True)
        shutil.copyfile(produced, target)
    assert target.exists(), f"missing golden file {name}; rerun with QLED_REGEN_GOLDEN=1"
    if produced.suffix == ".csv":
        got, want = read_rows(produced), read_rows(target)
        assert got[0] == want[0] and len(got[1]) == len(want[1])
        for g, w in zip(got[1], want[1]):
            try:
                assert np.allclose(np.array(g, float), np.array(w, float), rtol=1e-9, atol=1e-12, equal_nan=True)
            except ValueError:
                assert g[0] == w[0]
                assert np.allclose(np.array(g[1:], float), np.array(w[1:], float), rtol=1e-9, equal_nan=True)
    else:
        assert hashlib.sha256(produced.read_bytes()).hexdigest() == target.read_text().strip()


def test_golden_outputs(tmp_path):
    qtt = tmp_path / "ideal.qtt"
    run("simulate", "--config", CONFIGS / "ideal.conf", "--out", qtt, "--seed", 99)
    digest = tmp_path / "ideal.qtt.sha256"
    digest.write_text(hashlib.sha256(qtt.read_bytes()).hexdigest() + "\n")
    if REGEN:
        GOLDEN.mkdir(exist_ok=True)
        shutil.copyfile(digest, GOLDEN / "ideal.qtt.sha256")
    assert digest.read_text() == (GOLDEN / "ideal.qtt.sha256").read_text()

    g2 = tmp_path / "ideal_g2.csv"
    run("g2", "--in", qtt, "--a", "xx_plus", "--b", "x_plus", "--bin-ps", 256, "--window-ns", 4, "--out", g2)
    _golden("ideal_g2.csv", g2)

    series, fit = tmp_path / "fss_series.csv", tmp_path / "fss_fit.csv"
    run("fss", "synth", "--config", CONFIGS / "fss_qwp.conf", "--out", series)
    run("fss", "fit", "--in", series, "--out", fit)
    _golden("fss_series.csv", series)
    _golden("fss_fit.csv", fit)
