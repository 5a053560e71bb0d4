"""``qled`` command-line interface.

Exit codes: 0 success, 1 classical-limit check not passed (``fidelity``),
2 configuration or usage error, 3 I/O or file-format error, 4 degenerate
analysis (fit failure, empty correlation).
"""

from __future__ import annotations

import argparse
import configparser
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fss
from . import io as qio
from . import polarization as pol
from .analysis import MissingBasisError, analyze_basis_set, parse_mode
from .correlator import CorrelationError, CorrelationCurve, cross_correlation, normalize_g2
from .fitting import FitError
from .simulate import ARMS, ScenarioError, simulate_basis_set, simulate_stream

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DEGENERATE = 4

CLASSICAL_LIMIT = 0.5
CLASSICAL_SIGMAS = 4.0


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _fail(message, code):
    raise CliError(message, code)


def _load_scenario(path):
    try:
        return qio.load_config(path)
    except OSError as exc:
        _fail(f"cannot read config: {exc}", EXIT_IO)


def _read_stream(path):
    try:
        return qio.read_qtt(path)
    except OSError as exc:
        _fail(f"cannot read {path}: {exc}", EXIT_IO)


def _channel(stream, text: str) -> int:
    """Channel number, or an arm label resolved through the stream's channel map."""
    try:
        ch = int(text)
    except ValueError:
        for number, label in stream.channel_map.items():
            if label == text:
                return number
        _fail(f"unknown channel {text!r}; known: {sorted(stream.channel_map.items())}", EXIT_CONFIG)
    if len(stream.channel_map) and ch not in stream.channel_map:
        _fail(f"channel {ch} not present; file has channels {sorted(stream.channel_map)}", EXIT_CONFIG)
    return ch


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    scenario = _load_scenario(args.config)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    if args.temperature is not None:
        scenario = replace(scenario, temperature_K=args.temperature)
    if args.basis is not None:
        try:
            scenario = scenario.with_basis(args.basis)
        except KeyError as exc:
            _fail(f"--basis: {exc.args[0]}", EXIT_CONFIG)
    stream = simulate_stream(scenario)
    qio.write_qtt(args.out, stream)
    qio.write_manifest(qio.manifest_path(args.out), qio.scenario_manifest(scenario))
    print(f"wrote {len(stream)} records to {args.out}")
    return EXIT_OK


def _correlate(args, normalized: bool) -> int:
    stream = _read_stream(args.input)
    value_name = "g2" if normalized else "counts"
    if len(stream) == 0:
        qio.write_curve_csv(args.out, None, value_name)
        return EXIT_OK
    a, b = _channel(stream, args.a), _channel(stream, args.b)
    hist = cross_correlation(stream, a, b, args.bin_ps, int(round(args.window_ns * 1000)))
    if normalized:
        curve = normalize_g2(hist)
    else:
        curve = CorrelationCurve(hist.delays_ps, hist.counts.astype(float), np.sqrt(hist.counts))
    qio.write_curve_csv(args.out, curve, value_name)
    return EXIT_OK


def cmd_g2(args) -> int:
    return _correlate(args, normalized=True)


def cmd_xcorr(args) -> int:
    return _correlate(args, normalized=False)


def _read_basis_dir(directory: Path):
    if not directory.is_dir():
        _fail(f"{directory} is not a directory", EXIT_IO)
    found = {p.stem: p for p in directory.glob("*.qtt")}
    if any(b not in found for b in pol.BASIS_ORDER):
        raise MissingBasisError(found, pol.BASIS_ORDER)
    runs = {b: _read_stream(found[b]) for b in pol.BASIS_ORDER}
    channels = qio.manifest_channels(qio.manifest_path(found["hv"]))
    return runs, channels


def _summary(peak, significance) -> str:
    return (f"peak_fidelity={peak.value:.4f} sigma={peak.sigma:.4f} delay_ps={peak.delay_ps:g} "
            f"sigmas_above_0.5={significance:.1f}")


def cmd_fidelity(args) -> int:
    try:
        mode = parse_mode(args.mode)
    except ValueError as exc:
        _fail(str(exc), EXIT_CONFIG)
    runs, channels = _read_basis_dir(Path(args.in_dir))
    result = analyze_basis_set(runs, channels, args.fss_ueV, mode, args.bin_ps,
                               int(round(args.window_ns * 1000)))
    qio.write_curve_csv(args.out, result.fidelity, "fidelity")
    significance = result.significance_above(CLASSICAL_LIMIT)
    print(_summary(result.peak, significance))
    return EXIT_OK if significance >= CLASSICAL_SIGMAS else EXIT_CHECK_FAILED


def _parse_temps(text: str) -> list[float]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        _fail("--temps: empty temperature list", EXIT_CONFIG)
    try:
        return [float(t) for t in items]
    except ValueError:
        _fail(f"--temps: cannot parse {text!r}", EXIT_CONFIG)


def cmd_tempsweep(args) -> int:
    temps = _parse_temps(args.temps)
    scenario = _load_scenario(args.config)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    if scenario.temperature is None:
        _fail("config has no [temperature] table", EXIT_CONFIG)
    if scenario.seed is None:
        _fail("measurement.seed: a seed is required", EXIT_CONFIG)
    lo, hi = scenario.temperature.temperatures[[0, -1]]
    outside = [t for t in temps if not lo <= t <= hi]
    if outside:
        _fail(f"temperatures {outside} outside calibrated range [{lo}, {hi}] K", EXIT_CONFIG)

    rows = []
    for i, temp in enumerate(temps):
        at_t = replace(scenario, temperature_K=temp)
        runs = simulate_basis_set(at_t, seed=scenario.seed + i)
        result = analyze_basis_set(runs, at_t.channels, at_t.effective_source().fss_ueV, "evolving",
                                   args.bin_ps, int(round(args.window_ns * 1000)))
        hwhm = result.gaussian.hwhm_ps if result.gaussian is not None else math.nan
        rows.append((temp, result.peak.value, result.peak.sigma, hwhm, at_t.effective_source().x_lifetime_ps))
        print(f"T={temp:g} K " + _summary(result.peak, result.significance_above(CLASSICAL_LIMIT)))
    qio.write_csv(args.out, ("temperature_K", "peak_fidelity", "sigma", "hwhm_ps", "x_lifetime_ps"), rows)
    return EXIT_OK


def cmd_fss_fit(args) -> int:
    try:
        series = fss.read_series_csv(args.input)
    except OSError as exc:
        _fail(f"cannot read {args.input}: {exc}", EXIT_IO)
    except (fss.FssError, ValueError) as exc:
        _fail(f"{args.input}: {exc}", EXIT_IO)
    result = fss.fit_fss(series, fit_p=args.fit_p)
    qio.write_csv(args.out, ("parameter", "estimate", "sigma"), result.rows())
    if result.resolved:
        print(f"s_ueV={result.params.s_ueV:.4f} sigma={result.sigma('s_ueV'):.4f}")
    else:
        print(f"FSS unresolved; s < {result.s_upper_bound_ueV:.4f} ueV")
    return EXIT_OK


_FSS_SYNTH_KEYS = {"s_ueV": float, "theta_rad": float, "phi_rad": float, "p": float, "epsilon_ueV": float,
                   "noise_ueV": float, "points": int, "seed": int}


def parse_fss_synth_config(text: str) -> dict:
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise qio.ConfigError([f"syntax: {exc}"]) from None
    if not parser.has_section("fss"):
        raise qio.ConfigError(["[fss]: missing section"])
    problems, out = [], {"theta_rad": 0.0, "phi_rad": 0.0, "p": 0.0, "epsilon_ueV": 0.0, "points": 180}
    for key, raw in parser.items("fss"):
        if key not in _FSS_SYNTH_KEYS:
            problems.append(f"fss.{key}: unknown key")
            continue
        try:
            out[key] = _FSS_SYNTH_KEYS[key](raw)
        except ValueError:
            problems.append(f"fss.{key}: cannot parse {raw!r}")
    for key in ("s_ueV", "noise_ueV", "seed"):
        if key not in out and not parser.has_option("fss", key):
            problems.append(f"fss.{key}: missing")
    if out.get("points", 8) < 8:
        problems.append("fss.points: need at least 8 angles")
    if out.get("noise_ueV", 0) < 0:
        problems.append("fss.noise_ueV: must be >= 0")
    if not abs(out.get("p", 0)) <= 1:
        problems.append("fss.p: must lie in [-1, 1]")
    if problems:
        raise qio.ConfigError(problems)
    return out


def cmd_fss_synth(args) -> int:
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        _fail(f"cannot read config: {exc}", EXIT_IO)
    cfg = parse_fss_synth_config(text)
    params = fss.QwpModelParams(cfg["s_ueV"], cfg["theta_rad"], cfg["phi_rad"], cfg["p"], cfg["epsilon_ueV"])
    chi = np.linspace(0, np.pi, cfg["points"], endpoint=False)
    series = fss.synth_qwp_series(params, chi, cfg["noise_ueV"], np.random.default_rng(cfg["seed"]))
    qio.write_csv(args.out, ("chi_rad", "delta_e_ueV", "sigma_ueV"),
                  zip(series.chi_rad, series.delta_e_ueV, series.sigma_ueV))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qled", description="Entangled-LED simulation and analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one basis run to a QTT1 time-tag file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="overrides measurement.seed")
    p.add_argument("--temperature", type=float, help="interpolate the source from the [temperature] table")
    p.add_argument("--basis", help="analyze both photons in this basis (overrides the config)")
    p.set_defaults(func=cmd_simulate)

    for name, func, what in (("g2", cmd_g2, "normalized second-order correlation"),
                             ("xcorr", cmd_xcorr, "raw coincidence histogram")):
        p = sub.add_parser(name, help=what)
        p.add_argument("--in", dest="input", required=True)
        p.add_argument("--a", required=True, help="start channel number or arm label")
        p.add_argument("--b", required=True, help="stop channel number or arm label")
        p.add_argument("--bin-ps", type=int, default=32)
        p.add_argument("--window-ns", type=float, default=50.0)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("fidelity", help="Bell-state fidelity from a five-basis run directory")
    p.add_argument("--in-dir", required=True)
    p.add_argument("--fss-ueV", type=float, required=True)
    p.add_argument("--mode", default="evolving", help="'evolving' or 'chi=<radians>'")
    p.add_argument("--bin-ps", type=int, default=32)
    p.add_argument("--window-ns", type=float, default=50.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fidelity)

    p = sub.add_parser("tempsweep", help="peak fidelity versus temperature")
    p.add_argument("--config", required=True)
    p.add_argument("--temps", required=True, help="comma-separated temperatures in K")
    p.add_argument("--seed", type=int, help="overrides measurement.seed")
    p.add_argument("--bin-ps", type=int, default=32)
    p.add_argument("--window-ns", type=float, default=50.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tempsweep)

    p = sub.add_parser("fss", help="fine-structure splitting from QWP scans")
    fsub = p.add_subparsers(dest="fss_command", required=True)
    q = fsub.add_parser("fit", help="fit the QWP model to a chi_rad,delta_e_ueV,sigma_ueV CSV")
    q.add_argument("--in", dest="input", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--fit-p", action="store_true", help="also fit the polarization degree p")
    q.set_defaults(func=cmd_fss_fit)
    q = fsub.add_parser("synth", help="synthesize a QWP scan from an [fss] config")
    q.add_argument("--config", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_fss_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (qio.ConfigError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (qio.FormatError, MissingBasisError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FitError, CorrelationError, fss.FssError, fss.LineFitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
