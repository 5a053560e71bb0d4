"""File formats: QTT1 time-tag files, scenario configs, manifests and CSV curves.

QTT1 layout (little-endian)::

    offset  size  field
    0       4     magic b"QTT1"
    4       2     version (1)
    6       2     header_len (28; larger values are skipped as extension bytes)
    8       4     channel_count (channels are numbered 0 .. channel_count-1)
    12      8     record_count
    20      8     duration_ps
    header_len    records, 16 bytes each: timestamp_ps u64, channel u8, flags u8, 6 zero bytes
"""

from __future__ import annotations

import configparser
import math
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import polarization as pol
from .cascade import CASCADE_FIELDS, CascadeParams, TemperatureModel
from .correlator import CorrelationCurve
from .detector import DetectorModel
from .simulate import ARMS, DEFAULT_CHANNELS, Scenario
from .stream import TimeTagStream

MAGIC = b"QTT1"
VERSION = 1
HEADER = struct.Struct("<4sHHIQQ")
HEADER_LEN = HEADER.size
RECORD_LEN = 16
RECORD_DTYPE = np.dtype([("timestamp", "<u8"), ("channel", "u1"), ("flags", "u1"), ("reserved", "V6")])


class FormatError(ValueError):
    """Malformed time-tag file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class ConfigError(ValueError):
    """Invalid scenario configuration; ``problems`` lists every offending key."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@contextmanager
def atomic_write(path, mode="wb"):
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"newline": ""})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# QTT1


def encode_stream(stream: TimeTagStream) -> bytes:
    stream.check_sorted()
    if len(stream) and int(stream.channels.max()) > 255:
        raise ValueError("QTT1 stores channels as u8; channel numbers must be <= 255")
    channel_count = max(stream.channel_map, default=-1) + 1
    if channel_count > 256:
        raise ValueError("QTT1 supports at most 256 channels")
    records = np.zeros(len(stream), RECORD_DTYPE)
    records["timestamp"] = stream.timestamps
    records["channel"] = stream.channels
    records["flags"] = stream.flags
    header = HEADER.pack(MAGIC, VERSION, HEADER_LEN, channel_count, len(stream), stream.duration_ps)
    return header + records.tobytes()


def write_qtt(path, stream: TimeTagStream):
    data = encode_stream(stream)
    with atomic_write(path) as fh:
        fh.write(data)


def _parse_header(buf: bytes):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic, expected b'QTT1'", 0)
    if len(buf) < HEADER_LEN:
        raise FormatError("truncated header", len(buf))
    magic, version, header_len, channel_count, record_count, duration = HEADER.unpack_from(buf)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if header_len < HEADER_LEN:
        raise FormatError(f"header_len {header_len} shorter than {HEADER_LEN}", 6)
    if len(buf) < header_len:
        raise FormatError("truncated header extension", len(buf))
    return header_len, channel_count, record_count, duration


def decode_stream(buf: bytes, channel_map: dict[int, str] | None = None) -> TimeTagStream:
    header_len, channel_count, record_count, duration = _parse_header(buf)
    body = len(buf) - header_len
    complete = body // RECORD_LEN
    if complete < record_count:
        raise FormatError(f"truncated record {complete} of {record_count}", header_len + complete * RECORD_LEN)
    if body != record_count * RECORD_LEN:
        raise FormatError("trailing bytes after last record", header_len + record_count * RECORD_LEN)
    records = np.frombuffer(buf, RECORD_DTYPE, count=record_count, offset=header_len)
    _check_records(records, header_len, channel_count, 0, None)
    cmap = {c: f"ch{c}" for c in range(channel_count)}
    cmap.update({c: n for c, n in (channel_map or {}).items() if c < channel_count})
    ts = records["timestamp"]
    if record_count and int(ts.max()) > np.iinfo(np.int64).max:
        raise FormatError("timestamp exceeds int64 range", header_len)
    return TimeTagStream(ts.astype(np.int64), records["channel"].astype(np.uint16),
                         records["flags"].copy(), duration, cmap)


def _check_records(records, header_len, channel_count, first_index, previous_ts):
    if len(records) == 0:
        return
    base = header_len + first_index * RECORD_LEN
    reserved = np.frombuffer(records["reserved"].tobytes(), np.uint8).reshape(-1, 6)
    bad = np.flatnonzero(reserved.any(axis=1))
    if bad.size:
        raise FormatError("non-zero reserved bytes", base + int(bad[0]) * RECORD_LEN + 10)
    bad = np.flatnonzero(records["channel"] >= channel_count)
    if bad.size:
        raise FormatError(f"channel {records['channel'][bad[0]]} >= channel_count {channel_count}",
                          base + int(bad[0]) * RECORD_LEN + 8)
    ts = records["timestamp"]
    if previous_ts is not None and ts[0] < previous_ts:
        raise FormatError("timestamps decrease", base)
    bad = np.flatnonzero(ts[1:] < ts[:-1])  # unsigned: np.diff would wrap
    if bad.size:
        raise FormatError("timestamps decrease", base + (int(bad[0]) + 1) * RECORD_LEN)


def read_qtt(path, channel_map: dict[int, str] | None = None) -> TimeTagStream:
    """Read a whole QTT1 file; labels from a sidecar manifest are applied when present."""
    path = Path(path)
    buf = path.read_bytes()
    if channel_map is None:
        channel_map = manifest_channel_labels(manifest_path(path))
    return decode_stream(buf, channel_map)


def iter_qtt(path, chunk_records: int = 1 << 20):
    """Yield (timestamps, channels, flags) chunks without loading the whole file."""
    with open(path, "rb") as fh:
        head = fh.read(HEADER_LEN)
        if len(head) == HEADER_LEN and head[:4] == MAGIC:
            head += fh.read(max(0, HEADER.unpack_from(head)[2] - HEADER_LEN))
        header_len, channel_count, record_count, _ = _parse_header(head)
        done = 0
        prev = None
        while done < record_count:
            n = min(chunk_records, record_count - done)
            raw = fh.read(n * RECORD_LEN)
            if len(raw) < n * RECORD_LEN:
                got = len(raw) // RECORD_LEN
                raise FormatError(f"truncated record {done + got} of {record_count}",
                                  header_len + (done + got) * RECORD_LEN)
            records = np.frombuffer(raw, RECORD_DTYPE)
            _check_records(records, header_len, channel_count, done, prev)
            prev = records["timestamp"][-1]
            yield records["timestamp"].astype(np.int64), records["channel"].astype(np.uint16), records["flags"].copy()
            done += n
        if fh.read(1):
            raise FormatError("trailing bytes after last record", header_len + record_count * RECORD_LEN)


# ---------------------------------------------------------------------------
# manifests


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def write_manifest(path, items: dict):
    with atomic_write(path, "w") as fh:
        for key, value in items.items():
            fh.write(f"{key} = {value}\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    path = Path(path)
    if not path.exists():
        return out
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def manifest_channel_labels(path) -> dict[int, str]:
    labels = {}
    for key, value in read_manifest(path).items():
        if key.startswith("channel.") and key[len("channel."):] in ARMS:
            labels[int(value)] = key[len("channel."):]
    return labels


def manifest_channels(path) -> dict[str, int]:
    """Arm -> channel plan recorded in a manifest, falling back to the defaults."""
    plan = dict(DEFAULT_CHANNELS)
    for ch, arm in manifest_channel_labels(path).items():
        plan[arm] = ch
    return plan


def scenario_manifest(scenario: Scenario) -> dict:
    """Effective parameters of a scenario (after temperature interpolation)."""
    src = scenario.effective_source()
    items = {f"source.{name}": getattr(src, name) for name in CASCADE_FIELDS}
    for arm in ARMS:
        det = scenario.detectors[arm]
        for name in ("efficiency", "jitter_fwhm_ps", "dark_rate_hz", "dead_time_ps", "time_bin_ps"):
            items[f"detector.{arm}.{name}"] = getattr(det, name)
    for arm in ARMS:
        items[f"channel.{arm}"] = scenario.channels[arm]
    items["measurement.basis_xx"] = scenario.basis_xx
    items["measurement.basis_x"] = scenario.basis_x
    items["measurement.duration_ps"] = scenario.duration_ps
    items["measurement.seed"] = scenario.seed
    if scenario.temperature_K is not None:
        items["temperature_K"] = scenario.temperature_K
    return items


# ---------------------------------------------------------------------------
# scenario config


_DETECTOR_FIELDS = {"efficiency": float, "jitter_fwhm_ps": float, "dark_rate_hz": float,
                    "dead_time_ps": float, "time_bin_ps": float}
_SOURCE_TYPES = {name: (str if name == "noise_mode" else float) for name in CASCADE_FIELDS}
_MEASUREMENT_KEYS = {"basis_xx", "basis_x", "channels", "duration_s", "seed"}


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       interpolation=None, default_section="__none__")
    parser.optionxform = str
    return parser


def _convert(problems, key, raw, kind):
    try:
        return kind(raw)
    except ValueError:
        problems.append(f"{key}: cannot parse {raw!r} as {kind.__name__}")
        return None


def parse_config(text: str, source_name: str = "<config>") -> Scenario:
    """Build a :class:`Scenario` from config text, reporting every problem at once."""
    parser = _parser()
    try:
        parser.read_string(text, source=source_name)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from None
    problems: list[str] = []

    for section in parser.sections():
        if section not in ("source", "measurement", "temperature", "detector") and not section.startswith("detector."):
            problems.append(f"[{section}]: unknown section")

    source_kwargs = {}
    if parser.has_section("source"):
        for key, raw in parser.items("source"):
            if key not in _SOURCE_TYPES:
                problems.append(f"source.{key}: unknown key")
                continue
            value = _convert(problems, f"source.{key}", raw, _SOURCE_TYPES[key])
            if value is not None:
                source_kwargs[key] = value
    source = None
    source_problems = CascadeParams.problems_for(**source_kwargs)
    if source_problems:
        problems.extend(f"source: {p}" for p in source_problems)
    else:
        source = CascadeParams(**source_kwargs)

    defaults = {}
    if parser.has_section("detector"):
        for key, raw in parser.items("detector"):
            if key not in _DETECTOR_FIELDS:
                problems.append(f"detector.{key}: unknown key")
                continue
            value = _convert(problems, f"detector.{key}", raw, float)
            if value is not None:
                defaults[key] = value
    detectors = {}
    for arm in ARMS:
        section = f"detector.{arm}"
        kwargs = dict(defaults)
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in _DETECTOR_FIELDS:
                    problems.append(f"{section}.{key}: unknown key")
                    continue
                value = _convert(problems, f"{section}.{key}", raw, float)
                if value is not None:
                    kwargs[key] = value
        elif not defaults:
            problems.append(f"[{section}]: missing detector section")
            continue
        try:
            detectors[arm] = DetectorModel(**kwargs)
        except ValueError as exc:
            problems.append(f"{section}: {exc}")
    for section in parser.sections():
        if section.startswith("detector.") and section[len("detector."):] not in ARMS:
            problems.append(f"[{section}]: unknown arm; expected one of {list(ARMS)}")

    channels = dict(DEFAULT_CHANNELS)
    basis_xx = basis_x = None
    duration_ps = None
    seed = None
    if not parser.has_section("measurement"):
        problems.append("[measurement]: missing section")
    else:
        m = dict(parser.items("measurement"))
        for key in m:
            if key not in _MEASUREMENT_KEYS:
                problems.append(f"measurement.{key}: unknown key")
        for key in ("basis_xx", "basis_x"):
            if key not in m:
                problems.append(f"measurement.{key}: missing")
                continue
            try:
                name = pol.basis(m[key]).name
            except KeyError as exc:
                problems.append(f"measurement.{key}: {exc.args[0]}")
                continue
            if key == "basis_xx":
                basis_xx = name
            else:
                basis_x = name
        if "channels" in m:
            channels = _parse_channels(m["channels"], problems)
        if "duration_s" not in m:
            problems.append("measurement.duration_s: missing")
        else:
            seconds = _convert(problems, "measurement.duration_s", m["duration_s"], float)
            if seconds is not None:
                if not seconds >= 0 or not math.isfinite(seconds):
                    problems.append("measurement.duration_s: must be a finite number >= 0")
                else:
                    duration_ps = int(round(seconds * 1e12))
        if "seed" in m:
            seed = _convert(problems, "measurement.seed", m["seed"], int)
            if seed is not None and not 0 <= seed < 2**64:
                problems.append("measurement.seed: must be an unsigned 64-bit integer")

    temperature = None
    if parser.has_section("temperature"):
        temperature = _parse_temperature(dict(parser.items("temperature")), problems)

    if problems:
        raise ConfigError(problems)
    return Scenario(source=source, detectors=detectors, channels=channels, basis_xx=basis_xx,
                    basis_x=basis_x, duration_ps=duration_ps, seed=seed, temperature=temperature)


def _parse_channels(raw: str, problems) -> dict[str, int]:
    channels = dict(DEFAULT_CHANNELS)
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        arm, _, ch = item.partition(":")
        arm = arm.strip()
        if arm not in ARMS:
            problems.append(f"measurement.channels: unknown arm {arm!r}")
            continue
        value = _convert(problems, f"measurement.channels.{arm}", ch.strip(), int)
        if value is not None:
            if not 0 <= value <= 255:
                problems.append(f"measurement.channels.{arm}: channel must lie in 0..255")
            channels[arm] = value
    if len(set(channels.values())) != len(channels):
        problems.append("measurement.channels: arms must use distinct channels")
    return channels


def _parse_temperature(items: dict, problems) -> TemperatureModel | None:
    interpolation = items.pop("interpolation", "linear")
    rows = []
    for key, raw in items.items():
        t = _convert(problems, f"temperature.{key}", key, float)
        parts = [p.strip() for p in raw.split(",")]
        if len(parts) != 2:
            problems.append(f"temperature.{key}: expected 'x_lifetime_ps, background_fraction'")
            continue
        life = _convert(problems, f"temperature.{key}", parts[0], float)
        bg = _convert(problems, f"temperature.{key}", parts[1], float)
        if None not in (t, life, bg):
            rows.append((t, life, bg))
    rows.sort()
    try:
        return TemperatureModel(tuple(rows), interpolation)
    except ValueError as exc:
        problems.append(f"temperature: {exc}")
        return None


def load_config(path) -> Scenario:
    text = Path(path).read_text(encoding="utf-8")
    return parse_config(text, str(path))


def format_config(scenario: Scenario) -> str:
    """Serialize a scenario back to config text."""
    lines = ["[source]"]
    for name in CASCADE_FIELDS:
        lines.append(f"{name} = {getattr(scenario.source, name)}")
    for arm in ARMS:
        det = scenario.detectors[arm]
        lines += ["", f"[detector.{arm}]"]
        lines += [f"{name} = {getattr(det, name)}" for name in _DETECTOR_FIELDS]
    lines += ["", "[measurement]", f"basis_xx = {scenario.basis_xx}", f"basis_x = {scenario.basis_x}",
              "channels = " + ", ".join(f"{arm}:{scenario.channels[arm]}" for arm in ARMS),
              f"duration_s = {scenario.duration_ps / 1e12!r}"]
    if scenario.seed is not None:
        lines.append(f"seed = {scenario.seed}")
    if scenario.temperature is not None:
        lines += ["", "[temperature]", f"interpolation = {scenario.temperature.interpolation}"]
        lines += [f"{t!r} = {life!r}, {bg!r}" for t, life, bg in scenario.temperature.table]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# CSV


def _fmt(v) -> str:
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def write_csv(path, header, rows):
    with atomic_write(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else _fmt(v) for v in row) + "\n")


def write_curve_csv(path, curve: CorrelationCurve | None, value_name: str = "value"):
    rows = [] if curve is None else zip(curve.delays_ps, curve.values, curve.sigma)
    write_csv(path, ("delay_ps", value_name, "sigma"), rows)


def read_curve_csv(path) -> CorrelationCurve:
    lines = Path(path).read_text().splitlines()[1:]
    data = np.genfromtxt(lines, delimiter=",", ndmin=2) if any(l.strip() for l in lines) else np.empty((0, 3))
    if data.size == 0:
        return CorrelationCurve(np.empty(0), np.empty(0), np.empty(0))
    return CorrelationCurve(data[:, 0], data[:, 1], data[:, 2])
