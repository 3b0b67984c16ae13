"""System-statistics traces: data model, CSV/JSONL I/O, synthetic generation and
a minimal Linux sampler."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from operator import attrgetter
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import (
    CounterReadError,
    SampleValidationError,
    TraceFormatError,
    UnsupportedPlatformError,
)

# Canonical order of the eleven statistics fed to every model.
FEATURE_NAMES = (
    "cpu_freq_mhz",
    "user_time_pct",
    "cpu_util_pct",
    "interrupts_per_s",
    "soft_interrupts_per_s",
    "process_count",
    "cache_miss_ratio",
    "virtual_mem_pct",
    "syscalls_per_s",
    "instructions_per_s",
    "shared_mem_bytes",
)
OPTIONAL_COLUMNS = ("measured_power_watts", "rapl_watts", "workload_tag")
CSV_COLUMNS = ("timestamp",) + FEATURE_NAMES + OPTIONAL_COLUMNS

_PERCENT_FIELDS = frozenset({"user_time_pct", "cpu_util_pct", "virtual_mem_pct"})
JITTER_TOLERANCE = 0.10

get_features = attrgetter(*FEATURE_NAMES)


@dataclass(frozen=True)
class StatSample:
    timestamp: float
    cpu_freq_mhz: float
    user_time_pct: float
    cpu_util_pct: float
    interrupts_per_s: float
    soft_interrupts_per_s: float
    process_count: int
    cache_miss_ratio: float
    virtual_mem_pct: float
    syscalls_per_s: float
    instructions_per_s: float
    shared_mem_bytes: float
    measured_power_watts: Optional[float] = None
    rapl_watts: Optional[float] = None
    workload_tag: Optional[str] = None

    def __post_init__(self):
        if not math.isfinite(self.timestamp):
            raise SampleValidationError("timestamp", self.timestamp, "must be finite")
        for name in FEATURE_NAMES:
            v = getattr(self, name)
            if name in _PERCENT_FIELDS:
                ok, rule = 0.0 <= v <= 100.0, "must be within [0, 100]"
            elif name == "cache_miss_ratio":
                ok, rule = 0.0 <= v <= 1.0, "must be within [0, 1]"
            elif name == "process_count":
                ok, rule = isinstance(v, (int, np.integer)) and v >= 0, "must be a non-negative integer"
            else:
                ok, rule = math.isfinite(v) and v >= 0.0, "must be finite and non-negative"
            if not ok:
                raise SampleValidationError(name, v, rule)
        for name in ("measured_power_watts", "rapl_watts"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v > 0.0):
                raise SampleValidationError(name, v, "must be finite and positive")

    def features(self) -> tuple:
        """The eleven statistics in canonical order."""
        return get_features(self)


@dataclass(frozen=True)
class Trace:
    server_id: str
    sample_interval_s: float
    samples: tuple

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if not self.samples:
            raise TraceFormatError("trace is empty")
        if not self.sample_interval_s > 0:
            raise TraceFormatError(f"sample_interval_s must be positive, got {self.sample_interval_s}")
        ts = np.fromiter((s.timestamp for s in self.samples), float, len(self.samples))
        gaps = np.diff(ts)
        if np.any(gaps <= 0):
            i = int(np.argmax(gaps <= 0)) + 1
            raise TraceFormatError(f"timestamps not strictly increasing at sample {i}", field="timestamp")
        bad = np.abs(gaps - self.sample_interval_s) > JITTER_TOLERANCE * self.sample_interval_s
        if np.any(bad):
            i = int(np.argmax(bad)) + 1
            raise TraceFormatError(
                f"gap {gaps[i - 1]:g}s at sample {i} deviates from interval "
                f"{self.sample_interval_s:g}s by more than 10%",
                field="timestamp",
            )

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def column(self, name: str) -> np.ndarray:
        """Numeric column as a float array; absent optional values become NaN."""
        return np.array(
            [np.nan if (v := getattr(s, name)) is None else v for s in self.samples], dtype=float
        )

    @cached_property
    def feature_matrix(self) -> np.ndarray:
        """(n, 11) array of raw statistics."""
        return np.array([get_features(s) for s in self.samples], dtype=float)

    def has_power(self) -> bool:
        return all(s.measured_power_watts is not None for s in self.samples)

    def has_rapl(self) -> bool:
        return all(s.rapl_watts is not None for s in self.samples)


@dataclass(frozen=True)
class ServerProfile:
    server_id: str
    idle_power_watts: float
    max_power_watts: float
    description: str = ""

    def __post_init__(self):
        if not (self.idle_power_watts > 0 and self.max_power_watts > self.idle_power_watts):
            raise SampleValidationError(
                "max_power_watts",
                (self.idle_power_watts, self.max_power_watts),
                "profile requires max_power_watts > idle_power_watts > 0",
            )

    @property
    def dynamic_range(self) -> float:
        return self.max_power_watts - self.idle_power_watts

    def to_doc(self) -> dict:
        return {
            "server_id": self.server_id,
            "idle_power_watts": self.idle_power_watts,
            "max_power_watts": self.max_power_watts,
            "description": self.description,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "ServerProfile":
        try:
            return cls(
                server_id=str(doc["server_id"]),
                idle_power_watts=float(doc["idle_power_watts"]),
                max_power_watts=float(doc["max_power_watts"]),
                description=str(doc.get("description", "")),
            )
        except KeyError as exc:
            raise SampleValidationError(exc.args[0], None, "missing from profile") from None


# Idle draw of the reference Xeon server; the peak is a plausible placeholder.
DEFAULT_PROFILE = ServerProfile("synthetic-0", 237.58, 350.0, "synthetic reference server")


def load_profile(path) -> ServerProfile:
    with open(path, encoding="utf-8") as fh:
        return ServerProfile.from_doc(json.load(fh))


def save_profile(profile: ServerProfile, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(profile.to_doc(), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Parsing / writing
# ---------------------------------------------------------------------------

class TraceFormat(str, Enum):
    CSV = "csv"
    JSONL = "jsonl"


def _coerce(name, raw, line):
    if name == "workload_tag":
        return raw if raw not in (None, "") else None
    if raw is None or raw == "":
        if name in OPTIONAL_COLUMNS:
            return None
        raise TraceFormatError("missing value", line=line, field=name)
    try:
        if name == "process_count":
            if isinstance(raw, str):
                val = float(raw)
            else:
                val = raw
            if isinstance(val, bool) or val != int(val):
                raise ValueError
            return int(val)
        if isinstance(raw, bool):
            raise ValueError
        return float(raw)
    except (TypeError, ValueError, OverflowError):
        raise TraceFormatError(f"not a number: {raw!r}", line=line, field=name) from None


def _build_sample(record: dict, line: int) -> StatSample:
    kwargs = {name: _coerce(name, record.get(name), line) for name in CSV_COLUMNS}
    try:
        return StatSample(**kwargs)
    except SampleValidationError as exc:
        raise TraceFormatError(str(exc), line=line, field=exc.field) from None


def _infer_interval(timestamps: Sequence[float]) -> float:
    if len(timestamps) < 2:
        return 1.0
    return float(np.median(np.diff(timestamps)))


def parse_trace(
    source: Union[bytes, str, io.IOBase, Iterable[bytes]],
    format: Union[str, TraceFormat] = TraceFormat.CSV,
    server_id: str = "unknown",
) -> Trace:
    """Parse a CSV or JSONL trace.

    ``source`` may be bytes, a text string, or a binary/text file object.
    Unknown columns are ignored; the sample interval is inferred as the
    median timestamp gap.
    """
    fmt = TraceFormat(format)
    if isinstance(source, bytes):
        data = source
    elif isinstance(source, str):
        data = source.encode("utf-8")
    else:
        data = source.read()
        if isinstance(data, str):
            data = data.encode("utf-8")
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TraceFormatError(f"not valid UTF-8: {exc}") from None

    samples = []
    if fmt is TraceFormat.CSV:
        reader = csv.DictReader(io.StringIO(text, newline=""))
        header = reader.fieldnames
        if not header:
            raise TraceFormatError("empty body: no header")
        missing = [c for c in ("timestamp",) + FEATURE_NAMES if c not in header]
        if missing:
            raise TraceFormatError(f"header lacks required columns {missing}", line=1)
        for row in reader:
            if None in row:
                raise TraceFormatError("too many fields", line=reader.line_num)
            samples.append(_build_sample(row, reader.line_num))
    else:
        for lineno, raw in enumerate(text.splitlines(), start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"invalid JSON: {exc.msg}", line=lineno) from None
            if not isinstance(record, dict):
                raise TraceFormatError("expected a JSON object", line=lineno)
            samples.append(_build_sample(record, lineno))

    if not samples:
        raise TraceFormatError("empty body: no samples")
    ts = [s.timestamp for s in samples]
    return Trace(server_id, _infer_interval(ts), samples)


def _sample_record(s: StatSample) -> dict:
    return {name: getattr(s, name) for name in CSV_COLUMNS}


def write_trace(trace: Trace, format: Union[str, TraceFormat] = TraceFormat.CSV) -> bytes:
    """Serialize a trace. Floats are written with ``repr`` so they re-parse exactly."""
    fmt = TraceFormat(format)
    buf = io.StringIO(newline="")
    if fmt is TraceFormat.CSV:
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for s in trace.samples:
            writer.writerow(["" if v is None else repr(v) if isinstance(v, float) else v
                             for v in _sample_record(s).values()])
    else:
        for s in trace.samples:
            record = {k: v for k, v in _sample_record(s).items() if v is not None}
            buf.write(json.dumps(record))
            buf.write("\n")
    return buf.getvalue().encode("utf-8")


def format_for_path(path, default="csv") -> TraceFormat:
    p = str(path).lower()
    if p.endswith(".jsonl") or p.endswith(".ndjson"):
        return TraceFormat.JSONL
    if p.endswith(".csv"):
        return TraceFormat.CSV
    return TraceFormat(default)


def read_trace_file(path, format=None) -> Trace:
    fmt = TraceFormat(format) if format else format_for_path(path)
    with open(path, "rb") as fh:
        return parse_trace(fh.read(), fmt, server_id=os.path.splitext(os.path.basename(str(path)))[0])


def write_trace_file(trace: Trace, path, format=None) -> None:
    fmt = TraceFormat(format) if format else format_for_path(path)
    with open(path, "wb") as fh:
        fh.write(write_trace(trace, fmt))


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

class Regime(str, Enum):
    COMPUTE = "compute"
    NONCOMPUTE = "noncompute"
    MIXED = "mixed"


@dataclass(frozen=True)
class SyntheticConfig:
    regime: Regime = Regime.MIXED
    duration_samples: int = 1000
    noise_sigma_watts: float = 0.0
    container_noise: float = 0.0
    seed: int = 0
    profile: ServerProfile = DEFAULT_PROFILE
    mix_period: int = 120
    sample_interval_s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        if not (isinstance(self.duration_samples, int) and self.duration_samples > 0):
            raise SampleValidationError("duration_samples", self.duration_samples, "must be a positive integer")
        if not self.noise_sigma_watts >= 0:
            raise SampleValidationError("noise_sigma_watts", self.noise_sigma_watts, "must be >= 0")
        if not self.container_noise >= 0:
            raise SampleValidationError("container_noise", self.container_noise, "must be >= 0")
        if not (isinstance(self.mix_period, int) and self.mix_period > 0):
            raise SampleValidationError("mix_period", self.mix_period, "must be a positive integer")
        if not self.sample_interval_s > 0:
            raise SampleValidationError("sample_interval_s", self.sample_interval_s, "must be positive")
        if not 0 <= self.seed < 2**64:
            raise SampleValidationError("seed", self.seed, "must fit in 64 bits")


FREQ_MIN_MHZ = 1200.0
FREQ_MAX_MHZ = 3200.0
SHM_BASE_BYTES = 256.0 * 2**20
SHM_SPAN_BYTES = 2.0 * 2**30
N_CORES = 16


def noncompute_curve(x):
    """Degree-5 power curve of normalized frequency used by the memory-bound regime."""
    return np.clip(np.asarray(x, dtype=float) ** 5, 0.0, 1.0)


def bounded_walk(rng: np.random.Generator, n: int, lo=5.0, hi=95.0, step=5.0) -> np.ndarray:
    """Random walk with uniform(-step, step) increments reflected into [lo, hi]."""
    start = rng.uniform(lo, hi)
    steps = rng.uniform(-step, step, n)
    out = np.empty(n)
    v = start
    for i in range(n):
        v += steps[i]
        if v > hi:
            v = 2 * hi - v
        elif v < lo:
            v = 2 * lo - v
        out[i] = v
    return out


def generate_synthetic(config: SyntheticConfig) -> Trace:
    """Generate a trace whose power law depends on the workload regime.

    compute: power is linear in CPU utilization and frequency tracks
    utilization; shared memory is drawn independently of power.
    noncompute: power follows ``noncompute_curve`` of normalized frequency,
    utilization sits in a high band unrelated to power, cache-miss ratio is
    high, and shared memory tracks power almost exactly.
    """
    n = config.duration_samples
    prof = config.profile
    rng = np.random.default_rng(config.seed)

    util_walk = bounded_walk(rng, n)
    freq_walk = bounded_walk(rng, n) / 100.0
    unif = rng.uniform(0.0, 1.0, (n, 6))
    gauss = rng.normal(0.0, 1.0, (n, 4))
    noise = rng.normal(0.0, 1.0, n) * config.noise_sigma_watts
    if config.container_noise > 0:
        jitter = rng.lognormal(0.0, config.container_noise, (n, 3))
    else:
        jitter = np.ones((n, 3))

    if config.regime is Regime.MIXED:
        is_compute = (np.arange(n) // config.mix_period) % 2 == 0
    else:
        is_compute = np.full(n, config.regime is Regime.COMPUTE)

    span = prof.dynamic_range
    # compute regime
    u_c = util_walk
    x_c = u_c / 100.0
    p_c = prof.idle_power_watts + span * x_c
    # noncompute regime: utilization stays high while power follows frequency
    u_n = 40.0 + 0.55 * util_walk
    x_n = freq_walk
    p_n = prof.idle_power_watts + span * noncompute_curve(x_n)

    util = np.where(is_compute, u_c, u_n)
    x = np.where(is_compute, x_c, x_n)
    true_power = np.where(is_compute, p_c, p_n)
    power = np.maximum(true_power + noise, 1e-3)
    sf_true = (true_power - prof.idle_power_watts) / span

    freq = FREQ_MIN_MHZ + (FREQ_MAX_MHZ - FREQ_MIN_MHZ) * x
    user = np.where(is_compute, 0.92, 0.70) * util
    interrupts = np.where(is_compute, 2000.0 + 60.0 * util, 3500.0 + 15.0 * util)
    interrupts = np.maximum(interrupts + 25.0 * gauss[:, 0], 0.0) * jitter[:, 0]
    softirq = np.where(is_compute, 300.0 + 8.0 * util, 900.0 + 400.0 * x)
    softirq = np.maximum(softirq + 10.0 * gauss[:, 1], 0.0) * jitter[:, 1]
    procs = np.where(is_compute, 150 + util // 4, 170 + x * 20).astype(int)
    cache_miss = np.where(is_compute, 0.02 + 0.03 * unif[:, 0], 0.35 + 0.25 * x + 0.05 * unif[:, 0])
    cache_miss = np.clip(cache_miss * jitter[:, 2], 0.0, 1.0)
    vmem = np.where(is_compute, 18.0 + 4.0 * unif[:, 1], 35.0 + 40.0 * x + 2.0 * unif[:, 1])
    syscalls = np.where(is_compute, 8000.0 + 30.0 * util, 15000.0 + 4000.0 * x)
    syscalls = np.maximum(syscalls + 50.0 * gauss[:, 2], 0.0)
    ipc = np.where(is_compute, 2.2, 0.4)
    instructions = util / 100.0 * freq * 1e6 * N_CORES * ipc * (1.0 + 0.01 * unif[:, 2])
    shm = np.where(
        is_compute,
        SHM_BASE_BYTES + SHM_SPAN_BYTES * unif[:, 3],
        SHM_BASE_BYTES + SHM_SPAN_BYTES * (sf_true + 2e-4 * gauss[:, 3]),
    )
    shm = np.maximum(shm, 0.0)
    rapl = np.where(
        is_compute,
        20.0 + 0.85 * (true_power - prof.idle_power_watts) + 2.0 * unif[:, 4],
        20.0 + 0.30 * (true_power - prof.idle_power_watts) + 12.0 * util / 100.0 + 4.0 * unif[:, 5],
    )
    tags = np.where(is_compute, Regime.COMPUTE.value, Regime.NONCOMPUTE.value)

    dt = config.sample_interval_s
    samples = [
        StatSample(
            timestamp=i * dt,
            cpu_freq_mhz=float(freq[i]),
            user_time_pct=float(user[i]),
            cpu_util_pct=float(util[i]),
            interrupts_per_s=float(interrupts[i]),
            soft_interrupts_per_s=float(softirq[i]),
            process_count=int(procs[i]),
            cache_miss_ratio=float(cache_miss[i]),
            virtual_mem_pct=float(vmem[i]),
            syscalls_per_s=float(syscalls[i]),
            instructions_per_s=float(instructions[i]),
            shared_mem_bytes=float(shm[i]),
            measured_power_watts=float(power[i]),
            rapl_watts=float(rapl[i]),
            workload_tag=str(tags[i]),
        )
        for i in range(n)
    ]
    return Trace(prof.server_id, dt, samples)


# ---------------------------------------------------------------------------
# Live sampling (Linux)
# ---------------------------------------------------------------------------

METER_ENV = "HYDRA_METER_FILE"


def _read(path):
    try:
        with open(path, encoding="ascii", errors="replace") as fh:
            return fh.read()
    except OSError as exc:
        raise CounterReadError(path, exc.strerror or str(exc)) from None


@dataclass
class _CpuCounters:
    stamp: float
    user: int
    total: int
    idle: int
    intr: int
    softirq: int


def _read_proc_stat() -> _CpuCounters:
    text = _read("/proc/stat")
    cpu = intr = softirq = None
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "cpu":
            cpu = [int(v) for v in parts[1:]]
        elif parts[0] == "intr":
            intr = int(parts[1])
        elif parts[0] == "softirq":
            softirq = int(parts[1])
    if cpu is None or len(cpu) < 4:
        raise CounterReadError("/proc/stat cpu")
    if intr is None:
        raise CounterReadError("/proc/stat intr")
    if softirq is None:
        raise CounterReadError("/proc/stat softirq")
    # user nice system idle iowait irq softirq steal (guest time is already in user)
    total = sum(cpu[:8])
    idle = cpu[3] + (cpu[4] if len(cpu) > 4 else 0)
    return _CpuCounters(time.monotonic(), cpu[0] + cpu[1], total, idle, intr, softirq)


def _read_cpu_freq_mhz() -> float:
    freqs = []
    base = "/sys/devices/system/cpu"
    try:
        cpus = [d for d in os.listdir(base) if d.startswith("cpu") and d[3:].isdigit()]
    except OSError:
        cpus = []
    for d in cpus:
        path = os.path.join(base, d, "cpufreq", "scaling_cur_freq")
        if os.path.exists(path):
            try:
                freqs.append(int(_read(path).strip()) / 1000.0)
            except (ValueError, CounterReadError):
                pass
    if freqs:
        return float(np.mean(freqs))
    try:
        info = _read("/proc/cpuinfo")
    except CounterReadError:
        raise CounterReadError("cpu_freq_mhz", "no cpufreq nodes and no /proc/cpuinfo") from None
    mhz = [float(line.split(":")[1]) for line in info.splitlines() if line.startswith("cpu MHz")]
    if not mhz:
        raise CounterReadError("cpu_freq_mhz", "no cpufreq nodes and no 'cpu MHz' in /proc/cpuinfo")
    return float(np.mean(mhz))


def _read_meminfo() -> dict:
    out = {}
    for line in _read("/proc/meminfo").splitlines():
        key, _, rest = line.partition(":")
        parts = rest.split()
        if parts:
            out[key] = int(parts[0]) * (1024 if len(parts) > 1 and parts[1] == "kB" else 1)
    return out


def _read_meter(path) -> Optional[float]:
    text = _read(path).strip().splitlines()
    if not text:
        raise CounterReadError(METER_ENV, f"{path} is empty")
    try:
        _, watts = text[-1].split()
        watts = float(watts)
    except ValueError:
        raise CounterReadError(METER_ENV, f"malformed meter line {text[-1]!r}") from None
    return watts if watts > 0 and math.isfinite(watts) else None


class LiveSampler:
    """Reads OS counters and turns consecutive readings into rates.

    Cache-miss ratio, instruction and syscall rates need hardware or tracing
    counters that procfs does not expose; they are reported as 0.  Single
    caller only.
    """

    def __init__(self, min_interval_s: float = 0.1):
        if not sys.platform.startswith("linux"):
            raise UnsupportedPlatformError(f"live sampling is only implemented for Linux, not {sys.platform}")
        self.min_interval_s = min_interval_s
        self._origin = time.monotonic()
        self._prev = _read_proc_stat()
        self._last_ts = None

    def sample(self) -> StatSample:
        wait = self._prev.stamp + self.min_interval_s - time.monotonic()
        if wait > 0:
            time.sleep(wait)
        cur = _read_proc_stat()
        dt = cur.stamp - self._prev.stamp
        d_total = max(cur.total - self._prev.total, 1)
        d_idle = cur.idle - self._prev.idle
        d_user = cur.user - self._prev.user
        util = min(max(100.0 * (1.0 - d_idle / d_total), 0.0), 100.0)
        user = min(max(100.0 * d_user / d_total, 0.0), 100.0)
        mem = _read_meminfo()
        try:
            total_mem = mem["MemTotal"]
            avail = mem.get("MemAvailable", mem.get("MemFree"))
            shmem = mem["Shmem"]
        except KeyError as exc:
            raise CounterReadError(f"/proc/meminfo {exc.args[0]}") from None
        try:
            n_procs = sum(1 for d in os.listdir("/proc") if d.isdigit())
        except OSError as exc:
            raise CounterReadError("process_count", str(exc)) from None
        power = None
        meter = os.environ.get(METER_ENV)
        if meter:
            power = _read_meter(meter)
        ts = cur.stamp - self._origin
        if self._last_ts is not None and ts <= self._last_ts:
            ts = self._last_ts + 1e-6
        self._last_ts = ts
        sample = StatSample(
            timestamp=ts,
            cpu_freq_mhz=_read_cpu_freq_mhz(),
            user_time_pct=user,
            cpu_util_pct=util,
            interrupts_per_s=max(cur.intr - self._prev.intr, 0) / dt,
            soft_interrupts_per_s=max(cur.softirq - self._prev.softirq, 0) / dt,
            process_count=n_procs,
            cache_miss_ratio=0.0,
            virtual_mem_pct=min(max(100.0 * (total_mem - avail) / total_mem, 0.0), 100.0),
            syscalls_per_s=0.0,
            instructions_per_s=0.0,
            shared_mem_bytes=float(shmem),
            measured_power_watts=power,
        )
        self._prev = cur
        return sample


_default_sampler: Optional[LiveSampler] = None


def live_sample() -> StatSample:
    """One sample from a process-wide sampler; timestamps count from its first use."""
    global _default_sampler
    if _default_sampler is None:
        _default_sampler = LiveSampler()
    return _default_sampler.sample()
