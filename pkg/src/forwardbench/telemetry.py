"""Process-level timing, memory and energy accounting.

Memory is the resident set size of this process sampled on a background
thread. Power comes from a :class:`PowerModel`: a constant nominal draw by
default, or any registered reader returning watts (RAPL adapter included).
"""
from __future__ import annotations

import csv
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

MIB = 2**20


@dataclass(frozen=True)
class ResourceSample:
    t_s: float
    rss_bytes: int | None
    power_w: float


@dataclass
class PowerModel:
    mode: str = "constant"  # "constant" | "sampled"
    nominal_w: float = 30.0
    carbon_intensity: float = 400.0  # g CO2e / kWh
    reader: Callable[[], float | None] | None = None

    def __post_init__(self):
        if self.nominal_w < 0 or self.carbon_intensity < 0:
            raise ValueError("power and carbon intensity must be >= 0")
        if self.mode not in ("constant", "sampled"):
            raise ValueError(f"unknown power mode {self.mode!r}")

    def read(self) -> float:
        if self.mode == "sampled" and self.reader is not None:
            w = self.reader()
            if w is not None:
                return float(w)
        return self.nominal_w


class RaplPowerReader:
    """Package power from the Linux powercap energy counter, or None if unreadable."""

    def __init__(self, path="/sys/class/powercap/intel-rapl:0/energy_uj"):
        self.path = Path(path)
        self._last = None

    @property
    def available(self) -> bool:
        try:
            int(self.path.read_text())
            return True
        except (OSError, ValueError):
            return False

    def __call__(self):
        try:
            uj = int(self.path.read_text())
        except (OSError, ValueError):
            return None
        now = time.monotonic()
        last, self._last = self._last, (now, uj)
        if last is None or now <= last[0] or uj < last[1]:
            return None
        return (uj - last[1]) / 1e6 / (now - last[0])


def _rss_probe():
    try:
        import psutil

        proc = psutil.Process()
        return lambda: int(proc.memory_info().rss)
    except Exception:  # noqa: BLE001
        pass
    try:
        import os

        page = os.sysconf("SC_PAGE_SIZE")
        statm = Path("/proc/self/statm")
        statm.read_text()
        return lambda: int(statm.read_text().split()[1]) * page
    except Exception:  # noqa: BLE001
        return None


class SamplerSession:
    """Background sampler bracketing one run."""

    def __init__(self, period_ms: float = 100.0, power: PowerModel | None = None, probe=None):
        if period_ms < 10:
            raise ValueError("sampling period must be >= 10 ms")
        self.period = period_ms / 1000.0
        self.power = power or PowerModel()
        self._probe = probe if probe is not None else _rss_probe()
        self._samples: list[ResourceSample] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._stopped = False
        self.t0 = None

    def _take(self):
        rss = None
        if self._probe is not None:
            try:
                rss = self._probe()
            except Exception:  # noqa: BLE001
                rss = None
        s = ResourceSample(time.monotonic() - self.t0, rss, self.power.read())
        with self._lock:
            if self._samples and s.t_s <= self._samples[-1].t_s:
                return
            self._samples.append(s)

    def _loop(self):
        next_t = time.monotonic()
        while not self._stop.is_set():
            self._take()
            next_t += self.period
            self._stop.wait(max(0.0, next_t - time.monotonic()))

    def start(self) -> "SamplerSession":
        if self._thread is not None:
            raise RuntimeError("session already started")
        self.t0 = time.monotonic()
        self._thread = threading.Thread(target=self._loop, name="forwardbench-sampler", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> list:
        if self._thread is None:
            raise RuntimeError("stop() called before start()")
        if not self._stopped:
            self._stop.set()
            self._thread.join()
            self._take()
            self._stopped = True
        return self.samples

    @property
    def samples(self) -> list:
        with self._lock:
            return list(self._samples)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


# -- metric arithmetic ------------------------------------------------------------

def energy_wh(samples, model: PowerModel, wall_time_s: float) -> float:
    """Constant mode: P*t. Sampled mode: trapezoid integral of the power trace."""
    if wall_time_s <= 0:
        raise ValueError("wall time must be positive")
    if model.mode == "constant" or len(samples) < 2:
        return model.nominal_w * wall_time_s / 3600.0
    joules = 0.0
    for a, b in zip(samples[:-1], samples[1:]):
        joules += 0.5 * (a.power_w + b.power_w) * (b.t_s - a.t_s)
    return joules / 3600.0


def co2e_g(energy_wh_value: float, intensity_g_per_kwh: float) -> float:
    if energy_wh_value < 0 or intensity_g_per_kwh < 0:
        raise ValueError("inputs must be >= 0")
    return energy_wh_value / 1000.0 * intensity_g_per_kwh


def peak_memory_mib(samples) -> float | None:
    mem = [s.rss_bytes for s in samples if s.rss_bytes is not None]
    if not mem:
        return None
    return max(mem) / MIB


def export_csv(samples, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "rss_bytes", "power_w"])
        for s in samples:
            w.writerow([f"{s.t_s:.6f}", "" if s.rss_bytes is None else s.rss_bytes, f"{s.power_w:.6f}"])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return [ResourceSample(float(r["t_s"]), int(r["rss_bytes"]) if r["rss_bytes"] else None, float(r["power_w"]))
                for r in csv.DictReader(fh)]


@dataclass
class Plateau:
    t_start: float
    t_end: float
    level: float  # bytes (median of the segment)
    n: int


def memory_plateaus(samples, tolerance_bytes: float, min_samples: int = 3) -> list:
    """Piecewise-constant segmentation of the RSS trace.

    A new segment starts when a sample departs from the running segment
    median by more than ``tolerance_bytes``. Segments shorter than
    ``min_samples`` (transients) are dropped and neighbouring segments at
    the same level are merged.
    """
    import statistics

    pts = [(s.t_s, s.rss_bytes) for s in samples if s.rss_bytes is not None]
    segs: list[list] = []
    for t, m in pts:
        if segs and abs(m - statistics.median(v for _, v in segs[-1])) <= tolerance_bytes:
            segs[-1].append((t, m))
        else:
            segs.append([(t, m)])
    out: list[Plateau] = []
    for seg in segs:
        if len(seg) < min_samples:
            continue
        level = statistics.median(v for _, v in seg)
        if out and abs(level - out[-1].level) <= tolerance_bytes:
            prev = out[-1]
            out[-1] = Plateau(prev.t_start, seg[-1][0], (prev.level * prev.n + level * len(seg)) / (prev.n + len(seg)),
                              prev.n + len(seg))
        else:
            out.append(Plateau(seg[0][0], seg[-1][0], level, len(seg)))
    return out


def plateau_shifts(plateaus) -> list:
    return [b.level - a.level for a, b in zip(plateaus[:-1], plateaus[1:])]


# -- run bracket -----------------------------------------------------------------

@dataclass
class RunMetrics:
    time_s: float = 0.0
    energy_wh: float = 0.0
    peak_mem_mib: float | None = None
    gflops: float = 0.0
    co2e_g: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Telemetry:
    """Brackets a training run: wall clock, sampler, phase markers."""

    period_ms: float | None = 100.0  # None: no background sampling
    power: PowerModel = field(default_factory=PowerModel)
    samples: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    _session: SamplerSession | None = None
    _t0: float | None = None
    _wall: float = 0.0

    def start(self) -> "Telemetry":
        self.samples, self.phases = [], []
        self._t0 = time.perf_counter()
        if self.period_ms:
            self._session = SamplerSession(self.period_ms, self.power).start()
        return self

    def mark(self, phase: str, **info) -> None:
        t = time.perf_counter() - self._t0 if self._t0 is not None else 0.0
        self.phases.append({"phase": phase, "t_s": round(t, 6), **info})

    def stop(self, flops_per_sample: int = 0) -> RunMetrics:
        self._wall = time.perf_counter() - self._t0
        if self._session is not None:
            self.samples = self._session.stop()
            self._session = None
        else:
            probe = _rss_probe()
            self.samples = [ResourceSample(self._wall, probe() if probe else None, self.power.read())]
        wall = max(self._wall, 1e-9)
        e = energy_wh(self.samples, self.power, wall)
        return RunMetrics(
            time_s=self._wall,
            energy_wh=e,
            peak_mem_mib=peak_memory_mib(self.samples),
            gflops=flops_per_sample / 1e9,
            co2e_g=co2e_g(e, self.power.carbon_intensity),
        )
