"""Rate-limited parallel replay of detector output into a landing directory.

Each stream copies its files in order through a token bucket, one worker
thread per stream. Files land as ``<landing>/<stream>/<name>``; while being
written they live under a hidden ``.<name>.part`` name and are renamed into
place only when complete.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from lakeflow.catalog.models import RunManifest, did_name_from_relpath

log = logging.getLogger(__name__)

MB = 1_000_000
TICK_SECONDS = 0.1
CHUNK_BYTES = 4 * 1024 * 1024
SLOW_CHUNK_BYTES = 64 * 1024
SLOW_RATE = 10 * MB
DESK_SCALE = 0.1
NOMINAL_STREAM_RATE = 200 * MB
PARTIAL_SUFFIX = ".part"


class ReplayError(Exception):
    pass


class MissingSourceFile(ReplayError):
    pass


class NonPositiveRate(ReplayError, ValueError):
    pass


class WriteError(ReplayError):
    pass


class TokenBucket:
    """Token bucket refilled in discrete ticks, holding at most one tick's worth.

    The bucket starts empty, so after ``t`` seconds at most
    ``rate * t`` bytes have been granted (rounded up to whole ticks).
    """

    def __init__(self, rate: float, tick: float = TICK_SECONDS,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if not rate > 0:
            raise NonPositiveRate(f"rate must be positive, got {rate!r}")
        self.rate = float(rate)
        self.tick = tick
        self.quantum = self.rate * tick
        self.max_grant = max(1, int(self.quantum))
        self.capacity = max(self.quantum, float(self.max_grant))
        self._clock = clock
        self._sleep = sleep
        self._origin = clock()
        self._ticks = 0
        self._tokens = 0.0

    def _refill(self) -> None:
        # the epsilon keeps a wake-up landing exactly on a boundary from re-sleeping
        ticks = int((self._clock() - self._origin) / self.tick + 1e-9)
        if ticks > self._ticks:
            self._tokens = min(self.capacity, self._tokens + (ticks - self._ticks) * self.quantum)
            self._ticks = ticks

    def acquire(self, n: int) -> None:
        """Block until ``n`` bytes (at most ``max_grant``) may be written."""
        if n > self.max_grant:
            raise ValueError(f"cannot grant {n} bytes at once; max is {self.max_grant}")
        while True:
            self._refill()
            if self._tokens >= n:
                self._tokens -= n
                return
            self._wait_next_tick()

    def acquire_upto(self, n: int) -> int:
        """Block until at least one byte may be written; grant up to ``n`` of what is available.

        Unlike :meth:`acquire` this never waits while holding tokens, so a
        writer whose slices do not line up with the quantum loses nothing
        to the capacity clamp.
        """
        if n < 1:
            raise ValueError("n must be positive")
        while True:
            self._refill()
            avail = int(self._tokens)
            if avail >= 1:
                granted = min(n, avail)
                self._tokens -= granted
                return granted
            self._wait_next_tick()

    def _wait_next_tick(self) -> None:
        wake = self._origin + (self._ticks + 1) * self.tick
        self._sleep(max(0.0, wake - self._clock()))


@dataclass
class StreamSpec:
    index: int
    files: list  # [(Path, bytes)]
    rate_cap: float
    fault_rate: Optional[float] = None
    fault_file: Optional[int] = None

    def __post_init__(self):
        if not self.rate_cap > 0:
            raise NonPositiveRate(f"stream {self.index}: rate cap must be positive, got {self.rate_cap!r}")
        if (self.fault_rate is None) != (self.fault_file is None):
            raise ValueError("fault_rate and fault_file go together")
        if self.fault_rate is not None:
            if not self.fault_rate > 0:
                raise NonPositiveRate(f"stream {self.index}: fault rate must be positive")
            if not 0 <= self.fault_file < len(self.files):
                raise ValueError(f"stream {self.index} has no file #{self.fault_file}")
        self.files = [(Path(p), int(b)) for p, b in self.files]

    def rate_for(self, file_index: int) -> float:
        if self.fault_file == file_index:
            return self.fault_rate
        return self.rate_cap

    @property
    def total_bytes(self) -> int:
        return sum(b for _, b in self.files)

    def expected_seconds(self) -> float:
        return sum(b / self.rate_for(i) for i, (_, b) in enumerate(self.files))


@dataclass
class ReplayPlan:
    streams: list
    landing_dir: Path
    aggregate_target: float = 0.0

    def __post_init__(self):
        self.landing_dir = Path(self.landing_dir)
        if [s.index for s in self.streams] != list(range(len(self.streams))):
            raise ValueError("stream indices must be contiguous from 0")


@dataclass(frozen=True)
class FaultSpec:
    stream: int
    file: int
    rate: float

    @classmethod
    def parse(cls, text: str) -> "FaultSpec":
        """Parse ``stream=<i>,file=<j>,rate=<bytes/s>``."""
        fields = dict(part.split("=", 1) for part in text.split(",") if part)
        return cls(int(fields["stream"]), int(fields["file"]), float(fields["rate"]))


def plan_replay(source_layout: Sequence[Sequence], rates, landing_dir, scale: float = 1.0,
                fault: Optional[FaultSpec] = None) -> ReplayPlan:
    """Build a plan with one stream per source group.

    ``rates`` is one rate for every stream or one per stream; ``scale``
    multiplies every rate, including the fault rate.
    """
    groups = [list(g) for g in source_layout]
    if isinstance(rates, (int, float)):
        rates = [rates] * len(groups)
    rates = list(rates)
    if len(rates) != len(groups):
        raise ValueError(f"{len(rates)} rates for {len(groups)} streams")
    if not scale > 0:
        raise NonPositiveRate(f"scale must be positive, got {scale!r}")
    streams = []
    for i, (files, rate) in enumerate(zip(groups, rates)):
        if not rate > 0:
            raise NonPositiveRate(f"stream {i}: rate must be positive, got {rate!r}")
        entries = []
        for f in files:
            f = Path(f)
            if not f.is_file():
                raise MissingSourceFile(str(f))
            entries.append((f, f.stat().st_size))
        fault_rate = fault_file = None
        if fault is not None and fault.stream == i:
            fault_rate, fault_file = fault.rate * scale, fault.file
        streams.append(StreamSpec(i, entries, rate * scale, fault_rate, fault_file))
    if fault is not None and not 0 <= fault.stream < len(streams):
        raise ValueError(f"fault names stream {fault.stream}, plan has {len(streams)}")
    return ReplayPlan(streams, Path(landing_dir), sum(s.rate_cap for s in streams))


def load_plan_file(path, landing_dir, scale: float = 1.0, fault: Optional[FaultSpec] = None) -> ReplayPlan:
    """Read a JSON plan: ``{"rate": r, "streams": [{"files": [...], "rate": r}, ...]}``.

    Relative file paths are resolved against the plan file's directory.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    default_rate = doc.get("rate", NOMINAL_STREAM_RATE)
    layout, rates = [], []
    for stream in doc["streams"]:
        layout.append([p if Path(p).is_absolute() else path.parent / p for p in stream["files"]])
        rates.append(stream.get("rate", default_rate))
    if fault is None and doc.get("fault"):
        f = doc["fault"]
        fault = FaultSpec(int(f["stream"]), int(f["file"]), float(f["rate"]))
    return plan_replay(layout, rates, landing_dir, scale=scale, fault=fault)


def landed_relpath(stream_index: int, name: str) -> str:
    return f"{stream_index}/{name}"


def _copy_limited(src: Path, dst: Path, bucket: TokenBucket, on_progress=None) -> int:
    tmp = dst.with_name("." + dst.name + PARTIAL_SUFFIX)
    chunk_size = SLOW_CHUNK_BYTES if bucket.rate < SLOW_RATE else CHUNK_BYTES
    written = 0
    try:
        with open(src, "rb") as fin, open(tmp, "wb") as fout:
            while True:
                chunk = fin.read(chunk_size)
                if not chunk:
                    break
                view = memoryview(chunk)
                start = 0
                while start < len(view):
                    n = bucket.acquire_upto(len(view) - start)
                    fout.write(view[start:start + n])
                    start += n
                    written += n
                    if on_progress:
                        on_progress(time.monotonic(), n)
            fout.flush()
        os.replace(tmp, dst)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise WriteError(f"{src} -> {dst}: {exc}") from exc
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return written


def run_stream(spec: StreamSpec, landing_dir, on_progress=None) -> dict:
    """Copy one stream's files in order under its rate cap; return its report entry.

    Raises ``WriteError`` on I/O failure after removing the partial file.
    """
    out_dir = Path(landing_dir) / str(spec.index)
    out_dir.mkdir(parents=True, exist_ok=True)
    start_wall, start = time.time(), time.monotonic()
    written = 0
    files_done = []
    bucket = None
    for i, (src, _) in enumerate(spec.files):
        rate = spec.rate_for(i)
        if bucket is None or bucket.rate != rate:
            bucket = TokenBucket(rate)
        t0 = time.monotonic()
        written += _copy_limited(src, out_dir / src.name, bucket, on_progress)
        files_done.append({"name": src.name, "rate": rate, "seconds": time.monotonic() - t0})
    elapsed = time.monotonic() - start
    return {
        "index": spec.index,
        "bytesWritten": written,
        "startTime": start_wall,
        "endTime": start_wall + elapsed,
        "meanRate": written / elapsed if elapsed > 0 else 0.0,
        "files": files_done,
        "error": None,
    }


@dataclass
class ReplayReport:
    per_stream: list = field(default_factory=list)
    aggregate_mean_rate: float = 0.0
    last_completion_time: Optional[float] = None
    first_start_time: Optional[float] = None

    @property
    def failed(self) -> list:
        return [e for e in self.per_stream if e.get("error")]

    def slowest(self) -> Optional[dict]:
        done = [e for e in self.per_stream if e.get("endTime") is not None]
        return max(done, key=lambda e: e["endTime"]) if done else None

    def to_dict(self) -> dict:
        return {
            "perStream": self.per_stream,
            "aggregateMeanRate": self.aggregate_mean_rate,
            "lastCompletionTime": self.last_completion_time,
            "firstStartTime": self.first_start_time,
        }


def report_path_for(landing_dir) -> Path:
    landing_dir = Path(landing_dir)
    return landing_dir.parent / f"{landing_dir.name}.replay.json"


def _write_atomic(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2))
    os.replace(tmp, path)


def run_replay(plan: ReplayPlan, on_progress=None, persist: bool = True) -> ReplayReport:
    """Run every stream concurrently and collect a report.

    A failing stream is recorded with its error and the others carry on.
    ``on_progress(stream_index, monotonic_time, nbytes)`` sees every write.
    """
    plan.landing_dir.mkdir(parents=True, exist_ok=True)
    lock = threading.Lock()
    entries = []

    def worker(spec: StreamSpec):
        cb = (lambda t, n: on_progress(spec.index, t, n)) if on_progress else None
        try:
            entry = run_stream(spec, plan.landing_dir, cb)
        except ReplayError as exc:
            log.error("stream %d failed: %s", spec.index, exc)
            entry = {"index": spec.index, "bytesWritten": 0, "startTime": None, "endTime": None,
                     "meanRate": 0.0, "files": [], "error": f"{type(exc).__name__}: {exc}"}
        with lock:
            entries.append(entry)

    if plan.streams:
        with ThreadPoolExecutor(max_workers=len(plan.streams), thread_name_prefix="replay") as pool:
            list(pool.map(worker, plan.streams))
    entries.sort(key=lambda e: e["index"])
    report = ReplayReport(per_stream=entries)
    done = [e for e in entries if e["endTime"] is not None]
    if done:
        report.first_start_time = min(e["startTime"] for e in done)
        report.last_completion_time = max(e["endTime"] for e in done)
        span = report.last_completion_time - report.first_start_time
        total = sum(e["bytesWritten"] for e in entries)
        report.aggregate_mean_rate = total / span if span > 0 else 0.0
    if persist:
        _write_atomic(report_path_for(plan.landing_dir), report.to_dict())
    return report


def manifest_for_plan(plan: ReplayPlan, run_id: str, scope: str) -> RunManifest:
    """The run manifest the landed files will satisfy once ingested under ``scope``."""
    members = {
        s.index: [f"{scope}:{did_name_from_relpath(landed_relpath(s.index, p.name))}" for p, _ in s.files]
        for s in plan.streams
    }
    files_per_stream = max((len(s.files) for s in plan.streams), default=1) or 1
    return RunManifest(run_id, max(len(plan.streams), 1), files_per_stream, members)


def synthesize_run(root, streams: int, files_per_stream: int, file_bytes: int,
                   run: str = "run1588", seed: int = 0) -> list:
    """Write a fake multi-disk run: ``root/hdd<i>/<run>_f<j>.raw`` filled with random bytes.

    Returns the source layout (one list of paths per disk) for ``plan_replay``.
    """
    rng = np.random.default_rng(seed)
    root = Path(root)
    width = max(2, len(str(files_per_stream - 1)))
    layout = []
    for i in range(streams):
        disk = root / f"hdd{i}"
        disk.mkdir(parents=True, exist_ok=True)
        files = []
        for j in range(files_per_stream):
            p = disk / f"{run}_f{j:0{width}d}.raw"
            p.write_bytes(rng.bytes(file_bytes))
            files.append(p)
        layout.append(files)
    return layout


def window_max_bytes(samples: Sequence, window: float = 1.0) -> float:
    """Largest byte count written inside any ``window``-second interval.

    ``samples`` are ``(time, nbytes)`` write events in time order.
    """
    times = np.asarray([t for t, _ in samples], dtype=float)
    sizes = np.asarray([n for _, n in samples], dtype=float)
    if times.size == 0:
        return 0.0
    csum = np.concatenate([[0.0], np.cumsum(sizes)])
    ends = np.searchsorted(times, times + window, side="left")
    return float(np.max(csum[ends] - csum[np.arange(times.size)]))
