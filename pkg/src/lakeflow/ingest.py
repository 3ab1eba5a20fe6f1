"""Polling ingestion of landed files into the catalog as zero-copy replicas.

A file becomes eligible once two consecutive polls see the same size and
mtime. Each eligible file is checksummed, registered as a DID, added as a
zero-copy replica on the target RSE and covered by a replication rule.
Re-ingesting something already registered is reported as a duplicate, not
a failure, so an interrupted pass can simply be run again.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

from lakeflow.catalog.models import (
    CatalogError,
    CatalogUnreachable,
    ConnectionRefused,
    DuplicateDID,
    DuplicateReplica,
    did_name_from_relpath,
)
from lakeflow.checksums import ChecksumError, ChecksumSchema, ChecksumTiming, catalog_set
from lakeflow.replay import PARTIAL_SUFFIX

log = logging.getLogger(__name__)

STATE_FILE_NAME = ".lakeflow-ingest.jsonl"


class WatchDirUnreadable(Exception):
    pass


class LoopMode(str, Enum):
    ONCE = "ONCE"
    PERIODIC = "PERIODIC"


class Phase(str, Enum):
    DETECTED = "DETECTED"
    STABLE = "STABLE"
    CHECKSUMMED = "CHECKSUMMED"
    REGISTERED = "REGISTERED"
    RULED = "RULED"
    DONE = "DONE"
    FAILED = "FAILED"


PHASE_ORDER = list(Phase)


@dataclass
class WatchConfig:
    watch_dir: Path
    target_rse: str
    scope: str
    poll_interval: float = 5.0
    forced_delay: float = 60.0
    schema: ChecksumSchema = ChecksumSchema.LEGACY
    loop_mode: LoopMode = LoopMode.ONCE
    state_file: Optional[Path] = None
    persist_state: bool = True
    copies: int = 1

    def __post_init__(self):
        self.watch_dir = Path(self.watch_dir)
        self.schema = ChecksumSchema.parse(self.schema)
        self.loop_mode = LoopMode(str(getattr(self.loop_mode, "value", self.loop_mode)).upper())
        if not self.poll_interval > 0:
            raise ValueError("poll_interval must be positive")
        if self.forced_delay < 0:
            raise ValueError("forced_delay must be non-negative")
        if self.persist_state and self.state_file is None:
            self.state_file = self.watch_dir / STATE_FILE_NAME
        if self.state_file is not None:
            self.state_file = Path(self.state_file)

    def did_name(self, pfn) -> str:
        return did_name_from_relpath(Path(pfn).relative_to(self.watch_dir).as_posix())


@dataclass
class IngestRecord:
    pfn: str
    did: str
    phase: Phase = Phase.STABLE
    timings: dict = field(default_factory=dict)
    error: Optional[str] = None
    detail: Optional[str] = None
    annotations: list = field(default_factory=list)
    bytes: int = 0
    checksum_timings: list = field(default_factory=list)
    finished_at: Optional[float] = None

    def advance(self, phase: Phase, seconds: Optional[float] = None) -> None:
        if PHASE_ORDER.index(phase) <= PHASE_ORDER.index(self.phase):
            raise ValueError(f"phase cannot go from {self.phase.value} to {phase.value}")
        self.phase = phase
        if seconds is not None:
            self.timings[phase.value] = seconds

    def fail(self, exc: Exception, name: Optional[str] = None) -> None:
        self.phase = Phase.FAILED
        self.error = name or type(exc).__name__
        self.detail = str(exc)

    @property
    def total_seconds(self) -> float:
        """Checksum + registration + rule time; the forced delay is never part of it."""
        return sum(self.timings.values())

    @property
    def duplicate(self) -> bool:
        return self.phase is Phase.DONE and "did:duplicate" in self.annotations \
            and "replica:duplicate" in self.annotations

    def to_dict(self) -> dict:
        return {
            "pfn": self.pfn, "did": self.did, "phase": self.phase.value, "bytes": self.bytes,
            "timings": self.timings, "totalSeconds": self.total_seconds, "error": self.error,
            "detail": self.detail, "annotations": self.annotations,
            "checksumTimings": [
                {"algorithm": t.algorithm, "bytes": t.bytes, "wallSeconds": t.wall_seconds}
                for t in self.checksum_timings
            ],
        }


def predict_registration_seconds(record: IngestRecord, file_bytes: int) -> float:
    """Extrapolate a measured record to a file of ``file_bytes``.

    Checksum time scales with size at the measured per-algorithm throughput
    (the algorithms run back to back on each buffer); catalog round trips
    are taken as size independent.
    """
    checksum = sum(file_bytes / t.throughput_bytes_per_sec for t in record.checksum_timings)
    fixed = record.timings.get(Phase.REGISTERED.value, 0.0) + record.timings.get(Phase.RULED.value, 0.0)
    return checksum + fixed


# -- polling ---------------------------------------------------------------

def _eligible_name(name: str) -> bool:
    return not name.startswith(".") and not name.endswith(PARTIAL_SUFFIX)


def scan_files(watch_dir: Path) -> dict:
    """Map relative path -> (size, mtime_ns) for every visible regular file."""
    watch_dir = Path(watch_dir)
    if not watch_dir.is_dir() or not os.access(watch_dir, os.R_OK | os.X_OK):
        raise WatchDirUnreadable(str(watch_dir))
    found = {}

    def onerror(exc):
        raise WatchDirUnreadable(str(exc))

    for root, dirs, files in os.walk(watch_dir, onerror=onerror):
        dirs[:] = sorted(d for d in dirs if not d.startswith("."))
        for name in files:
            if not _eligible_name(name):
                continue
            path = Path(root) / name
            try:
                st = path.stat()
            except FileNotFoundError:
                continue
            found[path.relative_to(watch_dir).as_posix()] = (st.st_size, st.st_mtime_ns)
    return found


@dataclass
class PollState:
    previous: dict = field(default_factory=dict)
    first_seen: dict = field(default_factory=dict)


def poll_scan(config: WatchConfig, known, state: PollState) -> list:
    """One poll: files not in ``known`` whose size and mtime match the previous poll.

    ``known`` holds relative paths. ``state`` carries observations between
    polls and must be reused for consecutive calls.
    """
    current = scan_files(config.watch_dir)
    now = time.time()
    for rel in current:
        state.first_seen.setdefault(rel, now)
    stable = sorted(
        rel for rel, obs in current.items()
        if rel not in known and state.previous.get(rel) == obs
    )
    state.previous = current
    return [config.watch_dir / rel for rel in stable]


# -- ingestion -------------------------------------------------------------

def ingest_file(pfn, config: WatchConfig, catalog) -> IngestRecord:
    """Checksum, register, replicate (zero-copy) and rule one stable file."""
    pfn = Path(pfn)
    name = config.did_name(pfn)
    did = f"{config.scope}:{name}"
    record = IngestRecord(str(pfn), did)
    try:
        record.bytes = pfn.stat().st_size
        t0 = time.perf_counter()
        if catalog.has_did(did):
            record.annotations += ["did:duplicate", "checksum:skipped"]
            checksums = None
        else:
            checksums, record.checksum_timings = catalog_set(pfn, config.schema)
        record.advance(Phase.CHECKSUMMED, time.perf_counter() - t0)

        t0 = time.perf_counter()
        if checksums is not None:
            try:
                catalog.register_file_did(config.scope, name, record.bytes, checksums)
            except DuplicateDID:
                record.annotations.append("did:duplicate")
        try:
            catalog.add_replica(did, config.target_rse, str(pfn), zero_copy=True)
        except DuplicateReplica:
            record.annotations.append("replica:duplicate")
        record.advance(Phase.REGISTERED, time.perf_counter() - t0)

        t0 = time.perf_counter()
        rules = [r for r in catalog.list_rules(config.scope, name) if r.rse_expression == config.target_rse]
        if rules:
            record.annotations.append("rule:existing")
        else:
            catalog.add_rule(did, config.target_rse, config.copies)
        record.advance(Phase.RULED, time.perf_counter() - t0)
        record.advance(Phase.DONE)
    except ConnectionRefused as exc:
        record.fail(exc, "ConnectionRefused")
    except CatalogUnreachable as exc:
        record.fail(exc, "CatalogUnreachable")
    except (ChecksumError, OSError) as exc:
        record.fail(exc, "ChecksumError")
    except CatalogError as exc:
        record.fail(exc)
    record.finished_at = time.time()
    return record


# -- sidecar state ---------------------------------------------------------

def load_known(config: WatchConfig) -> set:
    """Relative paths recorded DONE whose size and mtime are unchanged since."""
    known = set()
    if not config.state_file or not config.state_file.exists():
        return known
    current = scan_files(config.watch_dir)
    with open(config.state_file, encoding="utf-8") as fh:
        for line in fh:
            try:
                entry = json.loads(line)
            except json.JSONDecodeError:
                continue
            rel = entry.get("path")
            if current.get(rel) == (entry.get("size"), entry.get("mtimeNs")):
                known.add(rel)
    return known


def _remember(config: WatchConfig, rel: str) -> None:
    if not config.state_file:
        return
    st = (config.watch_dir / rel).stat()
    with open(config.state_file, "a", encoding="utf-8") as fh:
        fh.write(json.dumps({"path": rel, "size": st.st_size, "mtimeNs": st.st_mtime_ns}) + "\n")


@dataclass
class IngestSummary:
    records: list = field(default_factory=list)
    elapsed: float = 0.0
    delay_seconds: float = 0.0

    @property
    def ingested(self) -> int:
        return sum(1 for r in self.records if r.phase is Phase.DONE and not r.duplicate)

    @property
    def duplicates(self) -> int:
        return sum(1 for r in self.records if r.duplicate)

    @property
    def failed(self) -> int:
        return sum(1 for r in self.records if r.phase is Phase.FAILED)

    def line(self) -> str:
        return (f"ingested={self.ingested} duplicates={self.duplicates} "
                f"failed={self.failed} elapsed={self.elapsed:.3f}")


def run_daemon(config: WatchConfig, catalog, stop_event: Optional[threading.Event] = None,
               on_record: Optional[Callable[[IngestRecord], None]] = None) -> IngestSummary:
    """Poll, ingest and repeat.

    ONCE primes the poll state, waits one interval and ingests whatever is
    stable at the second poll, then returns. PERIODIC keeps polling until
    ``stop_event`` is set. ``forced_delay`` is slept between one file's
    completion and the start of the next; it is accounted in
    ``delay_seconds``, never in the per-file timings.
    """
    stop = stop_event or threading.Event()
    summary = IngestSummary()
    started = time.monotonic()
    known = load_known(config) if config.persist_state else set()
    state = PollState()
    poll_scan(config, known, state)
    processed_any = False
    while not stop.is_set():
        if stop.wait(config.poll_interval):
            break
        for pfn in poll_scan(config, known, state):
            if stop.is_set():
                break
            if processed_any and config.forced_delay:
                t0 = time.monotonic()
                stopped = stop.wait(config.forced_delay)
                summary.delay_seconds += time.monotonic() - t0
                if stopped:
                    break
            record = ingest_file(pfn, config, catalog)
            processed_any = True
            summary.records.append(record)
            if record.phase is Phase.DONE:
                rel = pfn.relative_to(config.watch_dir).as_posix()
                known.add(rel)
                if config.persist_state:
                    _remember(config, rel)
            else:
                log.warning("ingest of %s failed: %s %s", pfn, record.error, record.detail)
            if on_record:
                on_record(record)
        if config.loop_mode is LoopMode.ONCE:
            break
    summary.elapsed = time.monotonic() - started
    return summary


@dataclass
class ReconcileReport:
    disk_only: list = field(default_factory=list)
    catalog_only: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return not self.disk_only and not self.catalog_only


def reconcile(watch_dir, catalog, config: WatchConfig) -> ReconcileReport:
    """Compare landed files with the catalog's replicas on the target RSE. Read only."""
    files = scan_files(Path(watch_dir))
    replicas = {r.name: r for r in catalog.list_replicas(scope=config.scope, rse=config.target_rse)}
    report = ReconcileReport()
    for rel in sorted(files):
        if did_name_from_relpath(rel) not in replicas:
            report.disk_only.append(rel)
    for name, rep in sorted(replicas.items()):
        if not os.path.exists(rep.pfn):
            report.catalog_only.append(rep.did)
    return report


__all__ = [
    "ChecksumTiming", "IngestRecord", "IngestSummary", "LoopMode", "Phase", "PollState",
    "ReconcileReport", "WatchConfig", "WatchDirUnreadable", "ingest_file", "load_known",
    "poll_scan", "predict_registration_seconds", "reconcile", "run_daemon", "scan_files",
]
