"""Demo workflows and the repeated-trial harness.

The processing step is a keyed deterministic transform so that every pushed
output can be re-derived from its input and checked byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
import time
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from lakeflow.catalog.models import RSE, CatalogError, ProtocolEntry, parse_did
from lakeflow.checksums import ChecksumError, ChecksumMismatch
from lakeflow.transfer import (
    AuthToken,
    NegotiationPolicy,
    TransferError,
    download,
    plugins_from_flags,
    refresh_token,
    upload,
)

log = logging.getLogger(__name__)

BLOCK = 64 * 1024
SIM_KINDS = ("parameters", "geometry", "transport")


# -- processing ------------------------------------------------------------

@dataclass(frozen=True)
class ProcessParams:
    transform_key: int = 0
    expansion_factor: Fraction = Fraction(1)

    def __post_init__(self):
        f = Fraction(self.expansion_factor)
        if f <= 0:
            raise ValueError("expansion_factor must be positive")
        object.__setattr__(self, "expansion_factor", f)

    def output_length(self, n: int) -> int:
        return math.ceil(n * self.expansion_factor)


def process_payload(data: bytes, params: ProcessParams) -> bytes:
    """Deterministic stand-in for reconstruction.

    A keyed blake2b is chained over 64 KiB blocks of the input; the final
    state seeds a shake_256 keystream that is XORed onto the input tiled to
    the output length. Any input byte therefore influences every output byte.
    """
    key = params.transform_key.to_bytes(16, "little", signed=True)
    state = hashlib.blake2b(len(data).to_bytes(8, "little"), key=key).digest()
    view = memoryview(data)
    for off in range(0, len(data), BLOCK):
        state = hashlib.blake2b(state + view[off:off + BLOCK], key=key).digest()
    n_out = params.output_length(len(data))
    stream = np.frombuffer(hashlib.shake_256(state).digest(n_out), dtype=np.uint8)
    src = np.frombuffer(data, dtype=np.uint8)
    tiled = np.resize(src, n_out) if len(src) else np.zeros(n_out, dtype=np.uint8)
    return (tiled ^ stream).tobytes()


# -- specs and context -----------------------------------------------------

class DemoKind(str, Enum):
    ROUNDTRIP = "ROUNDTRIP"
    PRODUCE_UPLOAD = "PRODUCE_UPLOAD"
    PULL_PROCESS = "PULL_PROCESS"
    PULL_PROCESS_PUSH = "PULL_PROCESS_PUSH"


class Result(str, Enum):
    SUCCESS = "SUCCESS"
    FAILURE_1 = "FAILURE_1"
    FAILURE_2 = "FAILURE_2"


@dataclass
class DemoSpec:
    kind: DemoKind
    output_scope: str
    rse: str
    policy: NegotiationPolicy = field(default_factory=lambda: NegotiationPolicy("WEIGHTED_RANDOM"))
    input_did: Optional[str] = None
    process_params: ProcessParams = field(default_factory=ProcessParams)
    download_policy: NegotiationPolicy = field(default_factory=lambda: NegotiationPolicy("PRIORITY_WITH_FALLBACK"))
    idle_seconds: float = 0.0

    def __post_init__(self):
        self.kind = DemoKind(self.kind)
        if self.kind in (DemoKind.PULL_PROCESS, DemoKind.PULL_PROCESS_PUSH) and not self.input_did:
            raise ValueError(f"{self.kind.value} needs an input DID")


@dataclass
class DemoContext:
    catalog: object
    plugins: dict
    token: AuthToken
    workdir: Path
    auto_refresh: bool = False
    schema: str = "LEGACY"
    sleep: Callable[[float], None] = time.sleep

    def __post_init__(self):
        self.workdir = Path(self.workdir)

    def authorized(self) -> AuthToken:
        """The current token, refreshed first if it lapsed and refresh is enabled."""
        if self.auto_refresh and self.token.expired():
            self.token = refresh_token(self.token)
        return self.token


# -- demos -----------------------------------------------------------------

def _md5(path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RoundtripResult:
    upload: object
    download: object
    md5_before: str
    md5_after: Optional[str]

    @property
    def ok(self) -> bool:
        return self.upload.ok and self.download is not None and self.download.ok \
            and self.md5_before == self.md5_after


def demo_roundtrip(spec: DemoSpec, ctx: DemoContext, local_path, name: Optional[str] = None) -> RoundtripResult:
    """Upload ``local_path``, pull it back to a fresh path and compare md5.

    A second call for the same DID raises DuplicateDID from the upload and
    leaves the catalog as it was.
    """
    local_path = Path(local_path)
    did = f"{spec.output_scope}:{name or local_path.name}"
    before = _md5(local_path)
    up = upload(ctx.catalog, local_path, did, spec.rse, spec.policy, ctx.plugins, ctx.authorized(), ctx.schema)
    if not up.ok:
        return RoundtripResult(up, None, before, None)
    dest = ctx.workdir / "roundtrip" / f"{local_path.name}.pulled"
    if dest.exists():
        dest.unlink()
    down = download(ctx.catalog, did, spec.rse, dest, spec.download_policy, ctx.plugins, ctx.authorized())
    after = _md5(dest) if down.ok else None
    if down.ok and after != before:
        raise ChecksumMismatch(f"roundtrip md5 {before} != {after}")
    return RoundtripResult(up, down, before, after)


def sim_payload(kind: str, tick: int, size: int = 4096, key: int = 0) -> bytes:
    return hashlib.shake_256(f"{kind}:{tick}:{key}".encode()).digest(size)


@dataclass
class TickOutcome:
    index: int
    dids: list
    outcomes: list
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None and all(o.ok for o in self.outcomes)


def demo_produce_upload(spec: DemoSpec, ctx: DemoContext, period: float, iterations: int,
                        tag: str = "sim", payload_bytes: int = 4096) -> list:
    """Every ``period`` seconds write and upload a parameters/geometry/transport triple.

    Ticks never overlap; a slow tick pushes the next one back. A failing
    tick is logged and the schedule carries on.
    """
    ticks = []
    next_start = time.monotonic()
    for i in range(iterations):
        wait = next_start - time.monotonic()
        if i and wait > 0:
            ctx.sleep(wait)
        next_start = time.monotonic() + period
        outdir = ctx.workdir / "produce" / str(i)
        outdir.mkdir(parents=True, exist_ok=True)
        tick = TickOutcome(i, [], [])
        try:
            for kind in SIM_KINDS:
                path = outdir / f"{tag}.{kind}.{i}"
                path.write_bytes(sim_payload(kind, i, payload_bytes, spec.process_params.transform_key))
                did = f"{spec.output_scope}:{path.name}"
                out = upload(ctx.catalog, path, did, spec.rse, spec.policy, ctx.plugins,
                             ctx.authorized(), ctx.schema)
                tick.dids.append(did)
                tick.outcomes.append(out)
                if not out.ok:
                    tick.error = out.error_class
        except (TransferError, CatalogError, ChecksumError) as exc:
            tick.error = type(exc).__name__
        if not tick.ok:
            log.warning("produce tick %d failed: %s", i, tick.error)
        ticks.append(tick)
    return ticks


@dataclass
class IterationResult:
    index: int
    result: Result
    start_time: float = 0.0
    chosen_scheme: Optional[str] = None
    durations: dict = field(default_factory=dict)
    error_class: Optional[str] = None
    raw_message: Optional[str] = None
    output_did: Optional[str] = None

    def to_dict(self) -> dict:
        return {"index": self.index, "startTime": self.start_time, "result": self.result.value,
                "chosenScheme": self.chosen_scheme, "durations": self.durations,
                "errorClass": self.error_class, "rawMessage": self.raw_message,
                "outputDid": self.output_did}

    @classmethod
    def from_dict(cls, d: dict) -> "IterationResult":
        return cls(d["index"], Result(d["result"]), d.get("startTime", 0.0), d.get("chosenScheme"),
                   d.get("durations", {}), d.get("errorClass"), d.get("rawMessage"), d.get("outputDid"))


def _pull(spec: DemoSpec, ctx: DemoContext, rec: IterationResult, dest: Path) -> Optional[bytes]:
    t0 = time.perf_counter()
    try:
        out = download(ctx.catalog, spec.input_did, spec.rse, dest, spec.download_policy,
                       ctx.plugins, ctx.authorized())
    except (TransferError, CatalogError, ChecksumError) as exc:
        rec.result, rec.error_class, rec.raw_message = Result.FAILURE_1, type(exc).__name__, str(exc)
        return None
    finally:
        rec.durations["download"] = time.perf_counter() - t0
    if not out.ok:
        rec.result, rec.error_class, rec.raw_message = Result.FAILURE_1, out.error_class, out.raw_message
        return None
    return dest.read_bytes()


def demo_pull_process(spec: DemoSpec, ctx: DemoContext, index: int = 0) -> IterationResult:
    """Pull the input and process it locally; no push."""
    rec = IterationResult(index, Result.SUCCESS, time.time())
    scratch = ctx.workdir / "pull" / str(index)
    data = _pull(spec, ctx, rec, scratch / "input")
    if data is not None:
        t0 = time.perf_counter()
        (scratch / "output").write_bytes(process_payload(data, spec.process_params))
        rec.durations["process"] = time.perf_counter() - t0
    return rec


def demo_pull_process_push(spec: DemoSpec, ctx: DemoContext, index: int = 0,
                           keep_scratch: bool = False) -> IterationResult:
    """Download, process, upload. Errors become FAILURE_1 or FAILURE_2, never exceptions."""
    rec = IterationResult(index, Result.SUCCESS, time.time())
    scratch = ctx.workdir / "pull" / str(index)
    try:
        data = _pull(spec, ctx, rec, scratch / "input")
        if data is None:
            return rec
        t0 = time.perf_counter()
        out_path = scratch / "output"
        out_path.write_bytes(process_payload(data, spec.process_params))
        rec.durations["process"] = time.perf_counter() - t0
        if spec.idle_seconds:
            ctx.sleep(spec.idle_seconds)
        _, in_name = parse_did(spec.input_did)
        rec.output_did = f"{spec.output_scope}:{in_name}.rec.{index}"
        t0 = time.perf_counter()
        try:
            out = upload(ctx.catalog, out_path, rec.output_did, spec.rse, spec.policy, ctx.plugins,
                         ctx.authorized(), ctx.schema)
        except (TransferError, CatalogError, ChecksumError) as exc:
            rec.result, rec.error_class, rec.raw_message = Result.FAILURE_2, type(exc).__name__, str(exc)
            return rec
        finally:
            rec.durations["upload"] = time.perf_counter() - t0
        rec.chosen_scheme = out.chosen_scheme
        if not out.ok:
            rec.result, rec.error_class, rec.raw_message = Result.FAILURE_2, out.error_class, out.raw_message
        return rec
    finally:
        if not keep_scratch:
            shutil.rmtree(scratch, ignore_errors=True)


# -- trials ----------------------------------------------------------------

@dataclass
class TrialLog:
    iterations: list = field(default_factory=list)

    @property
    def totals(self) -> dict:
        counts = {"success": 0, "failure1": 0, "failure2": 0}
        key = {Result.SUCCESS: "success", Result.FAILURE_1: "failure1", Result.FAILURE_2: "failure2"}
        for it in self.iterations:
            counts[key[it.result]] += 1
        return counts

    def lines(self) -> list:
        out = [json.dumps(it.to_dict(), sort_keys=True) for it in self.iterations]
        out.append(json.dumps({"totals": self.totals}, sort_keys=True))
        return out

    def persist(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.lines()) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "TrialLog":
        its = []
        for line in Path(path).read_text().splitlines():
            d = json.loads(line)
            if "totals" not in d:
                its.append(IterationResult.from_dict(d))
        return cls(its)


def run_trials(spec: DemoSpec, ctx: DemoContext, n: int, sleep_seconds: float = 0.0,
               rng_seed: Optional[int] = None, log_path=None,
               on_iteration: Optional[Callable[[IterationResult], None]] = None) -> TrialLog:
    """Run ``n`` pull-process-push iterations with a sleep between them.

    The upload policy is rebuilt from ``rng_seed`` so the same seed gives
    the same sequence of schemes and results.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    seed = spec.policy.rng_seed if rng_seed is None else rng_seed
    spec.policy = NegotiationPolicy(spec.policy.mode, seed, spec.policy.weights)
    trial_log = TrialLog()
    for i in range(n):
        if i and sleep_seconds:
            ctx.sleep(sleep_seconds)
        rec = demo_pull_process_push(spec, ctx, i)
        trial_log.iterations.append(rec)
        if on_iteration:
            on_iteration(rec)
    if log_path is not None:
        trial_log.persist(log_path)
    return trial_log


@dataclass
class Summary:
    text: str
    data: dict


def summarize(trial_log: TrialLog) -> Summary:
    n = len(trial_log.iterations)
    totals = trial_log.totals

    def pct(k):
        return 100.0 * totals[k] / n if n else 0.0

    head = " ".join(f"{k} {totals[k]}/{n} ({pct(k):.1f}%)" for k in ("success", "failure2", "failure1"))
    per_scheme = {}
    for it in trial_log.iterations:
        if it.chosen_scheme is None:
            continue
        entry = per_scheme.setdefault(it.chosen_scheme, {"success": 0, "failure2": 0})
        entry["success" if it.result is Result.SUCCESS else "failure2"] += 1
    stages = {}
    for stage in ("download", "process", "upload"):
        vals = [it.durations[stage] for it in trial_log.iterations if stage in it.durations]
        if vals:
            p50, p90, p99 = np.percentile(vals, [50, 90, 99])
            stages[stage] = {"n": len(vals), "p50": float(p50), "p90": float(p90),
                             "p99": float(p99), "max": float(max(vals))}
    lines = [head]
    for scheme in sorted(per_scheme):
        e = per_scheme[scheme]
        lines.append(f"  upload via {scheme:<5} success {e['success']:>5} failure2 {e['failure2']:>5}")
    for stage, s in stages.items():
        lines.append(f"  {stage:<8} p50 {s['p50']:.4f}s p90 {s['p90']:.4f}s p99 {s['p99']:.4f}s max {s['max']:.4f}s")
    data = {"n": n, "totals": totals, "rates": {k: pct(k) / 100 for k in totals},
            "perScheme": per_scheme, "durations": stages}
    return Summary("\n".join(lines), data)


# -- trial bootstrap -------------------------------------------------------

@dataclass
class TrialSetup:
    spec: DemoSpec
    ctx: DemoContext
    input_path: Path


def setup_trial(workdir, catalog=None, davs_available: bool = False, weights=None,
                upload_mode="WEIGHTED_RANDOM", download_mode="PRIORITY_WITH_FALLBACK", seed: int = 42,
                input_bytes: int = 64 * 1024, token_ttl: float = 12 * 3600.0, auto_refresh: bool = False,
                idle_seconds: float = 0.0, rse_name: str = "LAKE-A", scope: str = "mcbm") -> TrialSetup:
    """Create an RSE with davs/root = 3:1, seed one input DID and return a ready spec.

    The seed upload uses working plugins; the returned context then has the
    davs plugin switched off unless ``davs_available``.
    """
    from lakeflow.catalog import Catalog

    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    if catalog is None:
        catalog = Catalog()
    weights = weights or {"davs": 3, "root": 1}
    base = workdir / "lake"
    catalog.create_rse(RSE(rse_name, str(base), (
        ProtocolEntry("davs", 1, weights.get("davs", 0)),
        ProtocolEntry("root", 2, weights.get("root", 0)),
    )))
    seed_file = workdir / "seed" / "run1588_f00.raw"
    seed_file.parent.mkdir(parents=True, exist_ok=True)
    seed_file.write_bytes(hashlib.shake_256(b"run1588 seed input").digest(input_bytes))
    token = AuthToken.issue("trial", token_ttl)
    input_did = f"{scope}:{seed_file.name}"
    upload(catalog, seed_file, input_did, rse_name, NegotiationPolicy("PRIORITY_WITH_FALLBACK"),
           plugins_from_flags([]), token).raise_for_status()
    plugins = plugins_from_flags([] if davs_available else ["davs=off"])
    spec = DemoSpec(
        DemoKind.PULL_PROCESS_PUSH, scope, rse_name,
        policy=NegotiationPolicy(upload_mode, seed, weights),
        input_did=input_did,
        process_params=ProcessParams(1588, Fraction(1)),
        download_policy=NegotiationPolicy(download_mode, seed),
        idle_seconds=idle_seconds,
    )
    ctx = DemoContext(catalog, plugins, token, workdir, auto_refresh=auto_refresh)
    return TrialSetup(spec, ctx, seed_file)
