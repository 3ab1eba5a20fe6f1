"""Streaming checksum engines and checksum-set bundles.

Four digests are supported: Adler-32 and MD5 (the legacy pair), a 64-bit
fast hash (xxh64) and a 256-bit strong hash (SHA-256). Which of them a
``ChecksumSet`` must carry is fixed by its schema.
"""

from __future__ import annotations

import hashlib
import time
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Iterable, Optional

import xxhash

CHUNK_SIZE = 1024 * 1024

HEX_WIDTH = {"adler32": 8, "md5": 32, "fast": 16, "strong": 64}
ALGORITHMS = tuple(HEX_WIDTH)
_HEXDIGITS = set("0123456789abcdef")


class ChecksumError(Exception):
    """Base class for checksum failures."""


class StreamReadError(ChecksumError):
    pass


class MissingFile(ChecksumError):
    pass


class ChecksumMismatch(ChecksumError):
    pass


class SchemaViolation(ChecksumError, ValueError):
    pass


class ChecksumSchema(str, Enum):
    LEGACY = "LEGACY"
    TRANSITIONAL = "TRANSITIONAL"
    MODERN = "MODERN"

    @classmethod
    def parse(cls, value: "str | ChecksumSchema") -> "ChecksumSchema":
        if isinstance(value, cls):
            return value
        return cls(str(value).upper())


REQUIRED = {
    ChecksumSchema.LEGACY: ("adler32", "md5"),
    ChecksumSchema.TRANSITIONAL: ("adler32", "md5", "fast", "strong"),
    ChecksumSchema.MODERN: ("fast", "strong"),
}


class Adler32:
    """Incremental Adler-32 with a hashlib-like interface."""

    name = "adler32"

    def __init__(self, data: bytes = b"", value: int = 1):
        self.value = value
        if data:
            self.update(data)

    def update(self, data) -> None:
        self.value = zlib.adler32(data, self.value)

    def copy(self) -> "Adler32":
        return Adler32(value=self.value)

    def hexdigest(self) -> str:
        return "%08x" % (self.value & 0xFFFFFFFF)


def new_engine(algorithm: str):
    """Return a fresh streaming engine for ``algorithm``."""
    if algorithm == "adler32":
        return Adler32()
    if algorithm == "md5":
        return hashlib.md5()
    if algorithm == "fast":
        return xxhash.xxh64()
    if algorithm == "strong":
        return hashlib.sha256()
    raise ValueError(f"unknown checksum algorithm {algorithm!r}")


def digest_bytes(algorithm: str, data: bytes) -> str:
    engine = new_engine(algorithm)
    engine.update(data)
    return engine.hexdigest()


@dataclass(frozen=True)
class ChecksumSet:
    """A bundle of digests for one file, validated against its schema."""

    schema: ChecksumSchema = ChecksumSchema.LEGACY
    adler32: Optional[str] = None
    md5: Optional[str] = None
    fast: Optional[str] = None
    strong: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "schema", ChecksumSchema.parse(self.schema))
        for alg in ALGORITHMS:
            value = getattr(self, alg)
            if value is None:
                continue
            if len(value) != HEX_WIDTH[alg] or not set(value) <= _HEXDIGITS:
                raise SchemaViolation(
                    f"{alg} must be {HEX_WIDTH[alg]} lowercase hex digits, got {value!r}"
                )
        missing = [alg for alg in REQUIRED[self.schema] if getattr(self, alg) is None]
        if missing:
            raise SchemaViolation(f"{self.schema.value} set is missing {', '.join(missing)}")
        if self.schema is ChecksumSchema.LEGACY and (self.fast or self.strong):
            raise SchemaViolation("LEGACY set must not carry fast/strong digests")

    def present(self) -> dict[str, str]:
        return {alg: getattr(self, alg) for alg in ALGORITHMS if getattr(self, alg) is not None}

    def to_dict(self) -> dict:
        out = {"schema": self.schema.value}
        out.update(self.present())
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ChecksumSet":
        return cls(
            schema=data.get("schema", "LEGACY"),
            **{alg: data.get(alg) for alg in ALGORITHMS},
        )


@dataclass(frozen=True)
class ChecksumTiming:
    algorithm: str
    bytes: int
    wall_seconds: float

    @property
    def throughput_bytes_per_sec(self) -> float:
        return self.bytes / self.wall_seconds

    def line(self) -> str:
        mbps = self.throughput_bytes_per_sec / 1e6
        return f"{self.algorithm} {self.bytes} {self.wall_seconds:.6f} {mbps:.2f}"


@dataclass
class VerifyReport:
    results: dict[str, bool] = field(default_factory=dict)
    computed: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return bool(self.results) and all(self.results.values())

    @property
    def failed(self) -> list[str]:
        return [alg for alg, good in self.results.items() if not good]


def _stream_digest(engine, stream: BinaryIO, chunk_size: int) -> str:
    try:
        while True:
            chunk = stream.read(chunk_size)
            if not chunk:
                break
            engine.update(chunk)
    except OSError as exc:
        raise StreamReadError(str(exc)) from exc
    return engine.hexdigest()


def adler32_stream(stream: BinaryIO, chunk_size: int = CHUNK_SIZE) -> str:
    """Adler-32 of everything readable from ``stream``, as 8 lowercase hex digits."""
    return _stream_digest(Adler32(), stream, chunk_size)


def md5_stream(stream: BinaryIO, chunk_size: int = CHUNK_SIZE) -> str:
    return _stream_digest(hashlib.md5(), stream, chunk_size)


def digest_file(
    path: "str | Path", algorithms: Iterable[str], chunk_size: int = CHUNK_SIZE
) -> tuple[dict[str, str], list[ChecksumTiming]]:
    """Compute several digests in one read of ``path``.

    Every algorithm is fed from the same buffer, so the file is read once no
    matter how many digests are requested. Timings are accumulated per
    algorithm around its ``update`` calls only; I/O is not attributed.
    """
    path = Path(path)
    algorithms = list(dict.fromkeys(algorithms))
    engines = {alg: new_engine(alg) for alg in algorithms}
    spent = dict.fromkeys(algorithms, 0.0)
    total = 0
    buf = bytearray(chunk_size)
    view = memoryview(buf)
    try:
        fh = open(path, "rb", buffering=0)
    except FileNotFoundError as exc:
        raise MissingFile(str(path)) from exc
    except OSError as exc:
        raise StreamReadError(str(exc)) from exc
    with fh:
        try:
            while True:
                n = fh.readinto(view)
                if not n:
                    break
                total += n
                piece = view[:n]
                for alg, engine in engines.items():
                    t0 = time.perf_counter()
                    engine.update(piece)
                    spent[alg] += time.perf_counter() - t0
        except OSError as exc:
            raise StreamReadError(str(exc)) from exc
    digests = {alg: engine.hexdigest() for alg, engine in engines.items()}
    timings = [ChecksumTiming(alg, total, max(spent[alg], 1e-9)) for alg in algorithms]
    return digests, timings


def compute_set(
    path: "str | Path", schema: "str | ChecksumSchema" = ChecksumSchema.LEGACY
) -> tuple[ChecksumSet, list[ChecksumTiming]]:
    schema = ChecksumSchema.parse(schema)
    digests, timings = digest_file(path, REQUIRED[schema])
    return ChecksumSet(schema=schema, **digests), timings


CATALOG_REQUIRED = ("adler32", "md5")


def catalog_set(
    path: "str | Path", schema: "str | ChecksumSchema" = ChecksumSchema.LEGACY
) -> tuple[ChecksumSet, list[ChecksumTiming]]:
    """Like :func:`compute_set` but always includes adler32 and md5.

    The catalog keeps the legacy pair on every file DID, so a MODERN set
    headed for registration carries all four digests.
    """
    schema = ChecksumSchema.parse(schema)
    digests, timings = digest_file(path, [*REQUIRED[schema], *CATALOG_REQUIRED])
    return ChecksumSet(schema=schema, **digests), timings


def verify_set(path: "str | Path", expected: ChecksumSet) -> VerifyReport:
    """Recompute only the digests present in ``expected`` and compare each."""
    wanted = expected.present()
    if not wanted:
        raise ValueError("expected set carries no checksums")
    digests, _ = digest_file(path, wanted)
    return VerifyReport(
        results={alg: digests[alg] == value for alg, value in wanted.items()},
        computed=digests,
    )


def migrate_schema(
    current: ChecksumSet, path: "str | Path", target: "str | ChecksumSchema"
) -> ChecksumSet:
    """Move ``current`` to ``target`` without ever dropping a digest.

    Digests that must be added are computed in the same pass that re-verifies
    the existing ones; if any existing digest no longer matches the file the
    migration is refused with ``ChecksumMismatch``. A target whose digests are
    already all present is a relabel and touches no file.
    """
    target = ChecksumSchema.parse(target)
    have = current.present()
    if target is ChecksumSchema.LEGACY and (current.fast or current.strong):
        raise SchemaViolation("cannot migrate to LEGACY without dropping fast/strong digests")
    missing = [alg for alg in REQUIRED[target] if alg not in have]
    if not missing:
        return replace(current, schema=target)
    digests, _ = digest_file(path, [*have, *missing])
    bad = [alg for alg, value in have.items() if digests[alg] != value]
    if bad:
        raise ChecksumMismatch(f"{path}: existing {', '.join(bad)} no longer match")
    return replace(current, schema=target, **{alg: digests[alg] for alg in missing})
