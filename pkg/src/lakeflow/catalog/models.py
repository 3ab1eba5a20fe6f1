"""Catalog record types and errors."""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Optional

from lakeflow.checksums import ChecksumSet

SCOPE_RE = re.compile(r"^[a-z0-9_]{1,32}$")


class CatalogError(Exception):
    """Base catalog error; ``status`` is the HTTP code it maps to."""

    status = 400

    @property
    def name(self) -> str:
        return type(self).__name__


class DuplicateRSE(CatalogError):
    status = 409


class DuplicateDID(CatalogError):
    status = 409


class DuplicateReplica(CatalogError):
    status = 409


class DuplicateRun(CatalogError):
    status = 409


class UnknownRSE(CatalogError):
    status = 404


class UnknownDID(CatalogError):
    status = 404


class UnknownReplica(CatalogError):
    status = 404


class UnknownRun(CatalogError):
    status = 404


class MissingSourceFile(CatalogError):
    status = 422


class SizeMismatch(CatalogError):
    status = 422


class InvalidCopies(CatalogError):
    status = 422


class InvalidRequest(CatalogError):
    status = 422


class CatalogUnreachable(CatalogError):
    status = 503


class ConnectionRefused(CatalogUnreachable):
    pass


ERRORS = {
    cls.__name__: cls
    for cls in (
        DuplicateRSE, DuplicateDID, DuplicateReplica, DuplicateRun, UnknownRSE, UnknownDID,
        UnknownReplica, UnknownRun, MissingSourceFile, SizeMismatch, InvalidCopies,
        InvalidRequest, CatalogUnreachable, ConnectionRefused,
    )
}


def now_ms() -> int:
    return time.time_ns() // 1_000_000


class DIDKind(str, Enum):
    FILE = "FILE"
    DATASET = "DATASET"


class ReplicaState(str, Enum):
    AVAILABLE = "AVAILABLE"
    REGISTERED_ZERO_COPY = "REGISTERED_ZERO_COPY"
    COPYING = "COPYING"
    BAD = "BAD"


PRESENT_STATES = (ReplicaState.AVAILABLE, ReplicaState.REGISTERED_ZERO_COPY)


class RuleState(str, Enum):
    OK = "OK"
    STUCK = "STUCK"


def parse_did(text: str) -> tuple[str, str]:
    """Split ``scope:name``."""
    scope, sep, name = text.partition(":")
    if not sep or not name:
        raise InvalidRequest(f"DID must look like scope:name, got {text!r}")
    check_scope(scope)
    return scope, name


def check_scope(scope: str) -> str:
    if not SCOPE_RE.match(scope):
        raise InvalidRequest(f"scope must match [a-z0-9_]{{1,32}}, got {scope!r}")
    return scope


def did_name_from_relpath(relpath: str) -> str:
    """DID name for a landed file: its relative path with '/' flattened to '_'."""
    return relpath.replace("\\", "/").strip("/").replace("/", "_")


@dataclass(frozen=True)
class DID:
    scope: str
    name: str
    kind: DIDKind = DIDKind.FILE
    bytes: Optional[int] = None
    checksums: Optional[ChecksumSet] = None
    children: tuple = ()

    def __str__(self) -> str:
        return f"{self.scope}:{self.name}"

    @property
    def key(self) -> tuple[str, str]:
        return (self.scope, self.name)

    def to_dict(self) -> dict:
        out = {"scope": self.scope, "name": self.name, "kind": self.kind.value}
        if self.kind is DIDKind.FILE:
            out["bytes"] = self.bytes
            out["checksums"] = self.checksums.to_dict()
        else:
            out["children"] = [f"{s}:{n}" for s, n in self.children]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DID":
        kind = DIDKind(data.get("kind", "FILE"))
        if kind is DIDKind.DATASET:
            children = tuple(parse_did(c) for c in data.get("children", ()))
            return cls(data["scope"], data["name"], kind, children=children)
        return cls(
            data["scope"], data["name"], kind, int(data["bytes"]),
            ChecksumSet.from_dict(data["checksums"]),
        )


@dataclass(frozen=True)
class ProtocolEntry:
    scheme: str
    priority: int
    weight: Fraction = Fraction(1)

    def __post_init__(self):
        if isinstance(self.priority, bool) or int(self.priority) != self.priority or self.priority < 1:
            raise InvalidRequest(f"priority must be a positive integer, got {self.priority!r}")
        weight = Fraction(str(self.weight)) if isinstance(self.weight, float) else Fraction(self.weight)
        if weight < 0:
            raise InvalidRequest(f"weight must be non-negative, got {self.weight!r}")
        object.__setattr__(self, "weight", weight)

    def to_dict(self) -> dict:
        w = self.weight
        return {"scheme": self.scheme, "priority": self.priority,
                "weight": int(w) if w.denominator == 1 else str(w)}

    @classmethod
    def from_dict(cls, data: dict) -> "ProtocolEntry":
        return cls(data["scheme"], int(data["priority"]), Fraction(str(data.get("weight", 1))))


@dataclass(frozen=True)
class RSE:
    name: str
    base_path: str
    protocols: tuple = ()
    available: bool = True

    def __post_init__(self):
        protocols = tuple(
            p if isinstance(p, ProtocolEntry) else ProtocolEntry.from_dict(p) for p in self.protocols
        )
        schemes = [p.scheme for p in protocols]
        if len(set(schemes)) != len(schemes):
            raise InvalidRequest(f"duplicate protocol scheme on RSE {self.name}: {schemes}")
        object.__setattr__(self, "protocols", protocols)
        object.__setattr__(self, "base_path", str(self.base_path))

    def by_priority(self) -> list[ProtocolEntry]:
        """Protocols ordered by priority; ties keep declaration order."""
        return sorted(self.protocols, key=lambda p: p.priority)

    def to_dict(self) -> dict:
        return {"name": self.name, "basePath": self.base_path, "available": self.available,
                "protocols": [p.to_dict() for p in self.protocols]}

    @classmethod
    def from_dict(cls, data: dict) -> "RSE":
        return cls(data["name"], data.get("basePath", data.get("base_path", "")),
                   tuple(data.get("protocols", ())), bool(data.get("available", True)))


@dataclass(frozen=True)
class Replica:
    scope: str
    name: str
    rse: str
    pfn: str
    state: ReplicaState
    registered_at: int

    @property
    def did(self) -> str:
        return f"{self.scope}:{self.name}"

    def to_dict(self) -> dict:
        return {"did": self.did, "rse": self.rse, "pfn": self.pfn,
                "state": self.state.value, "registeredAt": self.registered_at}

    @classmethod
    def from_dict(cls, data: dict) -> "Replica":
        scope, name = parse_did(data["did"])
        return cls(scope, name, data["rse"], data["pfn"], ReplicaState(data["state"]),
                   int(data["registeredAt"]))


@dataclass(frozen=True)
class ReplicationRule:
    id: str
    scope: str
    name: str
    rse_expression: str
    copies: int
    state: RuleState

    @property
    def did(self) -> str:
        return f"{self.scope}:{self.name}"

    def to_dict(self) -> dict:
        return {"id": self.id, "did": self.did, "rseExpression": self.rse_expression,
                "copies": self.copies, "state": self.state.value}

    @classmethod
    def from_dict(cls, data: dict) -> "ReplicationRule":
        scope, name = parse_did(data["did"])
        return cls(data["id"], scope, name, data["rseExpression"], int(data["copies"]),
                   RuleState(data["state"]))


@dataclass(frozen=True)
class RunManifest:
    """Members of one run, grouped by the stream (disk) that wrote them."""

    run_id: str
    stream_count: int
    files_per_stream: int
    members: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stream_count < 1 or self.files_per_stream < 1:
            raise InvalidRequest("streamCount and filesPerStream must be positive")
        members = {
            int(k): tuple(parse_did(m) if isinstance(m, str) else tuple(m) for m in v)
            for k, v in dict(self.members).items()
        }
        bad = [k for k in members if not 0 <= k < self.stream_count]
        if bad:
            raise InvalidRequest(f"stream indices out of range: {bad}")
        object.__setattr__(self, "members", members)

    def to_dict(self) -> dict:
        return {"runId": self.run_id, "streamCount": self.stream_count,
                "filesPerStream": self.files_per_stream,
                "members": {str(k): [f"{s}:{n}" for s, n in v] for k, v in sorted(self.members.items())}}

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        return cls(data["runId"], int(data["streamCount"]), int(data["filesPerStream"]),
                   data.get("members", {}))
