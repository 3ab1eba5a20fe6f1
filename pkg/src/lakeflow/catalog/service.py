"""In-process replica catalog backed by an append-only JSON-lines journal.

Every mutating call is validated, turned into one journal record, appended,
and only then applied to memory. Startup replays the journal through the
same apply path, so derived state (rule OK/STUCK) is recomputed rather than
trusted from disk.
"""

from __future__ import annotations

import fnmatch
import json
import logging
import os
import threading
import uuid
from pathlib import Path
from typing import Iterable, Optional, Union

from lakeflow.checksums import ChecksumSet
from lakeflow.catalog.models import (
    DID,
    PRESENT_STATES,
    RSE,
    DIDKind,
    DuplicateDID,
    DuplicateReplica,
    DuplicateRSE,
    DuplicateRun,
    InvalidCopies,
    InvalidRequest,
    MissingSourceFile,
    Replica,
    ReplicaState,
    ReplicationRule,
    RuleState,
    RunManifest,
    SizeMismatch,
    UnknownDID,
    UnknownReplica,
    UnknownRSE,
    UnknownRun,
    check_scope,
    now_ms,
    parse_did,
)

log = logging.getLogger(__name__)

DIDRef = Union[DID, str, tuple]


def did_key(did: DIDRef) -> tuple[str, str]:
    if isinstance(did, DID):
        return did.key
    if isinstance(did, str):
        return parse_did(did)
    scope, name = did
    return str(scope), str(name)


class Journal:
    """Append-only JSON-lines file; one record per mutating operation."""

    def __init__(self, path: "str | Path", fsync: bool = False):
        self.path = Path(path)
        self.fsync = fsync
        self.path.parent.mkdir(parents=True, exist_ok=True)
        torn = self.path.exists() and self.path.stat().st_size > 0 and not self._ends_with_newline()
        self._fh = open(self.path, "a", encoding="utf-8")
        if torn:
            self._fh.write("\n")

    def _ends_with_newline(self) -> bool:
        with open(self.path, "rb") as fh:
            fh.seek(-1, os.SEEK_END)
            return fh.read(1) == b"\n"

    def records(self) -> Iterable[dict]:
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    yield json.loads(line)
                except json.JSONDecodeError:
                    # a torn final line from a crash mid-append
                    log.warning("skipping unreadable journal line %s:%d", self.path, lineno)

    def append(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        self._fh.close()


class Catalog:
    """Replica catalog: DIDs, RSEs, replicas, replication rules and run manifests.

    Mutations are serialized by one lock; reads take the same lock only long
    enough to copy what they return, so callers always see a consistent
    snapshot. Pass ``journal_path=None`` for a purely in-memory catalog.
    """

    def __init__(self, journal_path: "str | Path | None" = None, fsync: bool = False):
        self._lock = threading.RLock()
        self._rses: dict[str, RSE] = {}
        self._dids: dict[tuple, DID] = {}
        self._replicas: dict[tuple, Replica] = {}
        self._rules: dict[str, ReplicationRule] = {}
        self._runs: dict[str, RunManifest] = {}
        self.journal = None
        if journal_path is not None:
            self.journal = Journal(journal_path, fsync=fsync)
            for record in self.journal.records():
                self._apply(record)

    def close(self) -> None:
        if self.journal:
            self.journal.close()

    def ping(self) -> bool:
        return True

    # -- journal plumbing ---------------------------------------------------
    def _commit(self, op: str, data: dict):
        record = {"op": op, "ts": now_ms(), "data": data}
        if self.journal:
            self.journal.append(record)
        return self._apply(record)

    def _apply(self, record: dict):
        data = record["data"]
        op = record["op"]
        if op == "create_rse":
            rse = RSE.from_dict(data)
            self._rses[rse.name] = rse
            return rse
        if op == "register_did":
            did = DID.from_dict(data)
            self._dids[did.key] = did
            return did
        if op == "attach":
            key = parse_did(data["dataset"])
            ds = self._dids[key]
            children = ds.children + tuple(parse_did(c) for c in data["children"])
            self._dids[key] = DID(ds.scope, ds.name, DIDKind.DATASET, children=children)
            return self._dids[key]
        if op == "add_replica":
            replica = Replica.from_dict(data)
            self._replicas[(replica.scope, replica.name, replica.rse)] = replica
            self._reevaluate(replica.scope, replica.name)
            return replica
        if op == "add_rule":
            scope, name = parse_did(data["did"])
            rule = ReplicationRule(data["id"], scope, name, data["rseExpression"],
                                   int(data["copies"]), self._rule_state(scope, name, data["rseExpression"], int(data["copies"])))
            self._rules[rule.id] = rule
            return rule
        if op == "register_run":
            manifest = RunManifest.from_dict(data)
            self._runs[manifest.run_id] = manifest
            return manifest
        raise ValueError(f"unknown journal op {op!r}")

    def _rule_state(self, scope: str, name: str, rse: str, copies: int) -> RuleState:
        present = sum(
            1 for (s, n, r), rep in self._replicas.items()
            if s == scope and n == name and r == rse and rep.state in PRESENT_STATES
        )
        return RuleState.OK if present >= copies else RuleState.STUCK

    def _reevaluate(self, scope: str, name: str) -> None:
        for rid, rule in list(self._rules.items()):
            if rule.scope == scope and rule.name == name:
                state = self._rule_state(scope, name, rule.rse_expression, rule.copies)
                if state is not rule.state:
                    self._rules[rid] = ReplicationRule(rule.id, scope, name, rule.rse_expression,
                                                       rule.copies, state)

    # -- RSEs ---------------------------------------------------------------
    def create_rse(self, rse: "RSE | dict") -> str:
        if isinstance(rse, dict):
            rse = RSE.from_dict(rse)
        with self._lock:
            if rse.name in self._rses:
                raise DuplicateRSE(rse.name)
            self._commit("create_rse", rse.to_dict())
        return rse.name

    def get_rse(self, name: str) -> RSE:
        with self._lock:
            try:
                return self._rses[name]
            except KeyError:
                raise UnknownRSE(name) from None

    def list_rses(self) -> list[RSE]:
        with self._lock:
            return sorted(self._rses.values(), key=lambda r: r.name)

    # -- DIDs ---------------------------------------------------------------
    def register_file_did(self, scope: str, name: str, bytes: int, checksums: ChecksumSet) -> DID:
        check_scope(scope)
        if not name or "/" in name:
            raise InvalidRequest(f"invalid DID name {name!r}")
        if isinstance(bytes, bool) or int(bytes) != bytes or bytes < 0:
            raise InvalidRequest(f"bytes must be a non-negative integer, got {bytes!r}")
        if isinstance(checksums, dict):
            checksums = ChecksumSet.from_dict(checksums)
        if checksums.adler32 is None or checksums.md5 is None:
            raise InvalidRequest("file DIDs require adler32 and md5")
        did = DID(scope, name, DIDKind.FILE, int(bytes), checksums)
        with self._lock:
            if did.key in self._dids:
                raise DuplicateDID(str(did))
            return self._commit("register_did", did.to_dict())

    def register_dataset(self, scope: str, name: str) -> DID:
        check_scope(scope)
        did = DID(scope, name, DIDKind.DATASET)
        with self._lock:
            if did.key in self._dids:
                raise DuplicateDID(str(did))
            return self._commit("register_did", did.to_dict())

    def attach(self, dataset: DIDRef, children: Iterable[DIDRef]) -> DID:
        key = did_key(dataset)
        kids = [did_key(c) for c in children]
        with self._lock:
            ds = self._dids.get(key)
            if ds is None or ds.kind is not DIDKind.DATASET:
                raise UnknownDID(f"{key[0]}:{key[1]} is not a dataset")
            for kid in kids:
                if kid not in self._dids:
                    raise UnknownDID(f"{kid[0]}:{kid[1]}")
            return self._commit("attach", {"dataset": f"{key[0]}:{key[1]}",
                                           "children": [f"{s}:{n}" for s, n in kids]})

    def get_did(self, did: DIDRef) -> DID:
        key = did_key(did)
        with self._lock:
            try:
                return self._dids[key]
            except KeyError:
                raise UnknownDID(f"{key[0]}:{key[1]}") from None

    def has_did(self, did: DIDRef) -> bool:
        with self._lock:
            return did_key(did) in self._dids

    # -- replicas -----------------------------------------------------------
    def add_replica(self, did: DIDRef, rse: str, pfn: str, zero_copy: bool = False) -> Replica:
        """Record a physical copy of ``did`` on ``rse``.

        With ``zero_copy`` the file at ``pfn`` must already exist with the DID's
        size; it is only stat'ed, never opened for writing or moved.
        """
        scope, name = did_key(did)
        pfn = str(pfn)
        with self._lock:
            d = self._dids.get((scope, name))
            if d is None:
                raise UnknownDID(f"{scope}:{name}")
            if rse not in self._rses:
                raise UnknownRSE(rse)
            if (scope, name, rse) in self._replicas:
                raise DuplicateReplica(f"{scope}:{name}@{rse}")
            if zero_copy:
                try:
                    st = os.stat(pfn)
                except FileNotFoundError:
                    raise MissingSourceFile(pfn) from None
                if not os.path.isfile(pfn) or not os.access(pfn, os.R_OK):
                    raise MissingSourceFile(f"{pfn} is not a readable file")
                if st.st_size != d.bytes:
                    raise SizeMismatch(f"{pfn}: {st.st_size} bytes on disk, DID says {d.bytes}")
            state = ReplicaState.REGISTERED_ZERO_COPY if zero_copy else ReplicaState.AVAILABLE
            replica = Replica(scope, name, rse, pfn, state, now_ms())
            return self._commit("add_replica", replica.to_dict())

    def get_replica(self, did: DIDRef, rse: str) -> Replica:
        scope, name = did_key(did)
        with self._lock:
            try:
                return self._replicas[(scope, name, rse)]
            except KeyError:
                raise UnknownReplica(f"{scope}:{name}@{rse}") from None

    def list_replicas(self, scope: Optional[str] = None, name: Optional[str] = None,
                      rse: Optional[str] = None) -> list[Replica]:
        """Replicas filtered by exact scope, name glob and RSE, ordered by (scope, name, rse)."""
        with self._lock:
            items = list(self._replicas.items())
        out = [
            rep for (s, n, r), rep in items
            if (scope is None or s == scope)
            and (name is None or fnmatch.fnmatchcase(n, name))
            and (rse is None or r == rse)
        ]
        return sorted(out, key=lambda rep: (rep.scope, rep.name, rep.rse))

    # -- rules --------------------------------------------------------------
    def add_rule(self, did: DIDRef, rse_expression: str, copies: int = 1) -> ReplicationRule:
        scope, name = did_key(did)
        if isinstance(copies, bool) or int(copies) != copies or copies < 1:
            raise InvalidCopies(f"copies must be >= 1, got {copies!r}")
        with self._lock:
            if (scope, name) not in self._dids:
                raise UnknownDID(f"{scope}:{name}")
            if rse_expression not in self._rses:
                raise UnknownRSE(rse_expression)
            return self._commit("add_rule", {"id": uuid.uuid4().hex, "did": f"{scope}:{name}",
                                             "rseExpression": rse_expression, "copies": int(copies)})

    def list_rules(self, scope: Optional[str] = None, name: Optional[str] = None) -> list[ReplicationRule]:
        with self._lock:
            rules = list(self._rules.values())
        return sorted(
            (r for r in rules if (scope is None or r.scope == scope) and (name is None or r.name == name)),
            key=lambda r: (r.scope, r.name, r.rse_expression, r.id),
        )

    # -- runs ---------------------------------------------------------------
    def register_run(self, manifest: "RunManifest | dict") -> RunManifest:
        if isinstance(manifest, dict):
            manifest = RunManifest.from_dict(manifest)
        with self._lock:
            if manifest.run_id in self._runs:
                raise DuplicateRun(manifest.run_id)
            return self._commit("register_run", manifest.to_dict())

    def segment_complete(self, run_id: str) -> tuple[bool, set[int]]:
        """Whether every stream of the run has at least one member with a present replica."""
        with self._lock:
            manifest = self._runs.get(run_id)
            if manifest is None:
                raise UnknownRun(run_id)
            present = {(r.scope, r.name) for r in self._replicas.values() if r.state in PRESENT_STATES}
        missing = {
            i for i in range(manifest.stream_count)
            if not any(m in present for m in manifest.members.get(i, ()))
        }
        return not missing, missing

    # -- introspection ------------------------------------------------------
    def snapshot(self) -> dict:
        """Full state as plain data; used to assert idempotence and replay fidelity."""
        with self._lock:
            return {
                "rses": [r.to_dict() for r in sorted(self._rses.values(), key=lambda r: r.name)],
                "dids": [d.to_dict() for _, d in sorted(self._dids.items())],
                "replicas": [r.to_dict() for _, r in sorted(self._replicas.items())],
                "rules": [r.to_dict() for r in sorted(self._rules.values(), key=lambda r: r.id)],
                "runs": [m.to_dict() for _, m in sorted(self._runs.items())],
            }
