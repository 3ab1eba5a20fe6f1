"""Replica catalog: DIDs, RSEs, replicas, replication rules and run manifests."""

from lakeflow.catalog.models import (
    DID,
    ERRORS,
    PRESENT_STATES,
    RSE,
    CatalogError,
    CatalogUnreachable,
    ConnectionRefused,
    DIDKind,
    DuplicateDID,
    DuplicateReplica,
    DuplicateRSE,
    DuplicateRun,
    InvalidCopies,
    InvalidRequest,
    MissingSourceFile,
    ProtocolEntry,
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
    did_name_from_relpath,
    now_ms,
    parse_did,
)
from lakeflow.catalog.service import Catalog, Journal, did_key
from lakeflow.catalog.http import CatalogClient, CatalogServer, EmulatedProxy, proxy_from_env


def open_catalog(target, proxy_env: str = "HTTPS_PROXY"):
    """A catalog handle from a URL (``http://...``) or a journal path."""
    target = str(target)
    if target.startswith(("http://", "https://")):
        return CatalogClient(target, proxy_env=proxy_env)
    return Catalog(target)
