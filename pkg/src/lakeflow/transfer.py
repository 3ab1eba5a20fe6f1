"""Upload and download between local paths and RSE storage directories.

Each RSE advertises an ordered, weighted protocol stack. A policy picks
which schemes to try and a per-scheme plugin performs the copy. Plugins can
be switched off to emulate a client that cannot load a protocol library;
they then fail with the same service-unavailable text that real grid
clients print, and :func:`classify_error` recovers the actual cause.
"""

from __future__ import annotations

import json
import os
import random
import shutil
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional

from lakeflow.catalog.models import (
    RSE,
    DuplicateDID,
    MissingSourceFile,
    parse_did,
)
from lakeflow.checksums import (
    ChecksumMismatch,
    ChecksumSchema,
    catalog_set,
    verify_set,
)

SERVICE_UNAVAILABLE = "The requested service is not available at the moment"
DEFAULT_TOKEN_TTL = 12 * 3600.0
PARTIAL_SUFFIX = ".part"


class TransferError(Exception):
    pass


class NoProtocol(TransferError):
    pass


class TokenExpired(TransferError):
    pass


class ProtocolUnsupported(TransferError):
    pass


class PluginUnavailable(TransferError):
    """Raised inside a plugin; surfaces to callers only as a FAILED attempt."""


def default_failure_message(scheme: str) -> str:
    # shaped like gfal2's report when its http plugin cannot load libdavix
    return (f"Protocol not supported or path/url invalid: {scheme}://: "
            f"Result: {SERVICE_UNAVAILABLE}. Details: plugin for scheme '{scheme}' failed to initialize")


@dataclass
class ProtocolPlugin:
    scheme: str
    available: bool = True
    failure_message: Optional[str] = None
    corrupt: bool = False

    def __post_init__(self):
        if self.failure_message is None:
            self.failure_message = default_failure_message(self.scheme)

    def copy(self, src: Path, dst: Path) -> None:
        if not self.available:
            raise PluginUnavailable(self.failure_message)
        dst.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src, dst)
        if self.corrupt:
            _flip_first_byte(dst)


def _flip_first_byte(path: Path) -> None:
    with open(path, "r+b") as fh:
        b = fh.read(1)
        fh.seek(0)
        # an empty file cannot be corrupted by flipping, so grow it instead
        fh.write(bytes([b[0] ^ 0xFF]) if b else b"\0")


def load_fault_profile(path) -> dict:
    """Read ``{scheme: {"available": bool, "failureMessage": str, "corrupt": bool}}``."""
    doc = json.loads(Path(path).read_text())
    return {
        scheme: ProtocolPlugin(scheme, bool(v.get("available", True)), v.get("failureMessage"),
                               bool(v.get("corrupt", False)))
        for scheme, v in doc.items()
    }


def plugins_from_flags(flags, schemes=("davs", "root")) -> dict:
    """``["davs=off"]`` -> plugins for ``schemes`` with davs disabled."""
    plugins = {s: ProtocolPlugin(s) for s in schemes}
    for flag in flags or ():
        scheme, _, state = flag.partition("=")
        state = state.strip().lower()
        if state not in ("on", "off"):
            raise ValueError(f"plugin flag must be scheme=on|off, got {flag!r}")
        plugins[scheme.strip()] = ProtocolPlugin(scheme.strip(), state == "on")
    return plugins


# -- negotiation -----------------------------------------------------------

class Mode(str, Enum):
    PRIORITY_STRICT = "PRIORITY_STRICT"
    WEIGHTED_RANDOM = "WEIGHTED_RANDOM"
    PRIORITY_WITH_FALLBACK = "PRIORITY_WITH_FALLBACK"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        aliases = {"strict": cls.PRIORITY_STRICT, "weighted": cls.WEIGHTED_RANDOM,
                   "fallback": cls.PRIORITY_WITH_FALLBACK}
        key = str(value).strip()
        return aliases.get(key.lower()) or cls(key.upper())


class NegotiationPolicy:
    """Protocol selection rule plus its own seeded RNG.

    The RNG is consumed once per WEIGHTED_RANDOM negotiation, so a policy
    object reused across operations yields a reproducible scheme sequence.
    ``weights`` overrides the RSE's advertised weights by scheme.
    """

    def __init__(self, mode="PRIORITY_WITH_FALLBACK", rng_seed: Optional[int] = None,
                 weights: Optional[Mapping[str, float]] = None):
        self.mode = Mode.parse(mode)
        self.rng_seed = rng_seed
        self.weights = dict(weights) if weights else None
        self._rng = random.Random(rng_seed)

    def __repr__(self):
        return f"NegotiationPolicy({self.mode.value}, rng_seed={self.rng_seed})"

    def draw(self, schemes, weights) -> str:
        return self._rng.choices(schemes, weights=weights)[0]


def parse_weights(text: str) -> dict:
    """``"davs=3,root=1"`` -> ``{"davs": 3.0, "root": 1.0}``."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        scheme, _, w = part.partition("=")
        out[scheme.strip()] = float(w)
    return out


def negotiate(rse: RSE, policy: NegotiationPolicy) -> list:
    """Schemes to attempt, in order. Strict and weighted modes yield one."""
    stack = rse.by_priority()
    if not stack:
        raise NoProtocol(rse.name)
    if policy.mode is Mode.PRIORITY_STRICT:
        return [stack[0].scheme]
    if policy.mode is Mode.PRIORITY_WITH_FALLBACK:
        return [p.scheme for p in stack]
    schemes = [p.scheme for p in stack]
    if policy.weights is not None:
        weights = [float(policy.weights.get(s, 0)) for s in schemes]
    else:
        weights = [float(p.weight) for p in stack]
    if not sum(weights) > 0:
        raise NoProtocol(f"{rse.name}: every protocol has zero weight")
    return [policy.draw(schemes, weights)]


# -- tokens ----------------------------------------------------------------

@dataclass(frozen=True)
class AuthToken:
    subject: str
    issued_at: float
    ttl_seconds: float = DEFAULT_TOKEN_TTL

    def __post_init__(self):
        if self.ttl_seconds < 0:
            raise ValueError("ttl_seconds must be non-negative")

    @classmethod
    def issue(cls, subject: str, ttl_seconds: float = DEFAULT_TOKEN_TTL, now: Optional[float] = None):
        return cls(subject, time.time() if now is None else now, ttl_seconds)

    def expires_at(self) -> float:
        return self.issued_at + self.ttl_seconds

    def expired(self, now: Optional[float] = None) -> bool:
        # boundary counts as expired so a zero ttl is never usable
        return (time.time() if now is None else now) >= self.expires_at()

    def check(self, now: Optional[float] = None) -> None:
        if self.expired(now):
            raise TokenExpired(f"token for {self.subject} expired at {self.expires_at():.3f}")


def refresh_token(token: AuthToken, now: Optional[float] = None) -> AuthToken:
    return replace(token, issued_at=time.time() if now is None else now)


# -- errors ----------------------------------------------------------------

@dataclass
class Classification:
    error_class: str
    explanation: str


def classify_error(raw: Optional[str], context: Optional[Mapping] = None) -> Classification:
    """Map a raw transfer message to what actually went wrong.

    ``context`` may carry ``plugin_available`` (bool), ``scheme``,
    ``proxy`` (the configured proxy URL or None) and ``proxy_env``.
    """
    raw = raw or ""
    ctx = dict(context or {})
    scheme = ctx.get("scheme") or "the selected protocol"
    low = raw.lower()
    if SERVICE_UNAVAILABLE.lower() in low or "protocol not supported" in low:
        if ctx.get("plugin_available") is False:
            return Classification(
                "ProtocolUnsupported",
                f"the client-side {scheme} plugin could not be loaded on this host "
                "(for davs this is gfal2's http plugin and its libdavix dependency); "
                "the storage service was never contacted, so the 'service not available' text is misleading",
            )
        if SERVICE_UNAVAILABLE.lower() in low:
            return Classification("ServiceUnavailable", "the storage endpoint reported itself unavailable")
        return Classification("ProtocolUnsupported", f"{scheme} is not supported by the client")
    if "connection refused" in low:
        env = ctx.get("proxy_env", "HTTPS_PROXY")
        if not ctx.get("proxy"):
            hint = (f"no proxy is configured (${env} is unset); networks that only allow "
                    "egress through a local HTTPS proxy refuse direct connections")
        else:
            hint = f"the connection to or through the proxy {ctx['proxy']} was refused"
        return Classification("ConnectionRefused", hint)
    if "checksum" in low and "mismatch" in low:
        return Classification("ChecksumMismatch", "destination bytes differ from the source")
    if "expired" in low and "token" in low:
        return Classification("TokenExpired", "the bearer token lifetime elapsed; refresh and retry")
    return Classification("Unclassified", "no known pattern matched")


# -- transfers -------------------------------------------------------------

class Direction(str, Enum):
    UPLOAD = "UPLOAD"
    DOWNLOAD = "DOWNLOAD"


@dataclass
class TransferOutcome:
    direction: Direction
    did: str
    rse: str
    chosen_scheme: Optional[str] = None
    attempts: list = field(default_factory=list)
    final_result: str = "FAILED"
    error_class: Optional[str] = None
    raw_message: Optional[str] = None
    explanation: Optional[str] = None
    path: Optional[str] = None
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.final_result == "OK"

    def raise_for_status(self) -> None:
        if self.ok:
            return
        exc = {"ProtocolUnsupported": ProtocolUnsupported, "ChecksumMismatch": ChecksumMismatch}
        raise exc.get(self.error_class, TransferError)(self.raw_message or self.error_class)

    def to_dict(self) -> dict:
        return {
            "direction": self.direction.value, "did": self.did, "rse": self.rse,
            "chosenScheme": self.chosen_scheme, "attempts": [list(a) for a in self.attempts],
            "finalResult": self.final_result, "errorClass": self.error_class,
            "rawMessage": self.raw_message, "explanation": self.explanation,
            "path": self.path, "seconds": self.seconds,
        }


def _copy_verified(outcome, schemes, plugins, src, dst, expected, proxy=None) -> None:
    """Try ``schemes`` in order until one lands verified bytes at ``dst``."""
    tmp = dst.with_name(f".{dst.name}{PARTIAL_SUFFIX}")
    for scheme in schemes:
        plugin = plugins.get(scheme) or ProtocolPlugin(scheme, available=False)
        outcome.chosen_scheme = scheme
        try:
            plugin.copy(src, tmp)
        except PluginUnavailable as exc:
            outcome.attempts.append((scheme, "FAILED"))
            outcome.raw_message = str(exc)
            c = classify_error(str(exc), {"scheme": scheme, "plugin_available": False, "proxy": proxy})
            outcome.error_class, outcome.explanation = c.error_class, c.explanation
            continue
        report = verify_set(tmp, expected)
        if not report.ok:
            tmp.unlink(missing_ok=True)
            outcome.attempts.append((scheme, "CHECKSUM_MISMATCH"))
            outcome.error_class = "ChecksumMismatch"
            outcome.raw_message = f"checksum mismatch on {', '.join(report.failed)}"
            outcome.explanation = "destination bytes differ from the source"
            continue
        os.replace(tmp, dst)
        outcome.attempts.append((scheme, "OK"))
        outcome.final_result = "OK"
        outcome.error_class = outcome.raw_message = outcome.explanation = None
        outcome.path = str(dst)
        return


def upload(catalog, local_path, did, rse: str, policy: NegotiationPolicy, plugins: Mapping,
           token: AuthToken, schema="LEGACY", now: Optional[float] = None) -> TransferOutcome:
    """Copy ``local_path`` to ``<basePath>/<scope>/<name>`` on ``rse`` and register it.

    Raises TokenExpired before anything else and DuplicateDID before any
    bytes move. Protocol and checksum failures come back as a FAILED
    outcome with nothing registered and no partial file left behind.
    """
    t0 = time.perf_counter()
    token.check(now)
    src = Path(local_path)
    if not src.is_file():
        raise MissingSourceFile(str(src))
    scope, name = parse_did(did) if isinstance(did, str) else did
    did = f"{scope}:{name}"
    if catalog.has_did(did):
        raise DuplicateDID(did)
    target = catalog.get_rse(rse)
    schemes = negotiate(target, policy)
    expected, _ = catalog_set(src, ChecksumSchema.parse(schema))
    dst = Path(target.base_path) / scope / name
    outcome = TransferOutcome(Direction.UPLOAD, did, rse)
    _copy_verified(outcome, schemes, plugins, src, dst, expected)
    if outcome.ok:
        catalog.register_file_did(scope, name, src.stat().st_size, expected)
        catalog.add_replica(did, rse, str(dst))
    outcome.seconds = time.perf_counter() - t0
    return outcome


def download(catalog, did, rse: str, destination, policy: NegotiationPolicy, plugins: Mapping,
             token: AuthToken, now: Optional[float] = None) -> TransferOutcome:
    """Fetch the replica of ``did`` on ``rse`` to ``destination``, verified against the catalog."""
    t0 = time.perf_counter()
    token.check(now)
    replica = catalog.get_replica(did, rse)
    expected = catalog.get_did(did).checksums
    schemes = negotiate(catalog.get_rse(rse), policy)
    dst = Path(destination)
    outcome = TransferOutcome(Direction.DOWNLOAD, replica.did, rse)
    src = Path(replica.pfn)
    if not src.is_file():
        outcome.error_class, outcome.raw_message = "MissingSourceFile", f"replica file {src} is gone"
        outcome.explanation = "the catalog lists a replica whose storage path no longer exists"
    else:
        _copy_verified(outcome, schemes, plugins, src, dst, expected)
    outcome.seconds = time.perf_counter() - t0
    return outcome


__all__ = [
    "AuthToken", "Classification", "DEFAULT_TOKEN_TTL", "Direction", "Mode", "NegotiationPolicy",
    "NoProtocol", "PluginUnavailable", "ProtocolPlugin", "ProtocolUnsupported", "SERVICE_UNAVAILABLE",
    "TokenExpired", "TransferError", "TransferOutcome", "classify_error", "default_failure_message",
    "download", "load_fault_profile", "negotiate", "parse_weights", "plugins_from_flags",
    "refresh_token", "upload",
]
