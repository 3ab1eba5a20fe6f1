"""HTTP/JSON front end for the catalog, a matching client, and an emulated site proxy.

The client exposes the same methods as :class:`~lakeflow.catalog.service.Catalog`,
so ingest and transfer code accepts either. When the configured proxy
environment variable is set, all client traffic goes through that proxy.
"""

from __future__ import annotations

import glob
import http.client
import json
import logging
import os
import threading
import urllib.error
import urllib.parse
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Iterable, Optional

from lakeflow.checksums import ChecksumError, ChecksumSet
from lakeflow.catalog.models import (
    DID,
    ERRORS,
    RSE,
    CatalogError,
    CatalogUnreachable,
    ConnectionRefused,
    InvalidRequest,
    Replica,
    ReplicationRule,
    RunManifest,
    UnknownDID,
    UnknownReplica,
)
from lakeflow.catalog.service import Catalog, DIDRef, did_key

log = logging.getLogger(__name__)

DEFAULT_PROXY_ENV = "HTTPS_PROXY"


class _NotFound(CatalogError):
    status = 404


class _Handler(BaseHTTPRequestHandler):
    server: "_CatalogHTTPServer"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _reply(self, status: int, payload) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b"{}"
        try:
            data = json.loads(raw or b"{}")
        except json.JSONDecodeError as exc:
            raise InvalidRequest(f"malformed JSON: {exc}") from None
        if not isinstance(data, dict):
            raise InvalidRequest("request body must be a JSON object")
        return data

    def _dispatch(self, method: str) -> None:
        url = urllib.parse.urlsplit(self.path)
        parts = [urllib.parse.unquote(p) for p in url.path.strip("/").split("/") if p]
        query = {k: v[-1] for k, v in urllib.parse.parse_qs(url.query).items()}
        try:
            status, payload = self._route(method, parts, query)
        except CatalogError as exc:
            status, payload = exc.status, {"error": exc.name.lstrip("_"), "detail": str(exc)}
        except (ChecksumError, ValueError, KeyError, TypeError) as exc:
            status, payload = 422, {"error": "InvalidRequest", "detail": f"{type(exc).__name__}: {exc}"}
        self._reply(status, payload)

    def _route(self, method: str, parts: list, query: dict):
        cat = self.server.catalog
        if method == "GET" and parts == ["ping"]:
            return 200, {"ok": True}
        if method == "POST" and parts == ["rses"]:
            return 201, {"name": cat.create_rse(RSE.from_dict(self._body()))}
        if method == "GET" and parts == ["rses"]:
            return 200, [r.to_dict() for r in cat.list_rses()]
        if method == "GET" and len(parts) == 2 and parts[0] == "rses":
            return 200, cat.get_rse(parts[1]).to_dict()
        if method == "POST" and parts == ["dids"]:
            body = self._body()
            if body.get("kind") == "DATASET":
                return 201, cat.register_dataset(body["scope"], body["name"]).to_dict()
            did = cat.register_file_did(body["scope"], body["name"], body["bytes"],
                                        ChecksumSet.from_dict(body["checksums"]))
            return 201, did.to_dict()
        if method == "GET" and len(parts) == 3 and parts[0] == "dids":
            return 200, cat.get_did((parts[1], parts[2])).to_dict()
        if method == "POST" and parts == ["attachments"]:
            body = self._body()
            return 201, cat.attach(body["dataset"], body["children"]).to_dict()
        if method == "POST" and parts == ["replicas"]:
            body = self._body()
            rep = cat.add_replica(body["did"], body["rse"], body["pfn"], bool(body.get("zeroCopy", False)))
            return 201, rep.to_dict()
        if method == "GET" and parts == ["replicas"]:
            reps = cat.list_replicas(query.get("scope"), query.get("name"), query.get("rse"))
            return 200, [r.to_dict() for r in reps]
        if method == "POST" and parts == ["rules"]:
            body = self._body()
            return 201, cat.add_rule(body["did"], body["rseExpression"], body.get("copies", 1)).to_dict()
        if method == "GET" and parts == ["rules"]:
            return 200, [r.to_dict() for r in cat.list_rules(query.get("scope"), query.get("name"))]
        if method == "POST" and parts == ["runs"]:
            return 201, cat.register_run(RunManifest.from_dict(self._body())).to_dict()
        if method == "GET" and len(parts) == 3 and parts[0] == "runs" and parts[2] == "complete":
            complete, missing = cat.segment_complete(parts[1])
            return 200, {"runId": parts[1], "complete": complete, "missing": sorted(missing)}
        raise _NotFound(f"no route for {method} /{'/'.join(parts)}")

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")


class _CatalogHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, catalog: Catalog):
        self.catalog = catalog
        super().__init__(address, _Handler)


class CatalogServer:
    """Serve a :class:`Catalog` on ``host:port`` from a background thread."""

    def __init__(self, catalog: Catalog, host: str = "127.0.0.1", port: int = 0):
        self.catalog = catalog
        self._httpd = _CatalogHTTPServer((host, port), catalog)
        self._thread: Optional[threading.Thread] = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def url(self) -> str:
        host = self._httpd.server_address[0]
        return f"http://{host}:{self.port}"

    def start(self) -> "CatalogServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, name="catalog-http", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def stop(self) -> None:
        if self._thread:
            self._httpd.shutdown()
            self._thread.join(timeout=5)
        self._httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def proxy_from_env(env_var: str = DEFAULT_PROXY_ENV) -> Optional[str]:
    return os.environ.get(env_var) or os.environ.get(env_var.lower()) or None


class CatalogClient:
    """HTTP client with the same surface as :class:`Catalog`.

    ``proxy`` overrides the environment; by default the variable named by
    ``proxy_env`` is consulted at construction time.
    """

    def __init__(self, url: str, proxy: Optional[str] = None, proxy_env: str = DEFAULT_PROXY_ENV,
                 timeout: float = 10.0):
        self.url = url.rstrip("/")
        self.proxy = proxy if proxy is not None else proxy_from_env(proxy_env)
        self.proxy_env = proxy_env
        self.timeout = timeout
        routes = {"http": self.proxy, "https": self.proxy} if self.proxy else {}
        # an explicit (possibly empty) map stops urllib from reading *_proxy itself
        self._opener = urllib.request.build_opener(urllib.request.ProxyHandler(routes))

    def _call(self, method: str, path: str, body: Optional[dict] = None, query: Optional[dict] = None):
        url = self.url + path
        if query:
            query = {k: v for k, v in query.items() if v is not None}
            if query:
                url += "?" + urllib.parse.urlencode(query)
        data = json.dumps(body).encode() if body is not None else None
        req = urllib.request.Request(url, data=data, method=method,
                                     headers={"Content-Type": "application/json"})
        try:
            with self._opener.open(req, timeout=self.timeout) as resp:
                return json.loads(resp.read() or b"null")
        except urllib.error.HTTPError as exc:
            try:
                payload = json.loads(exc.read())
                cls = ERRORS.get(payload.get("error"), CatalogError)
                detail = payload.get("detail", "")
            except (ValueError, AttributeError):
                cls, detail = CatalogUnreachable, f"HTTP {exc.code} from {url}"
            raise cls(detail) from None
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, ConnectionRefusedError):
                via = f" via proxy {self.proxy}" if self.proxy else ""
                raise ConnectionRefused(f"[Errno 111] Connection refused: {self.url}{via}") from None
            raise CatalogUnreachable(f"{self.url}: {exc.reason}") from None
        except (ConnectionError, TimeoutError, http.client.HTTPException) as exc:
            if isinstance(exc, ConnectionRefusedError):
                raise ConnectionRefused(f"[Errno 111] Connection refused: {self.url}") from None
            raise CatalogUnreachable(f"{self.url}: {exc}") from None

    def close(self) -> None:
        pass

    def ping(self) -> bool:
        return bool(self._call("GET", "/ping")["ok"])

    def create_rse(self, rse: "RSE | dict") -> str:
        if isinstance(rse, RSE):
            rse = rse.to_dict()
        return self._call("POST", "/rses", rse)["name"]

    def get_rse(self, name: str) -> RSE:
        return RSE.from_dict(self._call("GET", "/rses/" + urllib.parse.quote(name, safe="")))

    def list_rses(self) -> list[RSE]:
        return [RSE.from_dict(r) for r in self._call("GET", "/rses")]

    def register_file_did(self, scope: str, name: str, bytes: int, checksums: ChecksumSet) -> DID:
        if isinstance(checksums, ChecksumSet):
            checksums = checksums.to_dict()
        return DID.from_dict(self._call("POST", "/dids", {"scope": scope, "name": name,
                                                          "bytes": bytes, "checksums": checksums}))

    def register_dataset(self, scope: str, name: str) -> DID:
        return DID.from_dict(self._call("POST", "/dids", {"scope": scope, "name": name, "kind": "DATASET"}))

    def attach(self, dataset: DIDRef, children: Iterable[DIDRef]) -> DID:
        ds = "%s:%s" % did_key(dataset)
        kids = ["%s:%s" % did_key(c) for c in children]
        return DID.from_dict(self._call("POST", "/attachments", {"dataset": ds, "children": kids}))

    def get_did(self, did: DIDRef) -> DID:
        scope, name = did_key(did)
        q = urllib.parse.quote
        return DID.from_dict(self._call("GET", f"/dids/{q(scope, safe='')}/{q(name, safe='')}"))

    def has_did(self, did: DIDRef) -> bool:
        try:
            self.get_did(did)
        except UnknownDID:
            return False
        return True

    def add_replica(self, did: DIDRef, rse: str, pfn: str, zero_copy: bool = False) -> Replica:
        body = {"did": "%s:%s" % did_key(did), "rse": rse, "pfn": str(pfn), "zeroCopy": zero_copy}
        return Replica.from_dict(self._call("POST", "/replicas", body))

    def list_replicas(self, scope: Optional[str] = None, name: Optional[str] = None,
                      rse: Optional[str] = None) -> list[Replica]:
        rows = self._call("GET", "/replicas", query={"scope": scope, "name": name, "rse": rse})
        return [Replica.from_dict(r) for r in rows]

    def get_replica(self, did: DIDRef, rse: str) -> Replica:
        scope, name = did_key(did)
        rows = self.list_replicas(scope, glob.escape(name), rse)
        if not rows:
            raise UnknownReplica(f"{scope}:{name}@{rse}")
        return rows[0]

    def add_rule(self, did: DIDRef, rse_expression: str, copies: int = 1) -> ReplicationRule:
        body = {"did": "%s:%s" % did_key(did), "rseExpression": rse_expression, "copies": copies}
        return ReplicationRule.from_dict(self._call("POST", "/rules", body))

    def list_rules(self, scope: Optional[str] = None, name: Optional[str] = None) -> list[ReplicationRule]:
        rows = self._call("GET", "/rules", query={"scope": scope, "name": name})
        return [ReplicationRule.from_dict(r) for r in rows]

    def register_run(self, manifest: "RunManifest | dict") -> RunManifest:
        if isinstance(manifest, RunManifest):
            manifest = manifest.to_dict()
        return RunManifest.from_dict(self._call("POST", "/runs", manifest))

    def segment_complete(self, run_id: str) -> tuple[bool, set[int]]:
        body = self._call("GET", f"/runs/{urllib.parse.quote(run_id, safe='')}/complete")
        return bool(body["complete"]), set(body["missing"])


class _ProxyHandler(BaseHTTPRequestHandler):
    server: "_ProxyHTTPServer"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("proxy %s - %s", self.address_string(), fmt % args)

    def _forward(self):
        target = urllib.parse.urlsplit(self.path)
        if not target.hostname:
            self.send_error(400, "proxy expects absolute-form request targets")
            return
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else None
        conn = http.client.HTTPConnection(target.hostname, target.port or 80, timeout=30)
        path = target.path + (f"?{target.query}" if target.query else "")
        headers = {"Content-Type": self.headers.get("Content-Type", "application/json"),
                   "Via": "1.1 lakeflow-proxy"}
        try:
            conn.request(self.command, path or "/", body=body, headers=headers)
            resp = conn.getresponse()
            payload = resp.read()
        except OSError as exc:
            self.send_error(502, f"upstream unreachable: {exc}")
            return
        finally:
            conn.close()
        self.server.forwarded += 1
        self.send_response(resp.status)
        self.send_header("Content-Type", resp.getheader("Content-Type", "application/json"))
        self.send_header("Content-Length", str(len(payload)))
        self.send_header("Via", "1.1 lakeflow-proxy")
        self.end_headers()
        self.wfile.write(payload)

    do_GET = _forward
    do_POST = _forward


class _ProxyHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    forwarded = 0


class EmulatedProxy:
    """Pass-through forward proxy standing in for a site HTTPS proxy.

    ``set_refusing(True)`` closes the listening socket so clients get a real
    connection-refused; ``set_refusing(False)`` listens again on the same port.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.host = host
        self._port = port
        self._httpd: Optional[_ProxyHTTPServer] = None
        self._thread: Optional[threading.Thread] = None
        self.forwarded = 0

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self._port}"

    @property
    def refusing(self) -> bool:
        return self._httpd is None

    def start(self) -> "EmulatedProxy":
        self._httpd = _ProxyHTTPServer((self.host, self._port), _ProxyHandler)
        self._port = self._httpd.server_address[1]
        self._thread = threading.Thread(target=self._httpd.serve_forever, name="proxy", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._httpd is None:
            return
        self.forwarded += self._httpd.forwarded
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=5)
        self._httpd = None

    def set_refusing(self, refusing: bool) -> None:
        if refusing:
            self.stop()
        elif self._httpd is None:
            self.start()

    @property
    def forwarded_total(self) -> int:
        return self.forwarded + (self._httpd.forwarded if self._httpd else 0)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
