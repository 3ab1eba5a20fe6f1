"""
Catalog traffic through a local proxy
=====================================

Serve a journal-backed catalog over HTTP, reach it through an emulated
HTTPS proxy, then switch the proxy off and look at the refusal.
"""

import tempfile
from pathlib import Path

from lakeflow.catalog import RSE, Catalog, CatalogClient, CatalogServer, ConnectionRefused, EmulatedProxy
from lakeflow.transfer import classify_error

root = Path(tempfile.mkdtemp())
catalog = Catalog(root / "journal.jsonl")
server = CatalogServer(catalog)
server.start()
proxy = EmulatedProxy()
proxy.start()

client = CatalogClient(server.url, proxy=proxy.url)
client.create_rse(RSE("LAKE-A", str(root / "lake")))
print([r.name for r in client.list_rses()], "forwarded:", proxy.forwarded_total)

proxy.set_refusing(True)
try:
    client.ping()
except ConnectionRefused as exc:
    print(exc)
    print(classify_error(str(exc), {"proxy": client.proxy}).explanation)

proxy.stop()
server.stop()
catalog.close()
