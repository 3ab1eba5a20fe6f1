"""
Interrupted ingestion and the second pass
=========================================

Land a small run, register it as zero-copy replicas, stop partway through
and run again. The second pass picks up only what is missing.
"""

import tempfile
import threading
from pathlib import Path

from lakeflow.catalog import RSE, Catalog, ProtocolEntry
from lakeflow.ingest import WatchConfig, reconcile, run_daemon
from lakeflow.replay import MB, plan_replay, run_replay, synthesize_run

root = Path(tempfile.mkdtemp())
layout = synthesize_run(root / "hdd", 10, 10, MB // 4)
plan = plan_replay(layout, 50 * MB, root / "landing")
run_replay(plan)

catalog = Catalog(root / "catalog.jsonl")
catalog.create_rse(RSE("LAKE-A", str(root / "lake"), (ProtocolEntry("davs", 1, 3), ProtocolEntry("root", 2, 1))))
config = WatchConfig(plan.landing_dir, "LAKE-A", "mcbm", poll_interval=0.2, forced_delay=0)

# stop the first pass after 92 files
stop = threading.Event()
count = []
first = run_daemon(config, catalog, stop_event=stop,
                   on_record=lambda r: (count.append(r), len(count) == 92 and stop.set()))
print(first.line())
print("missing after first pass:", len(reconcile(plan.landing_dir, catalog, config).disk_only))

second = run_daemon(config, catalog)
print(second.line())
print("replicas:", len(catalog.list_replicas(scope="mcbm")))
print("converged:", reconcile(plan.landing_dir, catalog, config).converged)

# per-file cost split into checksum, registration and rule
rec = second.records[0]
print({phase: f"{sec * 1e3:.2f} ms" for phase, sec in rec.timings.items()})
