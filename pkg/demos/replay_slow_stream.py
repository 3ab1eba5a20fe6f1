"""
Replaying a run with one slow disk
==================================

Ten rate-capped streams copy a synthetic run into a landing area. One file
on one stream is throttled hard, and the run is not finished until it is.
"""

import tempfile
from pathlib import Path

from lakeflow.replay import MB, FaultSpec, plan_replay, run_replay, synthesize_run

root = Path(tempfile.mkdtemp())
layout = synthesize_run(root / "hdd", streams=10, files_per_stream=4, file_bytes=2 * MB)

# 200 MB/s per stream scaled down to 20 MB/s; stream 9 file 2 at 8 MB/s scaled to 800 kB/s
plan = plan_replay(layout, 200 * MB, root / "landing", scale=0.1,
                   fault=FaultSpec(stream=9, file=2, rate=8 * MB))
for s in plan.streams[8:]:
    print(f"stream {s.index}: {s.total_bytes / MB:.0f} MB, expect {s.expected_seconds():.2f} s")

report = run_replay(plan)
for entry in report.per_stream:
    took = entry["endTime"] - entry["startTime"]
    print(f"stream {entry['index']}: {entry['meanRate'] / MB:6.2f} MB/s in {took:5.2f} s")

print("slowest:", report.slowest()["index"])
print(f"aggregate {report.aggregate_mean_rate / MB:.1f} MB/s")
