"""
Checksum throughput and the registration budget
===============================================

Digest one buffer with every engine in a single pass, then extrapolate
the per-algorithm cost to a 4 GB raw file.
"""

import os
import tempfile
from pathlib import Path

from lakeflow.checksums import compute_set, digest_file, migrate_schema

workdir = Path(tempfile.mkdtemp())
sample = workdir / "sample.raw"
sample.write_bytes(os.urandom(64 * 2**20))

# one read, four engines; timings cover only each engine's update calls
digests, timings = digest_file(sample, ["adler32", "md5", "fast", "strong"])
for t in timings:
    print(t.line())

# seconds each algorithm would need for a 4 GB file at the measured rate
for t in timings:
    print(f"{t.algorithm:>8}: {4e9 / t.throughput_bytes_per_sec:6.1f} s per 4 GB")

# walking a legacy set forward keeps the adler32/md5 pair intact
legacy, _ = compute_set(sample, "legacy")
modern = migrate_schema(migrate_schema(legacy, sample, "transitional"), sample, "modern")
print(modern.present())
