"""
Long idle gaps and short-lived tokens
=====================================

A two-second token outlives the download but not a three-second gap
before the upload, unless the client refreshes it.
"""

import tempfile

from lakeflow.pipeline import run_trials, setup_trial

for refresh in (False, True):
    setup = setup_trial(tempfile.mkdtemp(), davs_available=True, token_ttl=2.0,
                        idle_seconds=3.0, auto_refresh=refresh)
    it = run_trials(setup.spec, setup.ctx, 1, 0, rng_seed=0).iterations[0]
    print(f"refresh={refresh}: {it.result.value} {it.error_class or ''}")
