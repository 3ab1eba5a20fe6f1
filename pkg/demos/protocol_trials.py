"""
Upload failures from a missing protocol plugin
==============================================

An RSE offers davs and root. The client picks davs three times out of four
but cannot load its davs plugin, so most pushes fail with a message that
blames the service. Downloads fall back to root and never fail.
"""

import tempfile

from lakeflow.pipeline import run_trials, setup_trial, summarize
from lakeflow.transfer import classify_error

setup = setup_trial(tempfile.mkdtemp(), davs_available=False, weights={"davs": 3, "root": 1}, seed=42)
log = run_trials(setup.spec, setup.ctx, 200, sleep_seconds=0, rng_seed=42)
print(summarize(log).text)

failed = next(it for it in log.iterations if it.result.value == "FAILURE_2")
print(failed.raw_message)
verdict = classify_error(failed.raw_message, {"scheme": "davs", "plugin_available": False})
print(verdict.error_class, "-", verdict.explanation)

# with the plugin fixed every iteration succeeds
fixed = setup_trial(tempfile.mkdtemp(), davs_available=True, seed=42)
print(summarize(run_trials(fixed.spec, fixed.ctx, 50, 0, rng_seed=42)).text.splitlines()[0])
