import hashlib
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lakeflow.catalog import DuplicateDID
from lakeflow.pipeline import (
    DemoKind,
    DemoSpec,
    IterationResult,
    ProcessParams,
    Result,
    TrialLog,
    demo_produce_upload,
    demo_pull_process,
    demo_pull_process_push,
    demo_roundtrip,
    process_payload,
    run_trials,
    setup_trial,
    summarize,
)
from lakeflow.transfer import NegotiationPolicy, download, plugins_from_flags
from oracles import keyed_transform

# sha256 of process_payload(bytes(range(256)) * 4, ProcessParams(1588, 1)), frozen from a first run
FIXTURE_DIGEST = "a99a165cb8f4af9fadee0736d86a1671540ee76dbd8b1efb122450b6c78846bb"


def test_process_payload_lengths_and_determinism():
    p = ProcessParams(7, Fraction(3, 2))
    data = bytes(range(256)) * 300
    out = process_payload(data, p)
    assert len(out) == 115200 and out == process_payload(data, p)
    assert len(process_payload(b"abc", ProcessParams(1, Fraction(1, 2)))) == 2
    assert len(process_payload(b"", p)) == 0
    assert len(process_payload(b"x" * 10, ProcessParams(0, 1))) == 10
    with pytest.raises(ValueError):
        ProcessParams(0, 0)


@settings(max_examples=50, deadline=None)
@given(st.binary(min_size=1, max_size=200_000), st.data())
def test_one_byte_perturbation_changes_output(data, draw):
    p = ProcessParams(1588, Fraction(1))
    i = draw.draw(st.integers(0, len(data) - 1))
    flipped = bytearray(data)
    flipped[i] ^= 0x01
    a = hashlib.sha256(process_payload(data, p)).digest()
    b = hashlib.sha256(process_payload(bytes(flipped), p)).digest()
    assert a != b


@settings(max_examples=60, deadline=None)
@given(st.binary(max_size=70_000), st.integers(-2**60, 2**60), st.integers(1, 5), st.integers(1, 5))
def test_process_payload_matches_reference(data, key, num, den):
    assert process_payload(data, ProcessParams(key, Fraction(num, den))) == keyed_transform(data, key, num, den)


def test_process_payload_regression_fixture():
    out = process_payload(bytes(range(256)) * 4, ProcessParams(1588, Fraction(1)))
    assert hashlib.sha256(out).hexdigest() == FIXTURE_DIGEST


def test_spec_requires_input_for_pull():
    with pytest.raises(ValueError):
        DemoSpec(DemoKind.PULL_PROCESS_PUSH, "mcbm", "LAKE-A")


@pytest.fixture
def trial(tmp_path):
    return setup_trial(tmp_path / "w", input_bytes=4096)


def test_roundtrip_then_duplicate(trial, tmp_path):
    seed = tmp_path / "urqmd.dat"
    seed.write_bytes(b"urqmd" * 999)
    spec = DemoSpec(DemoKind.ROUNDTRIP, "mcbm", "LAKE-A", policy=NegotiationPolicy("fallback"))
    res = demo_roundtrip(spec, trial.ctx, seed)
    assert res.ok and res.md5_before == res.md5_after == hashlib.md5(seed.read_bytes()).hexdigest()
    snap = trial.ctx.catalog.snapshot()
    with pytest.raises(DuplicateDID):
        demo_roundtrip(spec, trial.ctx, seed)
    assert trial.ctx.catalog.snapshot() == snap
    empty = tmp_path / "empty.dat"
    empty.write_bytes(b"")
    assert demo_roundtrip(spec, trial.ctx, empty).ok


def test_produce_upload_ticks(trial):
    spec = DemoSpec(DemoKind.PRODUCE_UPLOAD, "sim", "LAKE-A", policy=NegotiationPolicy("fallback"))
    slept = []
    trial.ctx.sleep = slept.append
    ticks = demo_produce_upload(spec, trial.ctx, period=0.5, iterations=3)
    assert all(t.ok for t in ticks) and len(slept) == 2
    assert len(trial.ctx.catalog.list_replicas(scope="sim")) == 9
    assert {d.split(".")[1] for t in ticks for d in t.dids} == {"parameters", "geometry", "transport"}
    assert demo_produce_upload(spec, trial.ctx, 0.5, 0) == []


def test_produce_upload_failing_tick_does_not_stop_schedule(trial):
    spec = DemoSpec(DemoKind.PRODUCE_UPLOAD, "sim", "LAKE-A", policy=NegotiationPolicy("strict"))
    trial.ctx.sleep = lambda s: None
    ticks = demo_produce_upload(spec, trial.ctx, period=0, iterations=2)
    assert [t.ok for t in ticks] == [False, False]
    assert ticks[0].error == "ProtocolUnsupported" and len(ticks[1].outcomes) == 3
    trial.ctx.plugins = plugins_from_flags([])
    assert demo_produce_upload(spec, trial.ctx, 0, 1, tag="retry")[0].ok


def test_pull_process_push_paths(trial):
    spec, ctx = trial.spec, trial.ctx
    spec.policy = NegotiationPolicy("strict")
    bad = demo_pull_process_push(spec, ctx, 0)
    assert bad.result is Result.FAILURE_2 and bad.chosen_scheme == "davs"
    spec.policy = NegotiationPolicy("weighted", 0, {"davs": 0, "root": 1})
    good = demo_pull_process_push(spec, ctx, 1)
    assert good.result is Result.SUCCESS and good.output_did == "mcbm:run1588_f00.raw.rec.1"
    missing = DemoSpec(DemoKind.PULL_PROCESS_PUSH, "mcbm", "LAKE-A", input_did="mcbm:absent")
    gone = demo_pull_process_push(missing, ctx, 2)
    assert gone.result is Result.FAILURE_1 and "process" not in gone.durations
    assert "upload" not in gone.durations
    assert demo_pull_process(spec, ctx).result is Result.SUCCESS


def test_run_trials_reproducible_and_end_to_end(trial, tmp_path):
    spec, ctx = trial.spec, trial.ctx
    log = run_trials(spec, ctx, 40, 0, rng_seed=5, log_path=tmp_path / "t.jsonl")
    totals = log.totals
    assert sum(totals.values()) == 40 and totals["failure1"] == 0
    loaded = TrialLog.load(tmp_path / "t.jsonl")
    assert [i.result for i in loaded.iterations] == [i.result for i in log.iterations]
    # fresh environment, same seed -> same result sequence
    other = setup_trial(tmp_path / "w2", input_bytes=4096)
    again = run_trials(other.spec, other.ctx, 40, 0, rng_seed=5)
    strip = lambda lg: [(i.result, i.chosen_scheme, i.output_did, i.error_class) for i in lg.iterations]
    assert strip(again) == strip(log)
    expected = process_payload(trial.input_path.read_bytes(), spec.process_params)
    for it in log.iterations:
        if it.result is Result.SUCCESS:
            dest = tmp_path / "check" / it.output_did
            assert download(ctx.catalog, it.output_did, "LAKE-A", dest, NegotiationPolicy("fallback"),
                            ctx.plugins, ctx.token).ok
            assert dest.read_bytes() == expected
    with pytest.raises(ValueError):
        run_trials(spec, ctx, 0)


def test_run_trials_single_and_sleep(trial):
    slept = []
    trial.ctx.sleep = slept.append
    log = run_trials(trial.spec, trial.ctx, 3, 2.5, rng_seed=1)
    assert slept == [2.5, 2.5]
    one = run_trials(trial.spec, trial.ctx, 1, 0, rng_seed=1)
    assert sum(one.totals.values()) == 1 and len(log.iterations) == 3


def test_summarize():
    its = [IterationResult(i, Result.SUCCESS if i < 25 else Result.FAILURE_2,
                           chosen_scheme="root" if i < 25 else "davs",
                           durations={"download": 0.01, "process": 0.001, "upload": 0.02})
           for i in range(100)]
    s = summarize(TrialLog(its))
    assert s.text.splitlines()[0] == "success 25/100 (25.0%) failure2 75/100 (75.0%) failure1 0/100 (0.0%)"
    assert s.data["perScheme"] == {"root": {"success": 25, "failure2": 0}, "davs": {"success": 0, "failure2": 75}}
    assert s.data["durations"]["upload"]["p50"] == pytest.approx(0.02)
    empty = summarize(TrialLog())
    assert empty.data["totals"] == {"success": 0, "failure1": 0, "failure2": 0}
    allgood = summarize(TrialLog([IterationResult(0, Result.SUCCESS)]))
    assert allgood.text.startswith("success 1/1 (100.0%)")
