import json

import pytest

from lakeflow.cli import main
from lakeflow.config import ConfigError, load_config, parse_protocols
from lakeflow.replay import synthesize_run
from lakeflow.transfer import Mode


def lines(capsys):
    return capsys.readouterr().out.strip().splitlines()


def write_config(tmp_path, **extra):
    text = f"""
[catalog]
journal = {tmp_path / 'cat.jsonl'}
port = 9999

[proxy]
env = LAKE_PROXY

[rse]
name = LAKE-A
base_path = {tmp_path / 'lake'}
protocols = davs:1:3, root:2:1

[policy]
upload = strict
download = fallback
seed = 7

[checksum]
schema = transitional

[replay]
scale = 0.5
"""
    path = tmp_path / "lakeflow.ini"
    path.write_text(text)
    return path


def test_config_roundtrip(tmp_path):
    cfg = load_config(write_config(tmp_path))
    assert cfg.catalog_port == 9999 and cfg.proxy_env == "LAKE_PROXY"
    assert cfg.upload_policy is Mode.PRIORITY_STRICT and cfg.policy_seed == 7
    assert cfg.replay_scale == 0.5 and cfg.checksum_schema.value == "TRANSITIONAL"
    assert [(p.scheme, p.priority, int(p.weight)) for p in cfg.rse().protocols] == [("davs", 1, 3), ("root", 2, 1)]
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    with pytest.raises(ConfigError):
        parse_protocols("davs")
    assert load_config(None).replay_scale == 0.1


def test_bad_config_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[catalog]\nport = many\n")
    f = tmp_path / "f"
    f.write_bytes(b"x")
    assert main(["--config", str(bad), "checksum", str(f)]) == 2
    assert main(["no-such-command"]) == 2


def test_checksum_command(tmp_path, capsys):
    f = tmp_path / "w"
    f.write_bytes(b"Wikipedia")
    assert main(["checksum", str(f), "--schema", "legacy", "--timing"]) == 0
    out = lines(capsys)
    assert out[0] == "adler32 11e60398"
    assert out[2].split()[:2] == ["adler32", "9"] and len(out) == 4
    assert main(["checksum", str(tmp_path / "absent")]) == 1


def test_upload_download_with_config(tmp_path, capsys):
    cfg = str(write_config(tmp_path))
    src = tmp_path / "in.dat"
    src.write_bytes(b"payload" * 100)
    assert main(["--config", cfg, "upload", "--did", "mcbm:a", "--rse", "LAKE-A", "--file", str(src),
                 "--plugin", "davs=off"]) == 1
    failed = json.loads(lines(capsys)[-1])
    assert failed["errorClass"] == "ProtocolUnsupported"
    assert "The requested service is not available at the moment" in failed["rawMessage"]
    assert main(["--config", cfg, "upload", "--did", "mcbm:a", "--rse", "LAKE-A", "--file", str(src),
                 "--policy", "fallback", "--plugin", "davs=off"]) == 0
    assert json.loads(lines(capsys)[-1])["chosenScheme"] == "root"
    dest = tmp_path / "back.dat"
    assert main(["--config", cfg, "download", "--did", "mcbm:a", "--rse", "LAKE-A", "--dest", str(dest),
                 "--plugin", "davs=off"]) == 0
    assert dest.read_bytes() == src.read_bytes()
    assert main(["--config", cfg, "download", "--did", "mcbm:zzz", "--rse", "LAKE-A", "--dest", str(dest)]) == 1
    assert json.loads(lines(capsys)[-1])["errorClass"] == "UnknownReplica"


def test_replay_and_ingest_commands(tmp_path, capsys):
    cfg = str(write_config(tmp_path))
    layout = synthesize_run(tmp_path / "src", 2, 2, 1000)
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"rate": 1_000_000, "streams": [{"files": [str(p) for p in g]} for g in layout]}))
    landing = tmp_path / "landing"
    assert main(["--config", cfg, "replay", "--plan", str(plan), "--landing", str(landing)]) == 0
    assert lines(capsys)[-1].startswith("streams=2 failed=0")
    args = ["--config", cfg, "ingest", "--watch", str(landing), "--rse", "LAKE-A", "--scope", "mcbm",
            "--once", "--poll", "0.05", "--delay", "0"]
    assert main(args) == 0
    out = lines(capsys)
    assert out[-1].startswith("ingested=4 duplicates=0 failed=0")
    assert all(json.loads(x)["phase"] == "DONE" for x in out[:-1])
    assert main(args + ["--no-state"]) == 0
    assert lines(capsys)[-1].startswith("ingested=0 duplicates=4 failed=0")
    assert main(["--config", cfg, "ingest", "--watch", str(tmp_path / "nope"), "--rse", "LAKE-A",
                 "--scope", "mcbm", "--poll", "0.01"]) == 2


def test_demo_commands(tmp_path, capsys):
    cfg = str(write_config(tmp_path))
    f = tmp_path / "urqmd.dat"
    f.write_bytes(b"u" * 5000)
    common = ["--rse", "LAKE-A", "--scope", "mcbm", "--workdir", str(tmp_path / "w")]
    assert main(["--config", cfg, "demo", "roundtrip", "--file", str(f)] + common) == 0
    assert lines(capsys)[-1].startswith("SUCCESS md5_before=")
    assert main(["--config", cfg, "demo", "roundtrip", "--file", str(f)] + common) == 1
    assert "DuplicateDID" in lines(capsys)[-1]
    assert main(["--config", cfg, "demo", "produce", "--period", "0", "--iterations", "2",
                 "--policy", "fallback"] + common) == 0
    assert len(lines(capsys)) == 2
    assert main(["--config", cfg, "demo", "pull-process", "--input-did", "mcbm:urqmd.dat"] + common) == 0


def test_trial_command(tmp_path, capsys):
    rc = main(["trial", "--n", "12", "--sleep", "0", "--seed", "3", "--workdir", str(tmp_path), "--json"])
    out = lines(capsys)
    data = json.loads(out[-2])
    assert data["totals"]["failure1"] == 0 and sum(data["totals"].values()) == 12
    assert rc == (0 if data["totals"]["success"] == 12 else 1)
    log_lines = (tmp_path / "trial.jsonl").read_text().splitlines()
    assert len(log_lines) == 13 and "totals" in json.loads(log_lines[-1])
    assert main(["trial", "--n", "3", "--sleep", "0", "--davs", "on", "--workdir", str(tmp_path / "b")]) == 0
