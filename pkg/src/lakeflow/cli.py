"""``lakeflow`` command line entry point.

Exit status: 0 when everything succeeded, 1 when any operation failed,
2 for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import tempfile
import threading
from pathlib import Path

from lakeflow import checksums, ingest, pipeline, replay, transfer
from lakeflow.catalog import Catalog, CatalogError, CatalogServer, UnknownRSE, open_catalog
from lakeflow.config import Config, ConfigError, load_config, parse_protocols

OK, FAILED, USAGE = 0, 1, 2


def _catalog(args, cfg: Config):
    return open_catalog(args.catalog or cfg.catalog_target, proxy_env=cfg.proxy_env)


def _ensure_rse(catalog, cfg: Config, name: str) -> None:
    """Create the configured RSE on first use; flags name it, the config defines it."""
    rse = cfg.rse()
    if rse is None or rse.name != name:
        return
    try:
        catalog.get_rse(name)
    except UnknownRSE:
        catalog.create_rse(rse)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True), flush=True)


# -- subcommands -----------------------------------------------------------

def cmd_checksum(args, cfg):
    schema = args.schema or cfg.checksum_schema
    try:
        cs, timings = checksums.compute_set(args.file, schema)
    except checksums.ChecksumError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return FAILED
    for alg, value in cs.present().items():
        print(f"{alg} {value}")
    if args.timing:
        for t in timings:
            print(t.line())
    return OK


def cmd_replay(args, cfg):
    scale = cfg.replay_scale if args.scale is None else args.scale
    fault = replay.FaultSpec.parse(args.fault) if args.fault else None
    plan = replay.load_plan_file(args.plan, args.landing, scale=scale, fault=fault)
    report = replay.run_replay(plan)
    for entry in report.per_stream:
        _emit(entry)
    mb = report.aggregate_mean_rate / replay.MB
    print(f"streams={len(report.per_stream)} failed={len(report.failed)} aggregate={mb:.2f}MB/s "
          f"report={replay.report_path_for(plan.landing_dir)}")
    return FAILED if report.failed else OK


def cmd_ingest(args, cfg):
    catalog = _catalog(args, cfg)
    _ensure_rse(catalog, cfg, args.rse)
    config = ingest.WatchConfig(
        args.watch, args.rse, args.scope, poll_interval=args.poll, forced_delay=args.delay,
        schema=args.schema or cfg.checksum_schema,
        loop_mode="PERIODIC" if args.periodic else "ONCE",
        persist_state=not args.no_state,
    )
    stop = threading.Event()
    previous = signal.signal(signal.SIGINT, lambda *_: stop.set())
    try:
        summary = ingest.run_daemon(config, catalog, stop_event=stop, on_record=lambda r: _emit(r.to_dict()))
    except ingest.WatchDirUnreadable as exc:
        print(f"error: WatchDirUnreadable: {exc}", file=sys.stderr)
        return USAGE
    finally:
        signal.signal(signal.SIGINT, previous)
    print(summary.line())
    return FAILED if summary.failed else OK


def _plugins(args):
    plugins = transfer.plugins_from_flags(args.plugin or [])
    if args.fault_profile:
        plugins.update(transfer.load_fault_profile(args.fault_profile))
    return plugins


def _token(args):
    return transfer.AuthToken.issue("cli", args.token_ttl)


def cmd_upload(args, cfg):
    catalog = _catalog(args, cfg)
    _ensure_rse(catalog, cfg, args.rse)
    mode = args.policy or cfg.upload_policy
    policy = transfer.NegotiationPolicy(mode, args.seed if args.seed is not None else cfg.policy_seed,
                                        transfer.parse_weights(args.weights) if args.weights else None)
    try:
        out = transfer.upload(catalog, args.file, args.did, args.rse, policy, _plugins(args), _token(args),
                              schema=args.schema or cfg.checksum_schema)
    except (transfer.TransferError, CatalogError) as exc:
        _emit({"finalResult": "FAILED", "errorClass": type(exc).__name__, "rawMessage": str(exc)})
        return FAILED
    _emit(out.to_dict())
    return OK if out.ok else FAILED


def cmd_download(args, cfg):
    catalog = _catalog(args, cfg)
    mode = args.policy or cfg.download_policy
    policy = transfer.NegotiationPolicy(mode, args.seed if args.seed is not None else cfg.policy_seed)
    dest = args.dest or Path(args.did.split(":", 1)[-1]).name
    try:
        out = transfer.download(catalog, args.did, args.rse, dest, policy, _plugins(args), _token(args))
    except (transfer.TransferError, CatalogError) as exc:
        _emit({"finalResult": "FAILED", "errorClass": type(exc).__name__, "rawMessage": str(exc)})
        return FAILED
    _emit(out.to_dict())
    return OK if out.ok else FAILED


def _demo_context(args, cfg, catalog):
    return pipeline.DemoContext(catalog, _plugins(args), _token(args), Path(args.workdir),
                                auto_refresh=args.refresh, schema=cfg.checksum_schema.value)


def cmd_demo_roundtrip(args, cfg):
    catalog = _catalog(args, cfg)
    _ensure_rse(catalog, cfg, args.rse)
    spec = pipeline.DemoSpec(pipeline.DemoKind.ROUNDTRIP, args.scope, args.rse,
                             policy=transfer.NegotiationPolicy(args.policy or "fallback", args.seed))
    try:
        res = pipeline.demo_roundtrip(spec, _demo_context(args, cfg, catalog), args.file)
    except (transfer.TransferError, CatalogError, checksums.ChecksumError) as exc:
        print(f"FAILED {type(exc).__name__}: {exc}")
        return FAILED
    print(f"{'SUCCESS' if res.ok else 'FAILED'} md5_before={res.md5_before} md5_after={res.md5_after}")
    return OK if res.ok else FAILED


def cmd_demo_produce(args, cfg):
    catalog = _catalog(args, cfg)
    _ensure_rse(catalog, cfg, args.rse)
    spec = pipeline.DemoSpec(pipeline.DemoKind.PRODUCE_UPLOAD, args.scope, args.rse,
                             policy=transfer.NegotiationPolicy(args.policy or cfg.upload_policy, args.seed))
    ticks = pipeline.demo_produce_upload(spec, _demo_context(args, cfg, catalog), args.period,
                                         args.iterations, tag=args.tag)
    for t in ticks:
        _emit({"tick": t.index, "ok": t.ok, "dids": t.dids, "error": t.error})
    return OK if all(t.ok for t in ticks) else FAILED


def cmd_demo_pull_process(args, cfg):
    catalog = _catalog(args, cfg)
    spec = pipeline.DemoSpec(pipeline.DemoKind.PULL_PROCESS, args.scope, args.rse, input_did=args.input_did,
                             download_policy=transfer.NegotiationPolicy(args.policy or cfg.download_policy,
                                                                        args.seed))
    rec = pipeline.demo_pull_process(spec, _demo_context(args, cfg, catalog))
    _emit(rec.to_dict())
    return OK if rec.result is pipeline.Result.SUCCESS else FAILED


def cmd_trial(args, cfg):
    workdir = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="lakeflow-trial-"))
    weights = transfer.parse_weights(args.weights)
    seed = args.seed if args.seed is not None else (cfg.policy_seed if cfg.policy_seed is not None else 42)
    setup = pipeline.setup_trial(
        workdir, Catalog(), davs_available=args.davs == "on", weights=weights,
        upload_mode=args.upload_policy or cfg.upload_policy,
        download_mode=args.download_policy or cfg.download_policy, seed=seed,
        input_bytes=args.input_bytes, token_ttl=args.token_ttl, auto_refresh=args.refresh,
        idle_seconds=args.idle,
    )
    log_path = Path(args.log) if args.log else workdir / "trial.jsonl"
    trial_log = pipeline.run_trials(setup.spec, setup.ctx, args.n, args.sleep, rng_seed=seed, log_path=log_path)
    summary = pipeline.summarize(trial_log)
    print(summary.text)
    if args.json:
        _emit(summary.data)
    print(f"log={log_path}")
    return OK if trial_log.totals["success"] == args.n else FAILED


def cmd_catalog_serve(args, cfg):
    catalog = Catalog(args.journal or cfg.catalog_journal)
    server = CatalogServer(catalog, args.host or cfg.catalog_host,
                           cfg.catalog_port if args.port is None else args.port)
    print(f"serving {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        catalog.close()
    return OK


def cmd_catalog_create_rse(args, cfg):
    catalog = _catalog(args, cfg)
    from lakeflow.catalog import RSE

    try:
        catalog.create_rse(RSE(args.name, args.base_path, parse_protocols(args.protocols)))
    except CatalogError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return FAILED
    print(args.name)
    return OK


# -- parser ----------------------------------------------------------------

def _transfer_flags(p, policy_default=None):
    p.add_argument("--policy", default=policy_default, type=transfer.Mode.parse,
                   help="strict | weighted | fallback")
    p.add_argument("--seed", type=int)
    p.add_argument("--plugin", action="append", metavar="SCHEME=on|off")
    p.add_argument("--fault-profile", metavar="JSON")
    p.add_argument("--token-ttl", type=float, default=transfer.DEFAULT_TOKEN_TTL)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lakeflow", description="Replica catalog, ingestion and transfer tools.")
    parser.add_argument("--config", help="INI file (default $LAKEFLOW_CONFIG)")
    parser.add_argument("--catalog", help="catalog URL or journal path")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("checksum", help="digest a file")
    p.add_argument("file")
    p.add_argument("--schema", type=checksums.ChecksumSchema.parse)
    p.add_argument("--timing", action="store_true")
    p.set_defaults(func=cmd_checksum)

    p = sub.add_parser("replay", help="rate-limited multi-stream copy")
    p.add_argument("--plan", required=True)
    p.add_argument("--landing", required=True)
    p.add_argument("--scale", type=float)
    p.add_argument("--fault", metavar="stream=I,file=J,rate=R")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("ingest", help="register landed files as zero-copy replicas")
    p.add_argument("--watch", required=True)
    p.add_argument("--rse", required=True)
    p.add_argument("--scope", required=True)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--once", action="store_true", default=True)
    mode.add_argument("--periodic", action="store_true")
    p.add_argument("--poll", type=float, default=5.0)
    p.add_argument("--delay", type=float, default=60.0)
    p.add_argument("--schema", type=checksums.ChecksumSchema.parse)
    p.add_argument("--no-state", action="store_true", help="ignore and do not write the sidecar state file")
    p.set_defaults(func=cmd_ingest)

    for name, func in (("upload", cmd_upload), ("download", cmd_download)):
        p = sub.add_parser(name, help=f"{name} one DID")
        p.add_argument("--did", required=True)
        p.add_argument("--rse", required=True)
        _transfer_flags(p)
        if name == "upload":
            p.add_argument("--file", required=True)
            p.add_argument("--weights", help="davs=3,root=1")
            p.add_argument("--schema", type=checksums.ChecksumSchema.parse)
        else:
            p.add_argument("--dest")
        p.set_defaults(func=func)

    trial_parent = argparse.ArgumentParser(add_help=False)
    trial_parent.add_argument("--n", type=int, default=100)
    trial_parent.add_argument("--sleep", type=float, default=60.0)
    trial_parent.add_argument("--seed", type=int)
    trial_parent.add_argument("--davs", choices=("on", "off"), default="off")
    trial_parent.add_argument("--weights", default="davs=3,root=1")
    trial_parent.add_argument("--upload-policy", type=transfer.Mode.parse)
    trial_parent.add_argument("--download-policy", type=transfer.Mode.parse)
    trial_parent.add_argument("--input-bytes", type=int, default=64 * 1024)
    trial_parent.add_argument("--token-ttl", type=float, default=transfer.DEFAULT_TOKEN_TTL)
    trial_parent.add_argument("--idle", type=float, default=0.0, help="idle gap between process and push")
    trial_parent.add_argument("--refresh", action="store_true", help="refresh an expired token")
    trial_parent.add_argument("--workdir")
    trial_parent.add_argument("--log")
    trial_parent.add_argument("--json", action="store_true")

    sub.add_parser("trial", parents=[trial_parent], help="repeated pull-process-push").set_defaults(func=cmd_trial)

    demo = sub.add_parser("demo", help="demo workflows").add_subparsers(dest="demo", required=True)
    demo_parent = argparse.ArgumentParser(add_help=False)
    demo_parent.add_argument("--rse", required=True)
    demo_parent.add_argument("--scope", required=True)
    demo_parent.add_argument("--workdir", default=".")
    demo_parent.add_argument("--refresh", action="store_true")
    _transfer_flags(demo_parent)
    p = demo.add_parser("roundtrip", parents=[demo_parent])
    p.add_argument("--file", required=True)
    p.set_defaults(func=cmd_demo_roundtrip)
    p = demo.add_parser("produce", parents=[demo_parent])
    p.add_argument("--period", type=float, default=300.0)
    p.add_argument("--iterations", type=int, default=1)
    p.add_argument("--tag", default="sim")
    p.set_defaults(func=cmd_demo_produce)
    p = demo.add_parser("pull-process", parents=[demo_parent])
    p.add_argument("--input-did", required=True)
    p.set_defaults(func=cmd_demo_pull_process)
    demo.add_parser("trial", parents=[trial_parent]).set_defaults(func=cmd_trial)

    cat = sub.add_parser("catalog", help="catalog service").add_subparsers(dest="catalog_cmd", required=True)
    p = cat.add_parser("serve")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--journal")
    p.set_defaults(func=cmd_catalog_serve)
    p = cat.add_parser("create-rse")
    p.add_argument("--name", required=True)
    p.add_argument("--base-path", required=True)
    p.add_argument("--protocols", default="davs:1:3,root:2:1")
    p.set_defaults(func=cmd_catalog_create_rse)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE if exc.code else OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ConfigError, replay.ReplayError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE


if __name__ == "__main__":
    sys.exit(main())
