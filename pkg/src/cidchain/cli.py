"""Command line entry point: ``cidchain <command> ...``.

Exit codes: 0 success, 1 per-file failures (or tampered/unavailable
blocks), 2 fatal configuration or backend error.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path
from typing import Any, Optional

from cidchain import lightchain
from cidchain.cas import BackendUnreachable, CasError, RemoteStore
from cidchain.ledger import IndexOutOfRange, Ledger, LedgerError
from cidchain.lightchain import ChainError, Verdict, short_cid
from cidchain._journal import JournalCorrupt
from cidchain.metrics import PsutilProbe, ReportSchema, write_report
from cidchain.pipeline import (
    GeneratorConfig, Pipeline, PipelineConfig, bench, export_chain, gen_files, load_config, run_pipeline,
    table8_row,
)
from cidchain.watcher import WatchRootMissing, format_file_size

log = logging.getLogger("cidchain")

EXIT_OK, EXIT_FAILURES, EXIT_FATAL = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file; flags override its values")
    p.add_argument("--state-dir", type=Path, help="directory for ledger/chain journals and the local store")
    p.add_argument("--store-dir", type=Path, help="local CAS root (default: <state-dir>/store)")
    p.add_argument("--report-dir", type=Path)
    p.add_argument("--backend", choices=("local", "remote"))
    p.add_argument("--api-url")
    p.add_argument("--gateway-url")
    p.add_argument("--read-via-gateway", action="store_true", default=None)
    p.add_argument("--register", help="comma-separated subset of ledger,lightchain")
    p.add_argument("--user", dest="user_address", help="0x-prefixed 40-hex user address")
    p.add_argument("--tdp", type=float, dest="tdp_watts")
    p.add_argument("--probe", choices=("psutil", "none"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cidchain", description="Upload files to content-addressed storage and register their CIDs.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate dummy files with increasing gaps")
    p.add_argument("start_mb", type=int, nargs="?", default=5)
    p.add_argument("gap_mb", type=int, nargs="?", default=5)
    p.add_argument("max_mb", type=int, nargs="?", default=550)
    p.add_argument("--out", type=Path, default=Path("generated_files"))
    p.add_argument("--fill", choices=("zeros", "random"), default="zeros")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("watch", help="watch a directory and upload+register new files")
    _common(p)
    p.add_argument("root_dir", type=Path, nargs="?")
    p.add_argument("--interval", type=float, dest="scan_interval_s")
    p.add_argument("--stop-after", type=float, dest="stop_after_s", help="seconds; 0 = until interrupted")

    p = sub.add_parser("upload", help="upload and register the given files")
    _common(p)
    p.add_argument("files", type=Path, nargs="+")

    p = sub.add_parser("retrieve", help="fetch a user's file by ledger index")
    _common(p)
    p.add_argument("index", type=int)
    p.add_argument("--out", type=Path, help="write the content here")

    p = sub.add_parser("chain", help="lightchain commands")
    chain_sub = p.add_subparsers(dest="chain_command", required=True)
    for name, help_ in (("verify", "re-fetch every block and compare hashes"),
                        ("show", "print the chain as a table")):
        cp = chain_sub.add_parser(name, help=help_)
        _common(cp)
        cp.add_argument("--csv", type=Path, help="also write the table12 CSV here")

    p = sub.add_parser("ledger", help="ledger commands")
    ledger_sub = p.add_subparsers(dest="ledger_command", required=True)
    lp = ledger_sub.add_parser("show", help="print receipts and per-user records")
    _common(lp)
    lp.add_argument("--csv", type=Path, help="also write the table8 CSV here")

    p = sub.add_parser("bench", help="desk-scale experiment emitting the table CSVs")
    _common(p)
    p.add_argument("sizes", type=float, nargs="+", help="file sizes in MiB")
    p.add_argument("--out", type=Path, default=Path("bench"))
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--fill", choices=("zeros", "random"), default="zeros")
    return parser


def _config(args: argparse.Namespace) -> tuple[PipelineConfig, dict[str, Any]]:
    overrides: dict[str, Any] = {}
    for key in ("state_dir", "store_dir", "report_dir", "backend", "api_url", "gateway_url",
                "read_via_gateway", "user_address", "tdp_watts", "probe"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value) if isinstance(value, Path) else value
    if getattr(args, "register", None):
        overrides["register_on"] = [t.strip() for t in args.register.split(",") if t.strip()]
    if getattr(args, "root_dir", None) is not None:
        overrides["watch.root_dir"] = str(args.root_dir)
    if getattr(args, "scan_interval_s", None) is not None:
        overrides["watch.scan_interval_s"] = args.scan_interval_s
    if getattr(args, "stop_after_s", None) is not None:
        overrides["watch.stop_after_s"] = args.stop_after_s or None
    cfg = load_config(args.config, overrides)
    echo = {"command": args.command, "config_file": str(args.config) if args.config else None,
            "overrides": overrides, **cfg.to_dict()}
    return cfg, echo


def _check_backend(cfg: PipelineConfig) -> None:
    if cfg.backend == "remote":
        RemoteStore(cfg.api_url, cfg.gateway_url).ping()


def cmd_gen(args) -> int:
    files = gen_files(GeneratorConfig(args.start_mb, args.gap_mb, args.max_mb, args.out, args.fill, args.seed))
    for path, size in files:
        print(f"Created {path.name} of size {size} MB")
    print(f"{len(files)} files in {args.out}")
    return EXIT_OK


def cmd_watch(args) -> int:
    cfg, echo = _config(args)
    if not cfg.watch.root_dir.is_dir():
        raise WatchRootMissing(f"watch root {cfg.watch.root_dir} does not exist")
    _check_backend(cfg)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    print("Watching for file changes...")
    report = run_pipeline(cfg, stop=stop, config_echo=echo)
    for f in report.files:
        _print_result(f)
    print(f"{len(report.files)} files processed, {len(report.failures)} failures; "
          f"report at {report.report_paths['run_report']}")
    return EXIT_FAILURES if report.failures else EXIT_OK


def _print_result(f) -> None:
    if f.error:
        print(f"FAIL {f.path}: {f.error}")
        return
    line = f"{f.path.name}: CID {f.cid}, {format_file_size(f.size_bytes)}, {f.metrics.upload_time_s:.3f} s"
    if f.receipt:
        line += f", block {f.receipt.block_number} tx {f.receipt.tx_hash[:12]}..."
    if f.block:
        line += f", chain #{f.block.index}"
    if f.discrepancy:
        line += f" [DISCREPANCY: {f.discrepancy}]"
    print(line)


def cmd_upload(args) -> int:
    cfg, echo = _config(args)
    _check_backend(cfg)
    pipe = Pipeline(cfg, recover=True)
    results = [pipe.process_file(path) for path in args.files]
    for f in results:
        _print_result(f)
    pipe.write_reports(results, echo)
    return EXIT_FAILURES if any(not f.ok for f in results) else EXIT_OK


def cmd_retrieve(args) -> int:
    cfg, _ = _config(args)
    _check_backend(cfg)
    try:
        r = Pipeline(cfg, probe=None).retrieve_by_index(cfg.user_address, args.index)
    except IndexOutOfRange as exc:
        print(f"cidchain: {exc}", file=sys.stderr)
        return EXIT_FAILURES
    print(f"CID {r.cid}: {r.verdict.value} (lookup {r.lookup_time_s * 1000:.2f} ms, "
          f"fetch {'-' if r.fetch_time_s is None else f'{r.fetch_time_s * 1000:.2f} ms'})")
    if r.content is not None and args.out:
        args.out.write_bytes(r.content)
        print(f"Saved to: {args.out}")
    return EXIT_OK if r.verdict.value in ("Verified", "Unchecked") else EXIT_FAILURES


def cmd_chain(args) -> int:
    cfg, _ = _config(args)
    _check_backend(cfg)
    pipe = Pipeline(cfg, probe=None)
    chain = lightchain.load(cfg.chain_path)
    if args.chain_command == "verify":
        verdicts = chain.verify_chain(pipe.cas)
        for v in verdicts:
            print(f"Block {v.index} {short_cid(v.cid)}: {v.verdict.value}")
        bad = [v for v in verdicts if v.verdict is not Verdict.VERIFIED]
        print(f"{len(verdicts)} blocks checked, {len(bad)} not verified")
        code = EXIT_FAILURES if bad else EXIT_OK
    else:
        print(f"{'Block':>5}  {'CID':<18}  {'Timestamp (ms)':>14}  {'Data Hash':<16}  Block Hash")
        for b in chain:
            print(f"{b.index:>5}  {short_cid(b.cid) or '-':<18}  {b.timestamp_ms:>14}  "
                  f"{b.data_hash[:10] + '...':<16}  {b.block_hash[:10]}...")
        code = EXIT_OK
    if args.csv:
        export_chain(chain, pipe.cas, args.csv)
    return code


def cmd_ledger(args) -> int:
    cfg, _ = _config(args)
    ledger = Ledger.open(cfg.ledger_path)
    print(f"{'Block':>6}  {'Op':<10}  {'Gas':>8}  {'TxCost':>8}  {'User':<44}  Tx Hash")
    for r in ledger.receipts:
        print(f"{r.block_number:>6}  {r.op:<10}  {r.gas_used:>8}  {r.tx_cost_units:>8}  {r.user:<44}  {r.tx_hash[:18]}...")
    for user in ledger.users():
        print(f"{user}: {ledger.get_data_count(user)} records")
        for i, rec in enumerate(ledger.records(user)):
            print(f"  [{i}] {rec.ipfs_hash} at {rec.timestamp} ms (store {rec.store_time_ms} ms)")
    if args.csv:
        rows = []
        for user in ledger.users():
            for i, rec in enumerate(ledger.records(user)):
                rows.append(table8_row(ledger.receipt_for(user, i), rec.ipfs_hash, None))
        write_report(rows, ReportSchema.LEDGER_TABLE8, args.csv)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg, _ = _config(args)
    _check_backend(cfg)
    probe = None
    if cfg.probe == "psutil":
        probe = PsutilProbe()
    result = bench(args.sizes, cfg.backend, args.out, repeats=args.repeats, fill=args.fill,
                   probe=probe, tdp_watts=cfg.tdp_watts, user=cfg.user_address)
    for name, path in sorted(result.paths.items()):
        print(f"{name}: {path}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen, "watch": cmd_watch, "upload": cmd_upload, "retrieve": cmd_retrieve,
    "chain": cmd_chain, "ledger": cmd_ledger, "bench": cmd_bench,
}


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (BackendUnreachable, WatchRootMissing, JournalCorrupt, ChainError, LedgerError,
            ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"cidchain: error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except CasError as exc:
        print(f"cidchain: storage error: {exc}", file=sys.stderr)
        return EXIT_FAILURES


if __name__ == "__main__":
    sys.exit(main())
