"""Command-line entry point: scan, report, synth, verify.

Exit codes (sysexits-style):
  0   success
  2   partial scan (interrupted; checkpoint written, rerun to resume)
  64  usage or configuration error
  65  malformed input data
  66  input missing (file or block not found)
  69  RPC endpoint unavailable after retries
  74  I/O error
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Optional

from . import __version__
from .analytics import DEFAULT_BUCKET_DAYS, ExclusionList, UsdRateSeries, aggregate, render_rows
from .classify import ClassifierConfig, classify_block
from .decode import Diagnostics, PoolRegistry
from .ingest import (
    DEFAULT_CONFIRMATIONS,
    DEFAULT_PARALLELISM,
    DEFAULT_RETRIES,
    BlockNotFound,
    BlockTraversal,
    CheckpointError,
    DecodeError,
    FixtureSource,
    IngestError,
    RpcClient,
    TransportError,
    load_fixture,
)
from .model import Address, Classification
from .synth import SynthPlan, generate, oracle_label_ledger

log = logging.getLogger("atomarb")

EX_OK = 0
EX_PARTIAL = 2
EX_USAGE = 64
EX_DATAERR = 65
EX_NOINPUT = 66
EX_UNAVAILABLE = 69
EX_IOERR = 74

ENV_PREFIX = "ATOMARB_"

DEFAULTS = {
    "direction": "forward",
    "format": "csv",
    "bucket_days": DEFAULT_BUCKET_DAYS,
    "parallelism": DEFAULT_PARALLELISM,
    "retries": DEFAULT_RETRIES,
    "timeout": 30.0,
    "confirmations": DEFAULT_CONFIRMATIONS,
    "use_default_exclusions": True,
}

_INT_KEYS = {"from_block", "to_block", "bucket_days", "parallelism", "retries", "confirmations"}
_FLOAT_KEYS = {"timeout"}
_BOOL_KEYS = {"reset", "show_config", "use_default_exclusions"}
_SECRET_KEYS = {"auth_header"}


class ConfigError(Exception):
    pass


def _coerce(key: str, value):
    if value is None:
        return None
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        if key in _BOOL_KEYS and isinstance(value, str):
            return value.strip().lower() in ("1", "true", "yes", "on")
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    return value


def resolve_config(args: argparse.Namespace, environ=os.environ) -> dict:
    """defaults < config file < ATOMARB_* environment < command-line flags."""
    cfg = dict(DEFAULTS)
    path = getattr(args, "config", None) or environ.get(ENV_PREFIX + "CONFIG")
    if path:
        try:
            file_cfg = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        cfg.update({k.replace("-", "_"): v for k, v in file_cfg.items()})
        cfg["config"] = path
    flags = {k: v for k, v in vars(args).items() if k not in ("func",)}
    for key in flags:
        env = environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            cfg[key] = env
    for key, value in flags.items():
        if value is not None:
            cfg[key] = value
    return {k: _coerce(k, v) for k, v in cfg.items()}


def redacted(cfg: dict) -> dict:
    return {k: ("***" if k in _SECRET_KEYS and v else v) for k, v in sorted(cfg.items())}


def _opt(cfg: dict, key: str, default):
    value = cfg.get(key)
    return default if value is None else value


def _load_classifier(cfg: dict) -> ClassifierConfig:
    source = cfg.get("classifier")
    if source is None:
        raise ConfigError("no classifier config: pass --classifier PATH or set 'classifier' in --config")
    try:
        obj = source if isinstance(source, dict) else json.loads(Path(source).read_text())
        clf = ClassifierConfig.from_json(obj)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad classifier config: {exc}") from exc
    if cfg.get("fastlane_addresses"):
        clf = replace(clf, fastlane_addresses=frozenset(_read_addresses(cfg["fastlane_addresses"])))
    if cfg.get("searcher_identity"):
        try:
            clf = replace(clf, searcher_identity=cfg["searcher_identity"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return clf


def _read_addresses(path) -> list[Address]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read address list {path}: {exc}") from exc
    try:
        items = json.loads(text)
    except ValueError:
        items = [line.split("#")[0].strip() for line in text.splitlines()]
    try:
        return [Address(a) for a in items if a]
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_iso8601(text: str) -> int:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(text)
    except ValueError as exc:
        raise ConfigError(f"bad ISO-8601 timestamp {text!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


# -- scan -------------------------------------------------------------------------

def _prepare_output(out: Path, trav: BlockTraversal):
    """Open the output file, dropping lines written after the last committed block."""
    cp = trav.checkpoint
    if trav.resumed and cp.output_path:
        prev = Path(cp.output_path)
        if prev.exists() and prev.stat().st_size > cp.output_offset:
            with open(prev, "r+b") as fh:
                fh.truncate(cp.output_offset)
        if prev.resolve() == out.resolve():
            return open(out, "ab")
    return open(out, "wb")


def cmd_scan(cfg: dict) -> int:
    clf = _load_classifier(cfg)
    out = cfg.get("out")
    if not out:
        raise ConfigError("scan needs --out PATH")
    out = Path(out)
    fixture = cfg.get("fixture")
    if fixture:
        try:
            source = FixtureSource(fixture)
        except FileNotFoundError as exc:
            raise ConfigError(f"fixture not found: {fixture}") from exc
        chain = None
        numbers = source.block_numbers
        start = _opt(cfg, "from_block", numbers[0] if numbers else 0)
        end = _opt(cfg, "to_block", numbers[-1] if numbers else -1)
    else:
        if not cfg.get("rpc_url"):
            raise ConfigError("scan needs --fixture PATH or --rpc-url URL")
        source = RpcClient(cfg["rpc_url"], cfg.get("auth_header"), cfg["timeout"], cfg["retries"])
        chain = source
        if cfg.get("from_block") is None:
            raise ConfigError("RPC scans need --from-block")
        safe = source.block_number() - cfg["confirmations"]
        start = cfg["from_block"]
        end = _opt(cfg, "to_block", safe)
        if end > safe:
            raise ConfigError(f"--to-block {end} is within {cfg['confirmations']} blocks of the head")

    pools = cfg.get("pools")
    if pools:
        try:
            registry = PoolRegistry.load(pools, chain=chain, create=chain is not None)
        except FileNotFoundError as exc:
            raise ConfigError(f"pool registry not found: {pools}") from exc
    else:
        registry = PoolRegistry(chain=chain)

    if end < start:
        out.write_bytes(b"")
        log.info("empty range [%d, %d]", start, end)
        return EX_OK

    trav = BlockTraversal(source, start, end, cfg["direction"], cfg.get("checkpoint"),
                          reset=bool(cfg.get("reset")), parallelism=cfg["parallelism"],
                          fixture_mode=bool(fixture))
    diagnostics = Diagnostics()
    count = 0
    status = EX_OK
    with _prepare_output(out, trav) as fh:
        trav.mark_output(str(out), fh.tell())
        try:
            for block in trav:
                lines = [json.dumps(c.to_json(), separators=(",", ":")) + "\n"
                         for c in classify_block(block, registry, clf, diagnostics)]
                fh.write("".join(lines).encode("utf-8"))
                fh.flush()
                count += len(lines)
                trav.commit(block.number, str(out), fh.tell())
        except KeyboardInterrupt:
            log.warning("interrupted; checkpoint at block %d", trav.checkpoint.next_block)
            status = EX_PARTIAL
        except TransportError as exc:
            log.error("endpoint unavailable: %s (checkpoint at block %d)", exc, trav.checkpoint.next_block)
            status = EX_UNAVAILABLE
        except BlockNotFound as exc:
            log.error("%s (checkpoint at block %d)", exc, trav.checkpoint.next_block)
            status = EX_PARTIAL
    log.info("wrote %d classifications; %d swap legs decoded, skipped: %s",
             count, diagnostics.decoded, dict(diagnostics.skipped) or "none")
    return status


# -- report -------------------------------------------------------------------------

class InputLineError(Exception):
    pass


def read_classifications(path) -> list[Classification]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(Classification.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError, ZeroDivisionError) as exc:
                raise InputLineError(f"{path}:{lineno}: malformed classification: {exc}") from exc
    return out


def default_exclusions_path() -> Path:
    return Path(str(resources.files("atomarb") / "data" / "exclusions.json"))


def cmd_report(cfg: dict) -> int:
    source = cfg.get("classifications")
    if not source:
        raise ConfigError("report needs a classifications file")
    try:
        records = read_classifications(source)
    except FileNotFoundError:
        log.error("no such file: %s", source)
        return EX_NOINPUT
    except InputLineError as exc:
        log.error("%s", exc)
        return EX_DATAERR

    entries = {}
    paths = []
    if cfg.get("use_default_exclusions"):
        paths.append(default_exclusions_path())
    if cfg.get("exclusions"):
        paths.append(cfg["exclusions"])
    try:
        for p in paths:
            entries.update(ExclusionList.load(p).entries)
        rates = UsdRateSeries.load(cfg["usd_rates"]) if cfg.get("usd_rates") else None
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad exclusions or rate file: {exc}") from exc

    epoch = parse_iso8601(cfg["epoch_start"]) if cfg.get("epoch_start") else None
    if cfg["format"] not in ("csv", "json"):
        raise ConfigError("--format must be csv or json")
    rows = aggregate(records, ExclusionList(entries), rates, epoch, cfg["bucket_days"])
    text = render_rows(rows, cfg["format"])
    out = cfg.get("out")
    if out and out != "-":
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EX_OK


# -- synth / verify -------------------------------------------------------------------

def cmd_synth(cfg: dict) -> int:
    plan = SynthPlan.load(cfg["plan"]) if cfg.get("plan") else SynthPlan()
    out_dir = cfg.get("out_dir") or cfg.get("out")
    if not out_dir:
        raise ConfigError("synth needs an output directory")
    paths = generate(plan).write(out_dir)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EX_OK


def cmd_verify(cfg: dict) -> int:
    fixture = cfg.get("fixture")
    if not fixture:
        raise ConfigError("verify needs --fixture PATH")
    base = Path(fixture).parent
    truth_path = Path(cfg.get("ground_truth") or base / "ground_truth.json")
    pools_path = Path(cfg.get("pools") or base / "pools.json")
    if not cfg.get("classifier"):
        cfg = dict(cfg, classifier=str(base / "classifier.json"))
    clf = _load_classifier(cfg)
    try:
        truth = json.loads(truth_path.read_text())["transactions"]
        registry = PoolRegistry.load(pools_path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load verification inputs: {exc}") from exc
    oracle = oracle_label_ledger(fixture, pools_path, cfg["classifier"])

    total = 0
    mismatches = []
    seen = set()
    for block in load_fixture(fixture):
        for c in classify_block(block, registry, clf):
            total += 1
            seen.add(c.tx_hash)
            want = truth.get(c.tx_hash)
            got = (c.strategy.value, c.swap_count, str(c.profit))
            if want is None:
                mismatches.append((c.tx_hash, "missing from ground truth", got, None))
                continue
            expected = (want["strategy"], want["N"], want["profit"])
            if got != expected:
                mismatches.append((c.tx_hash, "ground truth", got, expected))
            o = oracle[c.tx_hash]
            if got != (o["strategy"], o["N"], o["profit"]):
                mismatches.append((c.tx_hash, "oracle", got, (o["strategy"], o["N"], o["profit"])))
    for h in sorted(set(truth) - seen):
        mismatches.append((h, "not in fixture", None, truth[h]["strategy"]))

    for h, what, got, want in mismatches[:50]:
        print(f"MISMATCH {h} vs {what}: pipeline={got} expected={want}")
    agree = total - len({m[0] for m in mismatches if m[2] is not None})
    print(f"{agree}/{total} transactions agree with ground truth and oracle")
    return EX_OK if not mismatches else 1


# -- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file (flat keys named like the flags)")
    common.add_argument("--show-config", action="store_true", default=None,
                        help="print the resolved config (secrets redacted) and exit")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(
        prog="atomarb",
        description="Detect and aggregate atomic-arbitrage transactions in EVM block data.",
        epilog=__doc__.split("\n\n", 1)[1] + "\nEvery flag can also be set through ATOMARB_<FLAG> "
               "(e.g. ATOMARB_RPC_URL).",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"atomarb {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    scan = sub.add_parser("scan", parents=[common], help="classify every transaction in a block range")
    scan.add_argument("--rpc-url")
    scan.add_argument("--auth-header", help="'Name: value' or a bare Authorization value")
    scan.add_argument("--timeout", type=float)
    scan.add_argument("--retries", type=int)
    scan.add_argument("--confirmations", type=int, help=f"stay this far below head (default {DEFAULT_CONFIRMATIONS})")
    scan.add_argument("--fixture", metavar="PATH", help="read blocks from a JSON-lines fixture instead of RPC")
    scan.add_argument("--from-block", type=int)
    scan.add_argument("--to-block", type=int)
    scan.add_argument("--direction", choices=("forward", "backward"))
    scan.add_argument("--out", metavar="PATH", help="classifications output (JSON lines)")
    scan.add_argument("--pools", metavar="PATH", help="pool metadata registry (JSON)")
    scan.add_argument("--classifier", metavar="PATH", help="classifier config (prices, FastLane set, policies)")
    scan.add_argument("--fastlane-addresses", metavar="PATH")
    scan.add_argument("--searcher-identity", choices=("from", "to"))
    scan.add_argument("--parallelism", type=int)
    scan.add_argument("--checkpoint", metavar="PATH")
    scan.add_argument("--reset", action="store_true", default=None, help="discard an existing checkpoint")
    scan.set_defaults(func=cmd_scan)

    report = sub.add_parser("report", parents=[common], help="aggregate classifications into time buckets")
    report.add_argument("classifications", nargs="?", metavar="CLASSIFICATIONS")
    report.add_argument("--exclusions", metavar="PATH")
    report.add_argument("--no-default-exclusions", dest="use_default_exclusions",
                        action="store_const", const=False, default=None)
    report.add_argument("--usd-rates", metavar="PATH")
    report.add_argument("--out", metavar="PATH", help="output file (default stdout)")
    report.add_argument("--format", choices=("csv", "json"))
    report.add_argument("--epoch-start", metavar="ISO8601")
    report.add_argument("--bucket-days", type=int)
    report.set_defaults(func=cmd_report)

    synth = sub.add_parser("synth", parents=[common], help="write a synthetic ledger with ground truth")
    synth.add_argument("out_dir", nargs="?", metavar="OUT_DIR")
    synth.add_argument("--plan", metavar="PATH")
    synth.set_defaults(func=cmd_synth)

    verify = sub.add_parser("verify", parents=[common], help="check the pipeline against a synthetic ledger")
    verify.add_argument("--fixture", metavar="PATH")
    verify.add_argument("--ground-truth", metavar="PATH")
    verify.add_argument("--pools", metavar="PATH")
    verify.add_argument("--classifier", metavar="PATH")
    verify.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[list] = None, environ=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EX_USAGE if exc.code not in (0, None) else EX_OK
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    func = args.func
    del args.verbose
    try:
        cfg = resolve_config(args, os.environ if environ is None else environ)
        if cfg.get("show_config"):
            cfg.pop("show_config")
            print(json.dumps(redacted(cfg), indent=1, sort_keys=True, default=str))
            return EX_OK
        return func(cfg)
    except ConfigError as exc:
        log.error("%s", exc)
        return EX_USAGE
    except CheckpointError as exc:
        log.error("%s", exc)
        return EX_USAGE
    except DecodeError as exc:
        log.error("%s", exc)
        return EX_DATAERR
    except IngestError as exc:
        log.error("%s", exc)
        return EX_UNAVAILABLE
    except OSError as exc:
        log.error("%s", exc)
        return EX_IOERR


if __name__ == "__main__":
    sys.exit(main())
