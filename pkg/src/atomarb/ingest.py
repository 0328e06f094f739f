"""Block ingestion: JSON-RPC client, JSON-lines fixtures, checkpointed traversal.

Fixture lines use the JSON-RPC field names and 0x-hex quantity encoding, with
receipt fields merged into each transaction object::

    {"number": "0x64", "timestamp": "0x...", "miner": "0x...",
     "transactions": [{"hash", "transactionIndex", "from", "to", "value",
                       "gasUsed", "effectiveGasPrice", "status",
                       "logs": [{"address", "topics", "data", "logIndex"}]}]}
"""

from __future__ import annotations

import json
import logging
import os
import random
import tempfile
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional

import requests

from .model import Address, RawBlock, RawLog, RawTransaction, normalize_hash

log = logging.getLogger(__name__)

DEFAULT_CONFIRMATIONS = 256
DEFAULT_PARALLELISM = 8
DEFAULT_RETRIES = 5


class IngestError(Exception):
    pass


class BlockNotFound(IngestError):
    pass


class TransportError(IngestError):
    """Network-level or server-side transient failure (retryable)."""


class DecodeError(IngestError):
    """Structurally malformed response or fixture line (never retried)."""


class RevertError(IngestError):
    """An eth_call executed but reverted."""


class CheckpointError(IngestError):
    pass


# -- hex codec ---------------------------------------------------------------

def to_quantity(value: int) -> str:
    if value < 0:
        raise ValueError("quantities are non-negative")
    return hex(value)


def from_quantity(text: str) -> int:
    if not isinstance(text, str) or not text.startswith("0x"):
        raise DecodeError(f"expected 0x-hex quantity, got {text!r}")
    return int(text, 16) if len(text) > 2 else 0


def to_data(value: bytes) -> str:
    return "0x" + value.hex()


def from_data(text: str) -> bytes:
    if not isinstance(text, str) or not text.startswith("0x"):
        raise DecodeError(f"expected 0x-hex data, got {text!r}")
    return bytes.fromhex(text[2:])


def log_to_json(lg: RawLog) -> dict:
    return {
        "address": str(lg.emitter),
        "topics": [to_data(t) for t in lg.topics],
        "data": to_data(lg.data),
        "logIndex": to_quantity(lg.log_index),
    }


def tx_to_json(tx: RawTransaction) -> dict:
    return {
        "hash": tx.hash,
        "transactionIndex": to_quantity(tx.index),
        "from": str(tx.sender),
        "to": None if tx.to is None else str(tx.to),
        "value": to_quantity(tx.value),
        "gasUsed": to_quantity(tx.gas_used),
        "effectiveGasPrice": to_quantity(tx.effective_gas_price),
        "status": to_quantity(tx.status),
        "logs": [log_to_json(lg) for lg in tx.logs],
    }


def block_to_json(block: RawBlock) -> dict:
    return {
        "number": to_quantity(block.number),
        "timestamp": to_quantity(block.timestamp),
        "miner": str(block.coinbase),
        "transactions": [tx_to_json(tx) for tx in block.transactions],
    }


def block_from_json(obj: dict) -> RawBlock:
    """Build a RawBlock from a fixture object (RPC block with merged receipts)."""
    try:
        txs = []
        for t in obj["transactions"]:
            logs = tuple(
                RawLog(
                    emitter=Address(lg["address"]),
                    topics=tuple(from_data(x) for x in lg["topics"]),
                    data=from_data(lg["data"]),
                    log_index=from_quantity(lg["logIndex"]),
                )
                for lg in t["logs"]
            )
            price = t.get("effectiveGasPrice") or t.get("gasPrice") or "0x0"
            txs.append(RawTransaction(
                hash=normalize_hash(t["hash"]),
                index=from_quantity(t["transactionIndex"]),
                sender=Address(t["from"]),
                to=None if t.get("to") is None else Address(t["to"]),
                value=from_quantity(t["value"]),
                gas_used=from_quantity(t["gasUsed"]),
                effective_gas_price=from_quantity(price),
                status=from_quantity(t["status"]),
                logs=logs,
            ))
        return RawBlock(
            number=from_quantity(obj["number"]),
            timestamp=from_quantity(obj["timestamp"]),
            coinbase=Address(obj["miner"]),
            transactions=tuple(txs),
        )
    except DecodeError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"malformed block object: {exc!r}") from exc


def merge_receipts(block: dict, receipts: list[dict]) -> dict:
    by_hash = {r["transactionHash"].lower(): r for r in receipts}
    merged = dict(block)
    txs = []
    for tx in block["transactions"]:
        if isinstance(tx, str):
            raise DecodeError("block fetched without full transaction objects")
        receipt = by_hash.get(tx["hash"].lower())
        if receipt is None:
            raise DecodeError(f"no receipt for transaction {tx['hash']}")
        tx = dict(tx)
        tx["gasUsed"] = receipt["gasUsed"]
        tx["effectiveGasPrice"] = receipt.get("effectiveGasPrice") or tx.get("gasPrice")
        tx["status"] = receipt.get("status", "0x1")
        tx["logs"] = sorted(receipt.get("logs", []), key=lambda lg: from_quantity(lg["logIndex"]))
        txs.append(tx)
    merged["transactions"] = txs
    return merged


# -- fixtures ----------------------------------------------------------------

def dump_block_line(block: RawBlock) -> str:
    return json.dumps(block_to_json(block), separators=(",", ":"))


def store_fixture(blocks: Iterable[RawBlock], path: "str | Path") -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for block in blocks:
            fh.write(dump_block_line(block))
            fh.write("\n")
            count += 1
    return count


def _parse_line(line: str, lineno: int, path) -> RawBlock:
    try:
        return block_from_json(json.loads(line))
    except (json.JSONDecodeError, DecodeError) as exc:
        raise DecodeError(f"{path}:{lineno}: {exc}") from exc


def load_fixture(path: "str | Path") -> Iterator[RawBlock]:
    """Stream blocks from a JSON-lines fixture; block numbers must be strictly monotone."""
    prev = None
    trend = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            block = _parse_line(line, lineno, path)
            if prev is not None:
                step = 1 if block.number > prev else -1 if block.number < prev else 0
                if step == 0 or (trend and step != trend):
                    raise DecodeError(f"{path}:{lineno}: block numbers not strictly monotone")
                trend = step
            prev = block.number
            yield block


class FixtureSource:
    """Random access to a fixture file by block number (byte-offset index)."""

    def __init__(self, path: "str | Path"):
        self.path = Path(path)
        self._offsets: dict[int, tuple[int, int]] = {}
        self._lock = threading.Lock()
        with open(self.path, "rb") as fh:
            offset = 0
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    try:
                        number = from_quantity(json.loads(line)["number"])
                    except (ValueError, KeyError, TypeError, DecodeError) as exc:
                        raise DecodeError(f"{self.path}:{lineno}: {exc}") from exc
                    self._offsets[number] = (offset, lineno)
                offset += len(line)

    @property
    def block_numbers(self) -> list[int]:
        return sorted(self._offsets)

    def head(self) -> int:
        if not self._offsets:
            raise BlockNotFound("empty fixture")
        return max(self._offsets)

    def fetch_block(self, number: int) -> RawBlock:
        try:
            offset, lineno = self._offsets[number]
        except KeyError:
            raise BlockNotFound(f"block {number} not in {self.path}") from None
        with open(self.path, "rb") as fh:
            fh.seek(offset)
            line = fh.readline().decode("utf-8")
        return _parse_line(line, lineno, self.path)

    def call_contract(self, to, calldata, block):
        raise TransportError("fixture source cannot execute contract calls")


# -- JSON-RPC ----------------------------------------------------------------

class RpcClient:
    """Minimal JSON-RPC client for archive-node block and receipt retrieval."""

    def __init__(self, url: str, auth_header: Optional[str] = None, timeout: float = 30.0,
                 retries: int = DEFAULT_RETRIES, backoff: float = 0.5,
                 session: Optional[requests.Session] = None):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.session = session or requests.Session()
        self.headers = {"Content-Type": "application/json"}
        if auth_header:
            name, _, value = auth_header.partition(":")
            if value:
                self.headers[name.strip()] = value.strip()
            else:
                self.headers["Authorization"] = auth_header.strip()
        self._ids = iter(range(1, 1 << 62))
        self._id_lock = threading.Lock()
        self._block_receipts: Optional[bool] = None

    def _next_id(self) -> int:
        with self._id_lock:
            return next(self._ids)

    def _post(self, payload):
        try:
            resp = self.session.post(self.url, json=payload, headers=self.headers, timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise DecodeError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise DecodeError(f"non-JSON response: {resp.text[:200]}") from exc

    def request(self, method: str, params: list) -> Any:
        payload = {"jsonrpc": "2.0", "id": self._next_id(), "method": method, "params": params}
        for attempt in range(self.retries):
            try:
                body = self._post(payload)
                if not isinstance(body, dict):
                    raise DecodeError(f"{method}: unexpected response shape")
                if "error" in body:
                    err = body["error"] or {}
                    code = err.get("code")
                    message = err.get("message", "")
                    if code == 3 or "revert" in message.lower():
                        raise RevertError(f"{method}: {message}")
                    if code in (-32603, -32005) or "timeout" in message.lower():
                        raise TransportError(f"{method}: {message}")
                    raise DecodeError(f"{method} failed ({code}): {message}")
                return body.get("result")
            except TransportError as exc:
                if attempt + 1 == self.retries:
                    raise
                delay = self.backoff * (2**attempt) * (1 + random.random() / 4)
                log.warning("%s attempt %d failed (%s); retrying in %.2fs", method, attempt + 1, exc, delay)
                time.sleep(delay)
        raise AssertionError("unreachable")

    def block_number(self) -> int:
        return from_quantity(self.request("eth_blockNumber", []))

    head = block_number

    def _supports_block_receipts(self, number: int) -> bool:
        if self._block_receipts is None:
            try:
                result = self.request("eth_getBlockReceipts", [to_quantity(number)])
                self._block_receipts = isinstance(result, list)
            except (DecodeError, RevertError):
                self._block_receipts = False
            log.info("eth_getBlockReceipts supported: %s", self._block_receipts)
        return self._block_receipts

    def fetch_block(self, number: int) -> RawBlock:
        block = self.request("eth_getBlockByNumber", [to_quantity(number), True])
        if block is None:
            raise BlockNotFound(f"block {number} beyond chain head")
        if not isinstance(block, dict) or "transactions" not in block:
            raise DecodeError(f"block {number}: malformed eth_getBlockByNumber result")
        if not block["transactions"]:
            receipts = []
        elif self._supports_block_receipts(number):
            receipts = self.request("eth_getBlockReceipts", [to_quantity(number)])
        else:
            receipts = [self.request("eth_getTransactionReceipt", [tx["hash"]]) for tx in block["transactions"]]
        if receipts is None or any(r is None for r in receipts):
            raise DecodeError(f"block {number}: missing receipts")
        try:
            return block_from_json(merge_receipts(block, receipts))
        except DecodeError as exc:
            raise DecodeError(f"block {number}: {exc}") from exc

    def call_contract(self, to: Address, calldata: bytes, block: "int | str" = "latest") -> bytes:
        tag = to_quantity(block) if isinstance(block, int) else block
        result = self.request("eth_call", [{"to": str(to), "data": to_data(calldata)}, tag])
        return from_data(result)


# -- checkpointed traversal ----------------------------------------------------

@dataclass
class ScanCheckpoint:
    next_block: int
    direction: str
    range_start: int
    range_end: int
    fixture_mode: bool = False
    output_path: Optional[str] = None
    output_offset: int = 0

    def __post_init__(self):
        if self.direction not in ("forward", "backward"):
            raise CheckpointError(f"bad direction {self.direction!r}")
        lo = self.range_start if self.direction == "forward" else self.range_start - 1
        hi = self.range_end + 1 if self.direction == "forward" else self.range_end
        if not lo <= self.next_block <= hi:
            raise CheckpointError(f"next_block {self.next_block} outside [{lo}, {hi}]")

    @property
    def done(self) -> bool:
        if self.direction == "forward":
            return self.next_block > self.range_end
        return self.next_block < self.range_start


def save_checkpoint(cp: ScanCheckpoint, path: "str | Path") -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(asdict(cp), fh, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: "str | Path") -> Optional[ScanCheckpoint]:
    path = Path(path)
    if not path.exists():
        return None
    try:
        return ScanCheckpoint(**json.loads(path.read_text()))
    except (ValueError, TypeError, CheckpointError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}; rerun with reset to start over") from exc


def block_range(start: int, end: int, direction: str) -> range:
    if direction == "forward":
        return range(start, end + 1)
    if direction == "backward":
        return range(end, start - 1, -1)
    raise ValueError(f"direction must be forward or backward, not {direction!r}")


class BlockTraversal:
    """Ordered, resumable iteration over a block range.

    Blocks are prefetched with up to ``parallelism`` requests in flight but are
    delivered strictly in range order. The caller marks a block as processed with
    :meth:`commit`; on restart, iteration resumes at the first uncommitted block.
    """

    def __init__(self, source, start: int, end: int, direction: str = "forward",
                 checkpoint_path: "str | Path | None" = None, reset: bool = False,
                 parallelism: int = DEFAULT_PARALLELISM, fixture_mode: bool = False):
        self.source = source
        self.start = start
        self.end = end
        self.direction = direction
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.parallelism = max(1, parallelism)
        self.fixture_mode = fixture_mode
        self.resumed = False
        first = start if direction == "forward" else end
        block_range(start, end, direction)  # validates direction
        self.checkpoint = ScanCheckpoint(first, direction, start, end, fixture_mode)
        if self.checkpoint_path is not None:
            if reset and self.checkpoint_path.exists():
                self.checkpoint_path.unlink()
            existing = load_checkpoint(self.checkpoint_path)
            if existing is not None:
                if (existing.range_start, existing.range_end, existing.direction) != (start, end, direction):
                    raise CheckpointError(
                        f"checkpoint {self.checkpoint_path} is for range "
                        f"[{existing.range_start},{existing.range_end}] {existing.direction}; "
                        "rerun with reset to discard it")
                self.checkpoint = existing
                self.resumed = True

    def pending(self) -> range:
        cp = self.checkpoint
        if self.direction == "forward":
            return range(cp.next_block, self.end + 1)
        return range(cp.next_block, self.start - 1, -1)

    def commit(self, number: int, output_path: Optional[str] = None, output_offset: int = 0) -> None:
        step = 1 if self.direction == "forward" else -1
        if number != self.checkpoint.next_block:
            raise CheckpointError(f"commit out of order: {number}, expected {self.checkpoint.next_block}")
        self.checkpoint.next_block = number + step
        self.checkpoint.output_path = output_path
        self.checkpoint.output_offset = output_offset
        if self.checkpoint_path is not None:
            save_checkpoint(self.checkpoint, self.checkpoint_path)

    def mark_output(self, output_path: str, output_offset: int) -> None:
        """Record where this run's output starts, so a crash before the first commit is recoverable."""
        self.checkpoint.output_path = output_path
        self.checkpoint.output_offset = output_offset
        if self.checkpoint_path is not None:
            save_checkpoint(self.checkpoint, self.checkpoint_path)

    def __iter__(self) -> Iterator[RawBlock]:
        numbers = iter(self.pending())
        if self.parallelism == 1:
            for n in numbers:
                yield self.source.fetch_block(n)
            return
        with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
            inflight: deque = deque()
            try:
                for n in numbers:
                    inflight.append(pool.submit(self.source.fetch_block, n))
                    if len(inflight) >= self.parallelism:
                        yield inflight.popleft().result()
                while inflight:
                    yield inflight.popleft().result()
            finally:
                for fut in inflight:
                    fut.cancel()


def traverse(source, start: int, end: int, direction: str = "forward",
             checkpoint_path: "str | Path | None" = None, reset: bool = False,
             parallelism: int = DEFAULT_PARALLELISM) -> Iterator[RawBlock]:
    """Yield each block of ``[start, end]`` once, checkpointing as the consumer advances.

    A block is committed when the consumer requests the next one (or the range
    ends), so a consumer that dies mid-block sees that block again on resume.
    """
    trav = BlockTraversal(source, start, end, direction, checkpoint_path, reset, parallelism)
    for block in trav:
        yield block
        trav.commit(block.number)


def confirmed_head(source, confirmations: int = DEFAULT_CONFIRMATIONS) -> int:
    return source.head() - confirmations
