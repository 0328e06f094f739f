"""Swap-event decoding for UniV2-style, UniV3-style, Algebra and Balancer V2 pools."""

from __future__ import annotations

import enum
import json
import logging
import os
import tempfile
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

from Crypto.Hash import keccak

from .model import Address, RawLog, RawTransaction, TokenAmount

log = logging.getLogger(__name__)

WORD = 32
INT256_MIN = -(1 << 255)
INT256_MAX = (1 << 255) - 1
UINT256_MAX = (1 << 256) - 1

V2_SWAP_SIGNATURE = "Swap(address,uint256,uint256,uint256,uint256,address)"
V3_SWAP_SIGNATURE = "Swap(address,address,int256,int256,uint160,uint128,int24)"
ALGEBRA_SWAP_SIGNATURE = "Swap(address,address,int256,int256,uint160,uint128,int24)"
BALANCER_SWAP_SIGNATURE = "Swap(bytes32,address,address,uint256,uint256)"

# Balancer V2 Vault; same deployment address across EVM chains. Overridable per pool.
BALANCER_VAULT = Address("0xba12222222228d8ba445958a75a0704d566bf2c8")


def keccak256(data: bytes) -> bytes:
    return keccak.new(data=data, digest_bits=256).digest()


def event_topic(signature: str) -> bytes:
    return keccak256(signature.encode("ascii"))


def selector(signature: str) -> bytes:
    return keccak256(signature.encode("ascii"))[:4]


class Protocol(str, enum.Enum):
    UNIV2 = "UniV2"
    UNIV3 = "UniV3"
    ALGEBRA = "Algebra"
    BALANCER_V2 = "BalancerV2"


V2_SWAP_TOPIC = event_topic(V2_SWAP_SIGNATURE)
V3_SWAP_TOPIC = event_topic(V3_SWAP_SIGNATURE)
ALGEBRA_SWAP_TOPIC = event_topic(ALGEBRA_SWAP_SIGNATURE)
BALANCER_SWAP_TOPIC = event_topic(BALANCER_SWAP_SIGNATURE)

# Algebra shares the V3 event shape and therefore its topic; classify_log reports
# the V3 family and the pool registry decides which of the two a pool belongs to.
_TOPIC_TAGS = {
    V2_SWAP_TOPIC: Protocol.UNIV2,
    V3_SWAP_TOPIC: Protocol.UNIV3,
    BALANCER_SWAP_TOPIC: Protocol.BALANCER_V2,
}
if ALGEBRA_SWAP_TOPIC not in _TOPIC_TAGS:
    _TOPIC_TAGS[ALGEBRA_SWAP_TOPIC] = Protocol.ALGEBRA

_V3_FAMILY = {Protocol.UNIV3, Protocol.ALGEBRA}


class DecodeFailure(Exception):
    pass


class MalformedSwap(DecodeFailure):
    pass


class AmbiguousSwap(DecodeFailure):
    pass


class UnknownPool(DecodeFailure):
    pass


@dataclass(frozen=True)
class PoolMeta:
    pool: Address
    protocol: Protocol
    tokens: tuple[Address, ...]
    decimals: tuple[int, ...] = ()
    pool_id: Optional[bytes] = None  # Balancer only
    vault: Optional[Address] = None  # Balancer only

    def __post_init__(self):
        if len(self.tokens) < 2 or len(set(self.tokens)) != len(self.tokens):
            raise ValueError(f"pool {self.pool}: needs at least two distinct tokens")
        if self.decimals and len(self.decimals) != len(self.tokens):
            raise ValueError(f"pool {self.pool}: decimals do not match tokens")
        if self.protocol is not Protocol.BALANCER_V2 and len(self.tokens) != 2:
            raise ValueError(f"pool {self.pool}: pair pools have exactly two tokens")

    @property
    def token0(self) -> Address:
        return self.tokens[0]

    @property
    def token1(self) -> Address:
        return self.tokens[1]

    def decimals_of(self, token: Address) -> int:
        if not self.decimals:
            return 18
        return self.decimals[self.tokens.index(token)]

    def to_json(self) -> dict:
        obj = {
            "protocol": self.protocol.value,
            "tokens": list(self.tokens),
            "decimals": list(self.decimals),
        }
        if self.pool_id is not None:
            obj["pool_id"] = "0x" + self.pool_id.hex()
        if self.vault is not None:
            obj["vault"] = str(self.vault)
        return obj

    @classmethod
    def from_json(cls, pool: str, obj: Mapping) -> "PoolMeta":
        pid = obj.get("pool_id")
        return cls(
            pool=Address(pool),
            protocol=Protocol(obj["protocol"]),
            tokens=tuple(Address(t) for t in obj["tokens"]),
            decimals=tuple(int(d) for d in obj.get("decimals", ())),
            pool_id=bytes.fromhex(pid[2:]) if pid else None,
            vault=Address(obj["vault"]) if obj.get("vault") else None,
        )


@dataclass(frozen=True)
class SwapEvent:
    pool: Address
    protocol: Protocol
    token_in: Address
    token_out: Address
    amount_in: TokenAmount
    amount_out: TokenAmount
    recipient: Optional[Address]
    log_index: int
    tx_hash: Optional[str] = None

    def __post_init__(self):
        if self.token_in == self.token_out:
            raise MalformedSwap("token_in equals token_out")
        if self.amount_in.raw < 0 or self.amount_out.raw < 0:
            raise MalformedSwap("swap amounts are non-negative")
        if self.amount_in.raw == 0 and self.amount_out.raw == 0:
            raise MalformedSwap("swap moves no tokens")


@dataclass
class Diagnostics:
    """Counts of swap-shaped logs that could not be turned into swap legs."""

    skipped: Counter = field(default_factory=Counter)
    decoded: int = 0

    def record(self, kind: str, detail: str) -> None:
        self.skipped[kind] += 1
        log.debug("skipped swap leg (%s): %s", kind, detail)

    @property
    def total_skipped(self) -> int:
        return sum(self.skipped.values())


def _words(data: bytes, count: int, what: str) -> list[bytes]:
    if len(data) != count * WORD:
        raise MalformedSwap(f"{what}: data is {len(data)} bytes, expected {count * WORD}")
    return [data[i:i + WORD] for i in range(0, len(data), WORD)]


def _uint(word: bytes) -> int:
    return int.from_bytes(word, "big")


def _int(word: bytes) -> int:
    return int.from_bytes(word, "big", signed=True)


def classify_log(lg: RawLog) -> Optional[Protocol]:
    if not lg.topics:
        return None
    return _TOPIC_TAGS.get(lg.topics[0])


def decode_v2_swap(lg: RawLog, meta: PoolMeta, tx_hash: Optional[str] = None) -> SwapEvent:
    if meta.protocol is not Protocol.UNIV2:
        raise MalformedSwap(f"pool {meta.pool} is {meta.protocol.value}, not UniV2")
    if len(lg.topics) != 3:
        raise MalformedSwap("UniV2 Swap carries 3 topics")
    in0, in1, out0, out1 = map(_uint, _words(lg.data, 4, "UniV2 Swap"))
    if in0 == in1 == out0 == out1 == 0:
        raise MalformedSwap("all four amounts are zero")
    if in0 > 0 and in1 > 0:
        raise AmbiguousSwap("both In amounts positive")
    if out0 > 0 and out1 > 0:
        raise AmbiguousSwap("both Out amounts positive")
    t0, t1 = meta.tokens
    if in0 or in1:
        token_in, amount_in = (t0, in0) if in0 else (t1, in1)
        token_out = t1 if token_in == t0 else t0
        amount_out = out0 if token_out == t0 else out1
        if (out0 if token_in == t0 else out1) > 0:
            raise MalformedSwap("token paid in and taken out of the same side")
    else:
        token_out, amount_out = (t0, out0) if out0 else (t1, out1)
        token_in, amount_in = (t1 if token_out == t0 else t0), 0
    return SwapEvent(
        pool=lg.emitter,
        protocol=Protocol.UNIV2,
        token_in=token_in,
        token_out=token_out,
        amount_in=TokenAmount(amount_in, meta.decimals_of(token_in)),
        amount_out=TokenAmount(amount_out, meta.decimals_of(token_out)),
        recipient=Address.from_word(lg.topics[2]),
        log_index=lg.log_index,
        tx_hash=tx_hash,
    )


def _decode_signed_pair(lg: RawLog, meta: PoolMeta, protocol: Protocol, tx_hash) -> SwapEvent:
    if meta.protocol is not protocol:
        raise MalformedSwap(f"pool {meta.pool} is {meta.protocol.value}, not {protocol.value}")
    if len(lg.topics) != 3:
        raise MalformedSwap(f"{protocol.value} Swap carries 3 topics")
    words = _words(lg.data, 5, f"{protocol.value} Swap")
    amount0, amount1 = _int(words[0]), _int(words[1])
    if amount0 == 0 and amount1 == 0:
        raise MalformedSwap("both amounts zero")
    if (amount0 > 0 and amount1 > 0) or (amount0 < 0 and amount1 < 0):
        raise MalformedSwap("both amounts have the same sign")
    t0, t1 = meta.tokens
    # Positive = paid into the pool by the taker; negative = paid out of the pool.
    if amount0 > 0 or amount1 < 0:
        token_in, token_out, amount_in, amount_out = t0, t1, amount0, -amount1
    else:
        token_in, token_out, amount_in, amount_out = t1, t0, amount1, -amount0
    return SwapEvent(
        pool=lg.emitter,
        protocol=protocol,
        token_in=token_in,
        token_out=token_out,
        amount_in=TokenAmount(amount_in, meta.decimals_of(token_in)),
        amount_out=TokenAmount(amount_out, meta.decimals_of(token_out)),
        recipient=Address.from_word(lg.topics[2]),
        log_index=lg.log_index,
        tx_hash=tx_hash,
    )


def decode_v3_swap(lg: RawLog, meta: PoolMeta, tx_hash: Optional[str] = None) -> SwapEvent:
    return _decode_signed_pair(lg, meta, Protocol.UNIV3, tx_hash)


def decode_algebra_swap(lg: RawLog, meta: PoolMeta, tx_hash: Optional[str] = None) -> SwapEvent:
    return _decode_signed_pair(lg, meta, Protocol.ALGEBRA, tx_hash)


def decode_balancer_swap(lg: RawLog, meta: Optional[PoolMeta] = None,
                         tx_hash: Optional[str] = None) -> SwapEvent:
    """Decode a Vault ``Swap``; the pool is the first 20 bytes of ``poolId``.

    ``meta`` only supplies token decimals; without it amounts default to 18.
    """
    if len(lg.topics) != 4:
        raise MalformedSwap("Balancer Swap carries 4 topics")
    pool_id = lg.topics[1]
    token_in = Address.from_word(lg.topics[2])
    token_out = Address.from_word(lg.topics[3])
    amount_in, amount_out = map(_uint, _words(lg.data, 2, "Balancer Swap"))
    if amount_in == 0 and amount_out == 0:
        raise MalformedSwap("both amounts zero")
    if token_in == token_out:
        raise MalformedSwap("tokenIn equals tokenOut")

    def decimals(token):
        if meta is not None and token in meta.tokens and meta.decimals:
            return meta.decimals_of(token)
        return 18

    return SwapEvent(
        pool=Address(pool_id[:20]),
        protocol=Protocol.BALANCER_V2,
        token_in=token_in,
        token_out=token_out,
        amount_in=TokenAmount(amount_in, decimals(token_in)),
        amount_out=TokenAmount(amount_out, decimals(token_out)),
        recipient=None,
        log_index=lg.log_index,
        tx_hash=tx_hash,
    )


# -- pool metadata registry ----------------------------------------------------

TOKEN0 = selector("token0()")
TOKEN1 = selector("token1()")
DECIMALS = selector("decimals()")
SLOT0 = selector("slot0()")
GLOBAL_STATE = selector("globalState()")
GET_POOL_TOKENS = selector("getPoolTokens(bytes32)")


def _abi_address(ret: bytes) -> Address:
    if len(ret) < WORD:
        raise UnknownPool("short return data")
    return Address.from_word(ret[:WORD])


def _abi_address_array(ret: bytes, head_slot: int) -> list[Address]:
    """Decode a dynamic ``address[]`` whose offset sits in head word ``head_slot``."""
    offset = _uint(ret[head_slot * WORD:(head_slot + 1) * WORD])
    length = _uint(ret[offset:offset + WORD])
    start = offset + WORD
    if start + length * WORD > len(ret):
        raise UnknownPool("truncated address array")
    return [Address.from_word(ret[start + i * WORD:start + (i + 1) * WORD]) for i in range(length)]


class PoolRegistry:
    """Read-mostly pool metadata cache, optionally persisted as JSON keyed by pool address.

    Misses are resolved on-chain (when a chain client is attached) with at most
    one in-flight discovery per pool.
    """

    def __init__(self, pools: Optional[Mapping[Address, PoolMeta]] = None,
                 path: "str | Path | None" = None, chain=None, block: "int | str" = "latest"):
        self._pools: dict[Address, PoolMeta] = dict(pools or {})
        self._failed: set[Address] = set()
        self.path = Path(path) if path else None
        self.chain = chain
        self.block = block
        self._lock = threading.Lock()
        self._pool_locks: dict[Address, threading.Lock] = {}

    @classmethod
    def load(cls, path: "str | Path", chain=None, create: bool = False) -> "PoolRegistry":
        path = Path(path)
        if not path.exists():
            if create:
                return cls(path=path, chain=chain)
            raise FileNotFoundError(path)
        raw = json.loads(path.read_text())
        pools = {Address(k): PoolMeta.from_json(k, v) for k, v in raw.items()}
        return cls(pools, path=path, chain=chain)

    def save(self, path: "str | Path | None" = None) -> None:
        path = Path(path or self.path)
        with self._lock:
            body = {str(k): v.to_json() for k, v in sorted(self._pools.items())}
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(body, fh, indent=1, sort_keys=True)
        os.replace(tmp, path)

    def add(self, meta: PoolMeta) -> None:
        with self._lock:
            self._pools[meta.pool] = meta

    def get(self, pool: Address) -> Optional[PoolMeta]:
        return self._pools.get(pool)

    def metas(self) -> list[PoolMeta]:
        with self._lock:
            return [self._pools[k] for k in sorted(self._pools)]

    def __contains__(self, pool) -> bool:
        return pool in self._pools

    def __len__(self) -> int:
        return len(self._pools)

    def resolve(self, pool: Address, family: Protocol, pool_id: Optional[bytes] = None,
                vault: Optional[Address] = None) -> PoolMeta:
        return resolve_pool_meta(pool, self, self.chain, family, pool_id, vault)

    def _pool_lock(self, pool: Address) -> threading.Lock:
        with self._lock:
            return self._pool_locks.setdefault(pool, threading.Lock())


def _call(chain, to: Address, data: bytes, block) -> bytes:
    from .ingest import IngestError

    try:
        return chain.call_contract(to, data, block)
    except IngestError as exc:
        raise UnknownPool(f"call to {to} failed: {exc}") from exc


def _token_decimals(chain, token: Address, block) -> int:
    try:
        return _uint(_call(chain, token, DECIMALS, block)[:WORD])
    except UnknownPool:
        return 18


def resolve_pool_meta(pool: Address, registry: PoolRegistry, chain=None,
                      family: Protocol = Protocol.UNIV2, pool_id: Optional[bytes] = None,
                      vault: Optional[Address] = None) -> PoolMeta:
    meta = registry.get(pool)
    if meta is not None:
        return meta
    if chain is None or pool in registry._failed:
        raise UnknownPool(f"no metadata for pool {pool}")
    with registry._pool_lock(pool):
        meta = registry.get(pool)
        if meta is not None:
            return meta
        try:
            meta = _discover(pool, chain, registry.block, family, pool_id, vault)
        except UnknownPool:
            registry._failed.add(pool)
            raise
        registry.add(meta)
        if registry.path is not None:
            registry.save()
        return meta


def _discover(pool, chain, block, family, pool_id, vault) -> PoolMeta:
    if family is Protocol.BALANCER_V2:
        if pool_id is None:
            raise UnknownPool("Balancer pools need a poolId")
        vault = vault or BALANCER_VAULT
        ret = _call(chain, vault, GET_POOL_TOKENS + pool_id, block)
        tokens = _abi_address_array(ret, 0)
        decimals = tuple(_token_decimals(chain, t, block) for t in tokens)
        return PoolMeta(pool, Protocol.BALANCER_V2, tuple(tokens), decimals, pool_id, vault)
    t0 = _abi_address(_call(chain, pool, TOKEN0, block))
    t1 = _abi_address(_call(chain, pool, TOKEN1, block))
    protocol = family
    if family in _V3_FAMILY:
        try:
            _call(chain, pool, SLOT0, block)
            protocol = Protocol.UNIV3
        except UnknownPool:
            _call(chain, pool, GLOBAL_STATE, block)
            protocol = Protocol.ALGEBRA
    decimals = (_token_decimals(chain, t0, block), _token_decimals(chain, t1, block))
    return PoolMeta(pool, protocol, (t0, t1), decimals)


_DECODERS = {
    Protocol.UNIV2: decode_v2_swap,
    Protocol.UNIV3: decode_v3_swap,
    Protocol.ALGEBRA: decode_algebra_swap,
}


def decode_log(lg: RawLog, registry: PoolRegistry, tx_hash: Optional[str] = None) -> Optional[SwapEvent]:
    """Decode one log into a swap leg; None if it is not swap-shaped.

    Raises DecodeFailure subclasses for swap-shaped logs that cannot be decoded.
    """
    family = classify_log(lg)
    if family is None:
        return None
    if family is Protocol.BALANCER_V2:
        if len(lg.topics) != 4:
            raise MalformedSwap("Balancer Swap carries 4 topics")
        pool = Address(lg.topics[1][:20])
        meta = registry.get(pool)
        if meta is None and registry.chain is not None:
            meta = registry.resolve(pool, family, pool_id=lg.topics[1], vault=lg.emitter)
        if meta is not None and meta.protocol is not Protocol.BALANCER_V2:
            raise MalformedSwap(f"{pool} is registered as {meta.protocol.value}")
        return decode_balancer_swap(lg, meta, tx_hash)
    meta = registry.resolve(lg.emitter, family)
    if family in _V3_FAMILY and meta.protocol in _V3_FAMILY:
        return _DECODERS[meta.protocol](lg, meta, tx_hash)
    return _DECODERS[family](lg, meta, tx_hash)


def decode_transaction(tx: RawTransaction, registry: PoolRegistry,
                       diagnostics: Optional[Diagnostics] = None) -> list[SwapEvent]:
    """All decodable swap legs of a successful transaction, in log order."""
    if not tx.succeeded:
        return []
    swaps = []
    for lg in tx.logs:
        try:
            swap = decode_log(lg, registry, tx.hash)
        except DecodeFailure as exc:
            if diagnostics is not None:
                diagnostics.record(type(exc).__name__, f"{tx.hash} log {lg.log_index}: {exc}")
            continue
        if swap is not None:
            swaps.append(swap)
            if diagnostics is not None:
                diagnostics.decoded += 1
    return swaps
