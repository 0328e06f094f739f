"""Shared domain types and exact token arithmetic."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Mapping, Optional

WEI_PER_NATIVE = 10**18
MAX_DECIMALS = 36

_ADDRESS_RE = re.compile(r"^0x[0-9a-f]{40}$")
_HASH_RE = re.compile(r"^0x[0-9a-f]{64}$")


class Address(str):
    """20-byte account identifier, always stored as 0x-prefixed lowercase hex."""

    __slots__ = ()

    def __new__(cls, value: "str | bytes") -> "Address":
        if isinstance(value, Address):
            return value
        if isinstance(value, (bytes, bytearray)):
            if len(value) != 20:
                raise ValueError(f"address must be 20 bytes, got {len(value)}")
            return str.__new__(cls, "0x" + bytes(value).hex())
        text = value.lower()
        if not _ADDRESS_RE.match(text):
            raise ValueError(f"malformed address: {value!r}")
        return str.__new__(cls, text)

    @classmethod
    def from_word(cls, word: bytes) -> "Address":
        """Address right-aligned in a 32-byte ABI word (indexed topic)."""
        if len(word) != 32:
            raise ValueError("ABI word must be 32 bytes")
        return cls(word[12:])

    def to_bytes(self) -> bytes:
        return bytes.fromhex(self[2:])

    def to_word(self) -> bytes:
        return b"\x00" * 12 + self.to_bytes()


ZERO_ADDRESS = Address(b"\x00" * 20)


def normalize_hash(value: str) -> str:
    """Validate and lowercase a 32-byte hex identifier."""
    text = value.lower()
    if not _HASH_RE.match(text):
        raise ValueError(f"malformed 32-byte hash: {value!r}")
    return text


def render_amount(raw: int, decimals: int) -> str:
    """Exact decimal rendering of ``raw / 10**decimals``.

    >>> render_amount(3121000000000000000, 18)
    '3.121'
    """
    if not 0 <= decimals <= MAX_DECIMALS:
        raise ValueError(f"decimals out of range: {decimals}")
    sign = "-" if raw < 0 else ""
    whole, frac = divmod(abs(raw), 10**decimals)
    if frac == 0:
        return f"{sign}{whole}"
    digits = str(frac).rjust(decimals, "0").rstrip("0")
    return f"{sign}{whole}.{digits}"


def parse_amount(text: str, decimals: int) -> int:
    """Inverse of :func:`render_amount`; rejects values finer than ``decimals``."""
    text = text.strip()
    negative = text.startswith("-")
    body = text[1:] if negative else text
    whole, _, frac = body.partition(".")
    if not whole.isdigit() or (frac and not frac.isdigit()):
        raise ValueError(f"not a decimal amount: {text!r}")
    if len(frac.rstrip("0")) > decimals:
        raise ValueError(f"{text!r} has more than {decimals} fractional digits")
    raw = int(whole) * 10**decimals + int((frac or "0").ljust(decimals, "0")[:decimals] or 0)
    return -raw if negative else raw


@dataclass(frozen=True, order=True)
class TokenAmount:
    raw: int
    decimals: int = 18

    def __post_init__(self):
        if not 0 <= self.decimals <= MAX_DECIMALS:
            raise ValueError(f"decimals out of range: {self.decimals}")

    def _check(self, other: "TokenAmount") -> None:
        if other.decimals != self.decimals:
            raise ValueError("cannot combine amounts with different decimals")

    def __add__(self, other: "TokenAmount") -> "TokenAmount":
        self._check(other)
        return TokenAmount(self.raw + other.raw, self.decimals)

    def __sub__(self, other: "TokenAmount") -> "TokenAmount":
        self._check(other)
        return TokenAmount(self.raw - other.raw, self.decimals)

    def __neg__(self) -> "TokenAmount":
        return TokenAmount(-self.raw, self.decimals)

    def whole(self) -> Fraction:
        return Fraction(self.raw, 10**self.decimals)

    def __str__(self) -> str:
        return render_amount(self.raw, self.decimals)

    @classmethod
    def parse(cls, text: str, decimals: int = 18) -> "TokenAmount":
        return cls(parse_amount(text, decimals), decimals)


@dataclass(frozen=True)
class RawLog:
    emitter: Address
    topics: tuple[bytes, ...]
    data: bytes
    log_index: int

    def __post_init__(self):
        if len(self.topics) > 4:
            raise ValueError("a log carries at most 4 topics")
        if any(len(t) != 32 for t in self.topics):
            raise ValueError("topics must be 32-byte words")
        if self.log_index < 0:
            raise ValueError("log_index must be non-negative")


@dataclass(frozen=True)
class RawTransaction:
    hash: str
    index: int
    sender: Address
    to: Optional[Address]
    value: int  # wei
    gas_used: int
    effective_gas_price: int  # wei
    status: int  # 1 success, 0 failure
    logs: tuple[RawLog, ...] = ()

    def __post_init__(self):
        if self.gas_used < 0:
            raise ValueError("gas_used must be non-negative")
        indices = [log.log_index for log in self.logs]
        if indices != sorted(set(indices)):
            raise ValueError(f"tx {self.hash}: logs must be in strictly ascending log_index order")

    @property
    def succeeded(self) -> bool:
        return self.status == 1

    @property
    def native_value(self) -> TokenAmount:
        return TokenAmount(self.value, 18)


@dataclass(frozen=True)
class RawBlock:
    number: int
    timestamp: int
    coinbase: Address
    transactions: tuple[RawTransaction, ...] = ()

    def __post_init__(self):
        if self.number < 0:
            raise ValueError("block number must be non-negative")
        indices = [tx.index for tx in self.transactions]
        if indices != sorted(indices):
            raise ValueError(f"block {self.number}: transactions out of index order")


class DeltaVector(Mapping[Address, int]):
    """Signed net token amounts (raw units); zero entries are never stored."""

    __slots__ = ("_entries", "_hash")

    def __init__(self, entries: "Mapping[Address, int] | Iterable[tuple[Address, int]]" = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        acc: dict[Address, int] = {}
        for token, amount in items:
            token = Address(token)
            acc[token] = acc.get(token, 0) + int(amount)
        self._entries = {k: v for k, v in sorted(acc.items()) if v != 0}
        self._hash: Optional[int] = None

    def __getitem__(self, token: Address) -> int:
        return self._entries[token]

    def get(self, token, default=0):
        return self._entries.get(token, default)

    def __iter__(self) -> Iterator[Address]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other) -> bool:
        if isinstance(other, DeltaVector):
            return self._entries == other._entries
        if isinstance(other, Mapping):
            return self._entries == {k: v for k, v in other.items() if v != 0}
        return NotImplemented

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash(frozenset(self._entries.items()))
        return self._hash

    def __add__(self, other: "DeltaVector") -> "DeltaVector":
        return delta_add(self, other)

    def __neg__(self) -> "DeltaVector":
        return DeltaVector({k: -v for k, v in self._entries.items()})

    def __repr__(self) -> str:
        return f"DeltaVector({self._entries!r})"

    def to_json(self) -> dict[str, str]:
        return {token: str(amount) for token, amount in self._entries.items()}

    @classmethod
    def from_json(cls, obj: Mapping[str, str]) -> "DeltaVector":
        return cls({Address(k): int(v) for k, v in obj.items()})


def delta_add(a: DeltaVector, b: DeltaVector) -> DeltaVector:
    merged = dict(a.items())
    for token, amount in b.items():
        merged[token] = merged.get(token, 0) + amount
    return DeltaVector(merged)


@dataclass(frozen=True)
class PriceTable:
    """Prices per whole token, in a common currency (native coin by default)."""

    common_currency: Address
    prices: Mapping[Address, Fraction] = field(default_factory=dict)
    decimals: Mapping[Address, int] = field(default_factory=dict)
    native_price: Fraction = Fraction(1)

    def __post_init__(self):
        for token, price in self.prices.items():
            if price < 0:
                raise ValueError(f"negative price for {token}")
        if self.prices.get(self.common_currency, Fraction(1)) != 1:
            raise ValueError("the common currency must be priced at exactly 1")
        if self.native_price < 0:
            raise ValueError("negative native price")

    def price_of(self, token: Address) -> Optional[Fraction]:
        if token == self.common_currency:
            return Fraction(1)
        return self.prices.get(token)

    def decimals_of(self, token: Address) -> Optional[int]:
        return self.decimals.get(token)


class Strategy(str, enum.Enum):
    FASTLANE = "FastLaneBased"
    SPAM = "SpamBased"
    NOT_AA = "NotAA"


def _frac(text) -> Fraction:
    return Fraction(text)


@dataclass(frozen=True)
class Classification:
    tx_hash: str
    block_number: int
    tx_index: int
    timestamp: int
    strategy: Strategy
    swap_count: int
    delta: DeltaVector
    gross_value: Fraction
    tau: Fraction
    beta: Fraction
    profit: Fraction
    searcher: Address
    failed_condition: Optional[str] = None

    def __post_init__(self):
        if self.profit != self.gross_value - self.tau - self.beta:
            raise ValueError(f"{self.tx_hash}: profit does not equal gross - tau - beta")

    @property
    def is_aa(self) -> bool:
        return self.strategy is not Strategy.NOT_AA

    def to_json(self) -> dict:
        return {
            "tx_hash": self.tx_hash,
            "block_number": self.block_number,
            "tx_index": self.tx_index,
            "timestamp": self.timestamp,
            "is_aa": self.is_aa,
            "strategy": self.strategy.value,
            "swap_count": self.swap_count,
            "delta": self.delta.to_json(),
            "gross_value": str(self.gross_value),
            "tau": str(self.tau),
            "beta": str(self.beta),
            "profit": str(self.profit),
            "searcher": str(self.searcher),
            "failed_condition": self.failed_condition,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Classification":
        strategy = Strategy(obj["strategy"])
        if "is_aa" in obj and bool(obj["is_aa"]) != (strategy is not Strategy.NOT_AA):
            raise ValueError("is_aa flag disagrees with strategy")
        return cls(
            tx_hash=normalize_hash(obj["tx_hash"]),
            block_number=int(obj["block_number"]),
            tx_index=int(obj["tx_index"]),
            timestamp=int(obj["timestamp"]),
            strategy=strategy,
            swap_count=int(obj["swap_count"]),
            delta=DeltaVector.from_json(obj.get("delta", {})),
            gross_value=_frac(obj["gross_value"]),
            tau=_frac(obj["tau"]),
            beta=_frac(obj["beta"]),
            profit=_frac(obj["profit"]),
            searcher=Address(obj["searcher"]),
            failed_condition=obj.get("failed_condition"),
        )


@dataclass(frozen=True)
class AggregateRow:
    bucket_index: int
    bucket_start: int
    aa_tx_count_spam: int
    aa_tx_count_fastlane: int
    mev_volume_spam: Fraction
    mev_volume_fastlane: Fraction
    mev_volume_spam_usd: Optional[Fraction]
    mev_volume_fastlane_usd: Optional[Fraction]
    bids_total: Fraction
    unique_searchers_spam: int
    unique_searchers_fastlane: int
    fastlane_tx_share: Optional[Fraction]
    fastlane_mev_share: Optional[Fraction]
    bid_to_mev_ratio: Optional[Fraction]
