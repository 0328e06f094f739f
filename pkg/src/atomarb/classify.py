"""Atomic-arbitrage verdicts: net deltas, pricing, fee/bid accounting, strategy split."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .decode import Diagnostics, PoolRegistry, SwapEvent, decode_transaction, event_topic
from .model import (
    WEI_PER_NATIVE,
    Address,
    Classification,
    DeltaVector,
    PriceTable,
    RawBlock,
    RawTransaction,
    Strategy,
    delta_add,
)

log = logging.getLogger(__name__)

CONSERVATIVE = "conservative"
REJECT = "reject"

# Bid log emitted by the auction contract: first data word is the bid in wei.
DEFAULT_BID_EVENT_SIGNATURE = "SearcherBid(address,uint256)"

MULTI_SWAP = "multi_swap"
SUFFICIENCY = "sufficiency"
PROFITABILITY = "profitability"
UNPRICED = "unpriced"


class Unpriceable(Exception):
    def __init__(self, tokens):
        super().__init__(f"no price for {', '.join(sorted(tokens))}")
        self.tokens = tuple(sorted(tokens))


@dataclass(frozen=True)
class ClassifierConfig:
    price_table: PriceTable
    dust_threshold: Mapping[Address, int] = field(default_factory=dict)
    fastlane_addresses: frozenset = frozenset()
    unpriced_token_policy: str = CONSERVATIVE
    searcher_identity: str = "from"
    bid_event_signature: str = DEFAULT_BID_EVENT_SIGNATURE

    def __post_init__(self):
        if self.unpriced_token_policy not in (CONSERVATIVE, REJECT):
            raise ValueError(f"unknown unpriced_token_policy {self.unpriced_token_policy!r}")
        if self.searcher_identity not in ("from", "to"):
            raise ValueError(f"searcher_identity must be 'from' or 'to', not {self.searcher_identity!r}")
        if any(v < 0 for v in self.dust_threshold.values()):
            raise ValueError("dust thresholds must be non-negative")
        object.__setattr__(self, "fastlane_addresses", frozenset(Address(a) for a in self.fastlane_addresses))

    @property
    def bid_topic(self) -> bytes:
        return event_topic(self.bid_event_signature)

    def to_json(self) -> dict:
        pt = self.price_table
        tokens = {}
        for token in sorted(set(pt.prices) | set(pt.decimals)):
            entry = {}
            if token in pt.prices:
                entry["price"] = str(pt.prices[token])
            if token in pt.decimals:
                entry["decimals"] = pt.decimals[token]
            tokens[token] = entry
        return {
            "common_currency": pt.common_currency,
            "native_price": str(pt.native_price),
            "tokens": tokens,
            "dust_thresholds": {k: str(v) for k, v in sorted(self.dust_threshold.items())},
            "fastlane_addresses": sorted(self.fastlane_addresses),
            "unpriced_token_policy": self.unpriced_token_policy,
            "searcher_identity": self.searcher_identity,
            "bid_event_signature": self.bid_event_signature,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ClassifierConfig":
        tokens = obj.get("tokens", {})
        prices = {Address(k): Fraction(v["price"]) for k, v in tokens.items() if "price" in v}
        decimals = {Address(k): int(v["decimals"]) for k, v in tokens.items() if "decimals" in v}
        table = PriceTable(
            common_currency=Address(obj["common_currency"]),
            prices=prices,
            decimals=decimals,
            native_price=Fraction(obj.get("native_price", "1")),
        )
        return cls(
            price_table=table,
            dust_threshold={Address(k): int(v) for k, v in obj.get("dust_thresholds", {}).items()},
            fastlane_addresses=frozenset(obj.get("fastlane_addresses", ())),
            unpriced_token_policy=obj.get("unpriced_token_policy", CONSERVATIVE),
            searcher_identity=obj.get("searcher_identity", "from"),
            bid_event_signature=obj.get("bid_event_signature", DEFAULT_BID_EVENT_SIGNATURE),
        )

    @classmethod
    def load(cls, path: "str | Path") -> "ClassifierConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


def swap_delta(s: SwapEvent) -> DeltaVector:
    """Token flows of one leg as seen by the transaction: +out, -in."""
    return DeltaVector([(s.token_out, s.amount_out.raw), (s.token_in, -s.amount_in.raw)])


def net_delta(swaps: Iterable[SwapEvent]) -> DeltaVector:
    total = DeltaVector()
    for s in swaps:
        total = delta_add(total, swap_delta(s))
    return total


def compute_fee(tx: RawTransaction, prices: PriceTable) -> Fraction:
    """Gas cost in the common currency."""
    return Fraction(tx.gas_used * tx.effective_gas_price, WEI_PER_NATIVE) * prices.native_price


def _bid_logs_wei(tx: RawTransaction, cfg: ClassifierConfig) -> int:
    topic = cfg.bid_topic
    total = 0
    for lg in tx.logs:
        if lg.emitter in cfg.fastlane_addresses and lg.topics and lg.topics[0] == topic and len(lg.data) >= 32:
            total += int.from_bytes(lg.data[:32], "big")
    return total


def compute_bid(tx: RawTransaction, cfg: ClassifierConfig) -> Fraction:
    """Prioritization bid: top-level value sent to an auction address plus decoded bid logs.

    Reverted transactions pay no bid. Value moved to the block producer inside
    internal calls is not visible here.
    """
    if not tx.succeeded:
        return Fraction(0)
    wei = _bid_logs_wei(tx, cfg)
    if tx.to is not None and tx.to in cfg.fastlane_addresses:
        wei += tx.value
    return Fraction(wei, WEI_PER_NATIVE) * cfg.price_table.native_price


def is_fastlane(tx: RawTransaction, cfg: ClassifierConfig) -> bool:
    fl = cfg.fastlane_addresses
    if tx.to is not None and tx.to in fl:
        return True
    return any(lg.emitter in fl for lg in tx.logs)


def priced_value(d: DeltaVector, prices: PriceTable, policy: str = CONSERVATIVE) -> Fraction:
    total = Fraction(0)
    missing = []
    for token, amount in d.items():
        price = prices.price_of(token)
        decimals = prices.decimals_of(token)
        if price is None or decimals is None:
            missing.append(token)
            continue
        total += Fraction(amount, 10**decimals) * price
    if missing and policy == REJECT:
        raise Unpriceable(missing)
    return total


def evaluate(tx: RawTransaction, block: RawBlock, swaps: list[SwapEvent],
             cfg: ClassifierConfig) -> Classification:
    delta = net_delta(swaps)
    tau = compute_fee(tx, cfg.price_table)
    beta = compute_bid(tx, cfg)
    failed = None
    try:
        gross = priced_value(delta, cfg.price_table, cfg.unpriced_token_policy)
    except Unpriceable as exc:
        log.info("tx %s not classified as AA: %s", tx.hash, exc)
        gross = priced_value(delta, cfg.price_table, CONSERVATIVE)
        failed = UNPRICED
    profit = gross - tau - beta

    if len(swaps) < 2:
        failed = MULTI_SWAP
    elif any(amount < -cfg.dust_threshold.get(token, 0) for token, amount in delta.items()):
        failed = SUFFICIENCY
    elif failed is None and profit <= 0:
        failed = PROFITABILITY

    if failed is not None:
        strategy = Strategy.NOT_AA
    elif is_fastlane(tx, cfg):
        strategy = Strategy.FASTLANE
    else:
        strategy = Strategy.SPAM

    if cfg.searcher_identity == "to" and tx.to is not None:
        searcher = tx.to
    else:
        searcher = tx.sender
    return Classification(
        tx_hash=tx.hash,
        block_number=block.number,
        tx_index=tx.index,
        timestamp=block.timestamp,
        strategy=strategy,
        swap_count=len(swaps),
        delta=delta,
        gross_value=gross,
        tau=tau,
        beta=beta,
        profit=profit,
        searcher=searcher,
        failed_condition=failed,
    )


def classify_block(block: RawBlock, registry: PoolRegistry, cfg: ClassifierConfig,
                   diagnostics: Optional[Diagnostics] = None) -> list[Classification]:
    return [evaluate(tx, block, decode_transaction(tx, registry, diagnostics), cfg)
            for tx in block.transactions]
