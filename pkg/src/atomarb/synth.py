"""Deterministic synthetic ledgers with planted ground truth.

Also holds the swap-event encoders (inverse of :mod:`atomarb.decode`) and
:func:`oracle_classify`, a deliberately naive re-implementation of the
arbitrage test that works on raw fixture JSON and imports nothing from the
decode/classify path.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from math import ceil
from pathlib import Path
from typing import Optional

from Crypto.Hash import keccak as _keccak

from .classify import DEFAULT_BID_EVENT_SIGNATURE, ClassifierConfig
from .decode import (
    BALANCER_VAULT,
    INT256_MAX,
    UINT256_MAX,
    PoolMeta,
    PoolRegistry,
    Protocol,
    SwapEvent,
    event_topic,
    V2_SWAP_TOPIC,
    V3_SWAP_TOPIC,
    ALGEBRA_SWAP_TOPIC,
    BALANCER_SWAP_TOPIC,
)
from .ingest import block_to_json, dump_block_line
from .model import WEI_PER_NATIVE, Address, PriceTable, RawBlock, RawLog, RawTransaction, TokenAmount

TRANSFER_SIGNATURE = "Transfer(address,address,uint256)"

PLANTED = "planted"
NEAR_MULTI_SWAP = "near_miss_multi_swap"
NEAR_SUFFICIENCY = "near_miss_sufficiency"
NEAR_PROFITABILITY = "near_miss_profitability"
NOISE = "noise"

_FAILED_BY_KIND = {
    PLANTED: None,
    NEAR_MULTI_SWAP: "multi_swap",
    NEAR_SUFFICIENCY: "sufficiency",
    NEAR_PROFITABILITY: "profitability",
}


class Unencodable(ValueError):
    pass


# -- encoders -------------------------------------------------------------------

def _u(value: int) -> bytes:
    if not 0 <= value <= UINT256_MAX:
        raise Unencodable(f"{value} does not fit uint256")
    return value.to_bytes(32, "big")


def _i(value: int) -> bytes:
    if not -INT256_MAX - 1 <= value <= INT256_MAX:
        raise Unencodable(f"{value} does not fit int256")
    return value.to_bytes(32, "big", signed=True)


def encode_swap(s: SwapEvent, meta: PoolMeta, sender: Optional[Address] = None,
                sqrt_price: int = 1 << 96, liquidity: int = 0, tick: int = 0) -> RawLog:
    """Raw Swap log that the matching decoder turns back into ``s``."""
    if s.protocol is not meta.protocol:
        raise Unencodable(f"swap is {s.protocol.value}, pool is {meta.protocol.value}")
    if s.token_in == s.token_out:
        raise Unencodable("token_in equals token_out")
    if s.token_in not in meta.tokens or s.token_out not in meta.tokens:
        raise Unencodable("swap tokens are not pool tokens")
    if s.amount_in.raw < 0 or s.amount_out.raw < 0 or (s.amount_in.raw == 0 and s.amount_out.raw == 0):
        raise Unencodable("swap amounts must be non-negative and not both zero")
    a_in, a_out = s.amount_in.raw, s.amount_out.raw

    if meta.protocol is Protocol.BALANCER_V2:
        if s.recipient is not None:
            raise Unencodable("Balancer Swap does not carry a recipient")
        if meta.pool_id is None or s.pool != meta.pool:
            raise Unencodable("Balancer pool needs a matching poolId")
        return RawLog(
            emitter=meta.vault or BALANCER_VAULT,
            topics=(BALANCER_SWAP_TOPIC, meta.pool_id, s.token_in.to_word(), s.token_out.to_word()),
            data=_u(a_in) + _u(a_out),
            log_index=s.log_index,
        )

    if s.recipient is None or s.pool != meta.pool:
        raise Unencodable("pair-pool swaps need a recipient and matching pool")
    sender = sender or s.recipient
    topics_tail = (sender.to_word(), s.recipient.to_word())
    zero_for_one = s.token_in == meta.token0
    if meta.protocol is Protocol.UNIV2:
        if zero_for_one:
            data = _u(a_in) + _u(0) + _u(0) + _u(a_out)
        else:
            data = _u(0) + _u(a_in) + _u(a_out) + _u(0)
        return RawLog(s.pool, (V2_SWAP_TOPIC,) + topics_tail, data, s.log_index)

    if zero_for_one:
        amount0, amount1 = a_in, -a_out
    else:
        amount0, amount1 = -a_out, a_in
    topic = V3_SWAP_TOPIC if meta.protocol is Protocol.UNIV3 else ALGEBRA_SWAP_TOPIC
    data = _i(amount0) + _i(amount1) + _u(sqrt_price) + _u(liquidity) + _i(tick)
    return RawLog(s.pool, (topic,) + topics_tail, data, s.log_index)


def encode_bid_log(auction: Address, searcher: Address, amount_wei: int, log_index: int,
                   signature: str = DEFAULT_BID_EVENT_SIGNATURE) -> RawLog:
    return RawLog(auction, (event_topic(signature),), _u(amount_wei) + searcher.to_word(), log_index)


def encode_transfer_log(token: Address, src: Address, dst: Address, amount: int, log_index: int) -> RawLog:
    return RawLog(token, (event_topic(TRANSFER_SIGNATURE), src.to_word(), dst.to_word()), _u(amount), log_index)


# -- plan ---------------------------------------------------------------------

@dataclass
class SynthPlan:
    seed: int = 20230101
    block_count: int = 400
    tx_per_block: tuple = (8, 18)  # inclusive uniform bounds
    planted_aa_fraction: float = 0.35
    near_miss_fraction: float = 0.35  # split evenly over the three conditions
    fastlane_fraction: float = 0.3  # of planted and near-miss transactions
    token_count: int = 8
    unpriced_token_count: int = 2
    searcher_count: int = 12
    max_legs: int = 5
    max_magnitude: int = 24  # amounts span 10**0 .. 10**max_magnitude raw units
    residue_probability: float = 0.2  # planted cycles leaving positive dust on an intermediate token
    start_block: int = 40_000_000
    start_timestamp: int = 1_672_531_200  # 2023-01-01T00:00:00Z
    block_time: int = 2
    native_price: str = "1"

    def __post_init__(self):
        for name in ("planted_aa_fraction", "near_miss_fraction", "fastlane_fraction", "residue_probability"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.planted_aa_fraction + self.near_miss_fraction > 1:
            raise ValueError("planted and near-miss fractions exceed 1")
        lo, hi = self.tx_per_block
        if not 0 <= lo <= hi:
            raise ValueError("bad tx_per_block bounds")
        if self.token_count - self.unpriced_token_count < 2:
            raise ValueError("need at least two priced tokens")
        if self.max_legs < 2:
            raise ValueError("max_legs must be at least 2")
        self.tx_per_block = (lo, hi)

    @classmethod
    def from_json(cls, obj) -> "SynthPlan":
        obj = dict(obj)
        if "tx_per_block" in obj:
            obj["tx_per_block"] = tuple(obj["tx_per_block"])
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "SynthPlan":
        return cls.from_json(json.loads(Path(path).read_text()))

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["tx_per_block"] = list(self.tx_per_block)
        return obj


@dataclass
class Token:
    address: Address
    decimals: int
    price: Optional[Fraction]


@dataclass
class SynthLedger:
    plan: SynthPlan
    blocks: list
    ground_truth: dict  # tx hash -> label
    registry: PoolRegistry
    config: ClassifierConfig

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "fixture": out / "fixture.jsonl",
            "ground_truth": out / "ground_truth.json",
            "pools": out / "pools.json",
            "config": out / "classifier.json",
            "plan": out / "plan.json",
        }
        with open(paths["fixture"], "w", encoding="utf-8") as fh:
            for block in self.blocks:
                fh.write(dump_block_line(block) + "\n")
        paths["ground_truth"].write_text(json.dumps(
            {"plan": self.plan.to_json(), "transactions": self.ground_truth}, indent=1, sort_keys=True) + "\n")
        self.registry.save(paths["pools"])
        paths["config"].write_text(json.dumps(self.config.to_json(), indent=1, sort_keys=True) + "\n")
        paths["plan"].write_text(json.dumps(self.plan.to_json(), indent=1, sort_keys=True) + "\n")
        return paths


class _Generator:
    def __init__(self, plan: SynthPlan):
        self.plan = plan
        self.rng = random.Random(plan.seed)
        rng = self.rng
        self.native_price = Fraction(plan.native_price)
        self.tokens: list[Token] = [Token(self.addr(), 18, Fraction(1))]  # common currency
        for i in range(1, plan.token_count):
            priced = i < plan.token_count - plan.unpriced_token_count
            price = Fraction(rng.randint(1, 10**6), rng.choice([1, 10, 1000, 10**5])) if priced else None
            self.tokens.append(Token(self.addr(), rng.choice([6, 8, 18]), price))
        self.priced = [t for t in self.tokens if t.price is not None]
        self.searchers = [(self.addr(), self.addr()) for _ in range(plan.searcher_count)]  # (eoa, bot)
        self.fastlane = [self.addr(), self.addr()]
        self.vault = BALANCER_VAULT
        self.pools: dict[tuple, PoolMeta] = {}
        self.registry = PoolRegistry()
        self.truth: dict[str, dict] = {}
        self.log_index = 0

    def addr(self) -> Address:
        return Address(self.rng.getrandbits(160).to_bytes(20, "big"))

    def tx_hash(self) -> str:
        return "0x" + self.rng.getrandbits(256).to_bytes(32, "big").hex()

    def amount(self) -> int:
        return self.rng.randint(1, 10 ** self.rng.randint(0, self.plan.max_magnitude))

    def pool(self, protocol: Protocol, a: Token, b: Token) -> PoolMeta:
        key = (protocol, tuple(sorted((a.address, b.address))))
        meta = self.pools.get(key)
        if meta is None:
            pair = sorted((a, b), key=lambda t: t.address)
            address = self.addr()
            extra = {}
            if protocol is Protocol.BALANCER_V2:
                extra = {"pool_id": address.to_bytes() + b"\x00\x02" + self.rng.getrandbits(80).to_bytes(10, "big"),
                         "vault": self.vault}
            meta = PoolMeta(address, protocol, tuple(t.address for t in pair),
                            tuple(t.decimals for t in pair), **extra)
            self.pools[key] = meta
            self.registry.add(meta)
        return meta

    def value_of(self, token: Token, raw: int) -> Fraction:
        return Fraction(raw, 10**token.decimals) * token.price if token.price is not None else Fraction(0)

    def cycle_path(self, start: Token, legs: int) -> list[Token]:
        """start -> ... -> start; intermediate hops never revisit the start token."""
        path = [start]
        for _ in range(legs - 1):
            path.append(self.rng.choice([t for t in self.tokens if t is not start and t is not path[-1]]))
        path.append(start)
        return path

    def cycle_legs(self, kind: str):
        """Legs ``(token_in, amount_in, token_out, amount_out)`` and gross value of a cycle."""
        rng = self.rng
        start = rng.choice(self.priced)
        n = rng.randint(2, self.plan.max_legs)
        path = self.cycle_path(start, n)
        amounts_in = [self.amount()]
        amounts_out = []
        for _ in range(n - 1):
            out = self.amount()
            amounts_out.append(out)
            nxt = out
            if kind == PLANTED and out > 1 and rng.random() < self.plan.residue_probability:
                nxt = out - rng.randint(1, out - 1)
            amounts_in.append(nxt)
        surplus = self.amount()
        if kind == NEAR_SUFFICIENCY:
            # overspend one intermediate hop, then over-compensate in the start token
            j = rng.randrange(1, n)
            extra = self.amount()
            amounts_in[j] += extra
            debt = self.value_of(path[j], extra)
            surplus += ceil((2 * debt + Fraction(1, 10**6)) * 10**start.decimals / start.price)
        amounts_out.append(amounts_in[0] + surplus)
        legs = [(path[i], amounts_in[i], path[i + 1], amounts_out[i]) for i in range(n)]
        net: dict[Address, int] = {}
        for t_in, a_in, t_out, a_out in legs:
            net[t_in.address] = net.get(t_in.address, 0) - a_in
            net[t_out.address] = net.get(t_out.address, 0) + a_out
        by_addr = {t.address: t for t in self.tokens}
        gross = sum((self.value_of(by_addr[a], v) for a, v in net.items()), Fraction(0))
        return legs, gross

    def costs(self, gross: Fraction, dominated: bool, fastlane: bool) -> tuple[int, int, int]:
        """(gas_used, gas_price, bid_wei) with tau+beta < gross, or >= gross when dominated."""
        rng = self.rng
        gross_wei = gross * WEI_PER_NATIVE / self.native_price
        gas_used = rng.randint(60_000, 900_000)
        if dominated:
            total = max(ceil(gross_wei), 0) + rng.choice([0, 0, 1, rng.randint(1, 10**15)])
            bid = rng.randint(0, total) if fastlane else 0
            tau_target = total - bid
            price = -(-tau_target // gas_used)
            return gas_used, price, bid
        total = int(gross_wei * Fraction(rng.randint(0, 950), 1000))  # floor, strictly below gross
        bid = rng.randint(0, total) if fastlane else 0
        price = (total - bid) // gas_used
        return gas_used, price, bid

    def next_index(self) -> int:
        idx = self.log_index
        self.log_index += 1
        return idx

    def swap_logs(self, legs, bot: Address) -> list[RawLog]:
        logs = []
        for t_in, a_in, t_out, a_out in legs:
            protocol = self.rng.choice(list(Protocol))
            meta = self.pool(protocol, t_in, t_out)
            if self.rng.random() < 0.3:
                logs.append(encode_transfer_log(t_in.address, bot, meta.pool, a_in, self.next_index()))
            swap = SwapEvent(
                pool=meta.pool,
                protocol=protocol,
                token_in=t_in.address,
                token_out=t_out.address,
                amount_in=_amt(a_in, t_in),
                amount_out=_amt(a_out, t_out),
                recipient=None if protocol is Protocol.BALANCER_V2 else bot,
                log_index=self.next_index(),
            )
            logs.append(encode_swap(swap, meta, sender=bot))
        return logs

    def label(self, h: str, kind: str, fastlane: bool, n: int, profit: Fraction, failed: Optional[str]):
        is_aa = failed is None
        strategy = ("FastLaneBased" if fastlane else "SpamBased") if is_aa else "NotAA"
        self.truth[h] = {"kind": kind, "is_aa": is_aa, "strategy": strategy, "N": n,
                         "profit": str(profit), "failed_condition": failed}

    def cycle_tx(self, kind: str, index: int) -> RawTransaction:
        rng = self.rng
        eoa, bot = rng.choice(self.searchers)
        fastlane = rng.random() < self.plan.fastlane_fraction
        if kind == NEAR_MULTI_SWAP:
            token_out = rng.choice(self.priced)
            token_in = rng.choice([t for t in self.tokens if t is not token_out])
            amount_out = self.amount()
            legs = [(token_in, 0, token_out, amount_out)]
            gross = self.value_of(token_out, amount_out)
        else:
            legs, gross = self.cycle_legs(kind)
        gas_used, gas_price, bid = self.costs(gross, kind == NEAR_PROFITABILITY, fastlane)
        logs = self.swap_logs(legs, bot)
        to, value = bot, 0
        auction = rng.choice(self.fastlane)
        if fastlane:
            if rng.random() < 0.5:
                to, value = auction, bid
            else:
                logs.append(encode_bid_log(auction, bot, bid, self.next_index()))
        tau = Fraction(gas_used * gas_price, WEI_PER_NATIVE) * self.native_price
        beta = Fraction(bid, WEI_PER_NATIVE) * self.native_price
        profit = gross - tau - beta
        h = self.tx_hash()
        self.label(h, kind, fastlane, len(legs), profit, _FAILED_BY_KIND[kind])
        return RawTransaction(h, index, eoa, to, value, gas_used, gas_price, 1, tuple(logs))

    def noise_tx(self, index: int) -> RawTransaction:
        rng = self.rng
        user = self.addr()
        gas_price = rng.randint(30, 300) * 10**9
        h = self.tx_hash()
        variant = rng.randrange(5)
        logs: tuple = ()
        n = 0
        status = 1
        to = self.addr()
        value = 0
        fastlane = False
        if variant == 1:  # token transfer
            token = rng.choice(self.tokens)
            logs = (encode_transfer_log(token.address, user, to, self.amount(), self.next_index()),)
        elif variant == 2:  # ordinary user swap
            a, b = rng.sample(self.tokens, 2)
            legs = [(a, self.amount(), b, self.amount())]
            logs = tuple(self.swap_logs(legs, user))
            n = 1
        elif variant == 3:  # reverted attempt; receipts of reverted txs carry no logs
            status = 0
            if rng.random() < 0.5:
                to, value = rng.choice(self.fastlane), self.amount()
        elif variant == 4:  # non-arbitrage auction activity
            to = rng.choice(self.fastlane)
            fastlane = True
            logs = (encode_bid_log(to, user, self.amount(), self.next_index()),)
        else:  # plain value transfer
            value = self.amount()
        gas_used = rng.randint(21_000, 300_000)
        tau = Fraction(gas_used * gas_price, WEI_PER_NATIVE) * self.native_price
        beta = Fraction(0)
        if fastlane:
            beta = Fraction(int.from_bytes(logs[0].data[:32], "big"), WEI_PER_NATIVE) * self.native_price
            if status == 1 and to in self.fastlane:
                beta += Fraction(value, WEI_PER_NATIVE) * self.native_price
        gross = Fraction(0)
        if n == 1:
            (t_in, a_in, t_out, a_out), = legs
            gross = self.value_of(t_out, a_out) - self.value_of(t_in, a_in)
        profit = gross - tau - beta
        self.label(h, NOISE, False, n, profit, "multi_swap")
        return RawTransaction(h, index, user, to, value, gas_used, gas_price, status, logs)

    def run(self) -> SynthLedger:
        plan = self.plan
        rng = self.rng
        blocks = []
        near = [NEAR_MULTI_SWAP, NEAR_SUFFICIENCY, NEAR_PROFITABILITY]
        for b in range(plan.block_count):
            self.log_index = 0
            txs = []
            for i in range(rng.randint(*plan.tx_per_block)):
                r = rng.random()
                if r < plan.planted_aa_fraction:
                    txs.append(self.cycle_tx(PLANTED, i))
                elif r < plan.planted_aa_fraction + plan.near_miss_fraction:
                    txs.append(self.cycle_tx(rng.choice(near), i))
                else:
                    txs.append(self.noise_tx(i))
            blocks.append(RawBlock(
                number=plan.start_block + b,
                timestamp=plan.start_timestamp + b * plan.block_time,
                coinbase=self.addr(),
                transactions=tuple(txs),
            ))
        table = PriceTable(
            common_currency=self.tokens[0].address,
            prices={t.address: t.price for t in self.priced},
            decimals={t.address: t.decimals for t in self.tokens},
            native_price=self.native_price,
        )
        config = ClassifierConfig(price_table=table, fastlane_addresses=frozenset(self.fastlane))
        return SynthLedger(plan, blocks, self.truth, self.registry, config)


def _amt(raw: int, token: Token) -> TokenAmount:
    return TokenAmount(raw, token.decimals)


def generate(plan: SynthPlan) -> SynthLedger:
    return _Generator(plan).run()


# -- independent oracle ------------------------------------------------------------

def _k(sig: str) -> str:
    return "0x" + _keccak.new(data=sig.encode(), digest_bits=256).hexdigest()


_ORACLE_TOPICS = {
    _k("Swap(address,uint256,uint256,uint256,uint256,address)"): "v2",
    _k("Swap(address,address,int256,int256,uint160,uint128,int24)"): "v3",
    _k("Swap(bytes32,address,address,uint256,uint256)"): "balancer",
}


def oracle_classify(tx: dict, pools: dict, prices: dict, fastlane_set, native_price="1",
                    bid_signature: str = DEFAULT_BID_EVENT_SIGNATURE) -> dict:
    """Brute-force verdict for one fixture transaction object.

    ``pools`` is the pools.json mapping, ``prices`` the ``tokens`` section of a
    classifier config (address -> {"price", "decimals"}).
    """
    fastlane_set = {a.lower() for a in fastlane_set}
    native_price = Fraction(native_price)
    bid_topic = _k(bid_signature)
    ok = int(tx["status"], 16) == 1
    flows = {}
    n = 0
    bid_wei = 0
    touched = (tx.get("to") or "").lower() in fastlane_set
    for lg in tx["logs"]:
        emitter = lg["address"].lower()
        if emitter in fastlane_set:
            touched = True
        topics = lg["topics"]
        if not topics or not ok:
            continue
        data = lg["data"][2:]
        words = [int(data[i:i + 64], 16) for i in range(0, len(data), 64)]
        if emitter in fastlane_set and topics[0] == bid_topic and words:
            bid_wei += words[0]
        kind = _ORACLE_TOPICS.get(topics[0])
        if kind is None:
            continue
        if kind == "balancer":
            tin, tout = "0x" + topics[2][-40:], "0x" + topics[3][-40:]
            ain, aout = words[0], words[1]
        else:
            pool = pools[emitter]
            t0, t1 = pool["tokens"]
            if kind == "v2":
                in0, in1, out0, out1 = words
                if in0 > 0 or (in1 == 0 and out1 > 0):
                    tin, ain, tout, aout = t0, in0, t1, out1
                else:
                    tin, ain, tout, aout = t1, in1, t0, out0
            else:
                a0, a1 = [w - (1 << 256) if w >> 255 else w for w in words[:2]]
                if a0 > 0 or a1 < 0:
                    tin, ain, tout, aout = t0, a0, t1, -a1
                else:
                    tin, ain, tout, aout = t1, a1, t0, -a0
        n += 1
        flows[tin] = flows.get(tin, 0) - ain
        flows[tout] = flows.get(tout, 0) + aout
    gross = Fraction(0)
    for token, amount in flows.items():
        entry = prices.get(token)
        if entry and "price" in entry and "decimals" in entry:
            gross += Fraction(amount) / 10 ** int(entry["decimals"]) * Fraction(entry["price"])
    tau = Fraction(int(tx["gasUsed"], 16) * int(tx["effectiveGasPrice"], 16)) / 10**18 * native_price
    value_bid = int(tx["value"], 16) if (tx.get("to") or "").lower() in fastlane_set else 0
    beta = Fraction(bid_wei + value_bid) / 10**18 * native_price if ok else Fraction(0)
    profit = gross - tau - beta
    cond1 = n >= 2
    cond2 = all(v >= 0 for v in flows.values())
    cond3 = profit > 0
    is_aa = cond1 and cond2 and cond3
    strategy = ("FastLaneBased" if touched else "SpamBased") if is_aa else "NotAA"
    return {"is_aa": is_aa, "strategy": strategy, "N": n, "profit": str(profit)}


def oracle_label_ledger(fixture_path, pools_path, config_path) -> dict:
    """Oracle labels for every transaction of a written synthetic ledger."""
    pools = json.loads(Path(pools_path).read_text())
    cfg = json.loads(Path(config_path).read_text())
    labels = {}
    with open(fixture_path) as fh:
        for line in fh:
            for tx in json.loads(line)["transactions"]:
                labels[tx["hash"]] = oracle_classify(
                    tx, pools, cfg["tokens"], cfg["fastlane_addresses"], cfg.get("native_price", "1"),
                    cfg.get("bid_event_signature", DEFAULT_BID_EVENT_SIGNATURE))
    return labels


def oracle_label_blocks(ledger: SynthLedger) -> dict:
    pools = {str(m.pool): m.to_json() for m in ledger.registry.metas()}
    cfg = ledger.config.to_json()
    labels = {}
    for block in ledger.blocks:
        for tx in block_to_json(block)["transactions"]:
            labels[tx["hash"]] = oracle_classify(
                tx, pools, cfg["tokens"], cfg["fastlane_addresses"], cfg["native_price"],
                cfg["bid_event_signature"])
    return labels
