"""Hand-built blocks shared by several test modules."""

from fractions import Fraction

from atomarb.classify import ClassifierConfig
from atomarb.decode import BALANCER_VAULT, PoolMeta, PoolRegistry, Protocol, SwapEvent
from atomarb.model import Address, PriceTable, RawBlock, RawTransaction, TokenAmount
from atomarb.synth import encode_bid_log, encode_swap, encode_transfer_log


def addr(n: int) -> Address:
    return Address(n.to_bytes(20, "big"))


def txh(n: int) -> str:
    return "0x" + n.to_bytes(32, "big").hex()


def units(text: str, decimals: int = 18) -> int:
    return TokenAmount.parse(text, decimals).raw


WMATIC = addr(0x1001)
BUSD = addr(0x1002)
WETH = addr(0x1003)
WBTC = addr(0x1004)
SHIB = addr(0x1005)  # never priced

SEARCHER_EOA = addr(0xE0A)
BOT = addr(0xB07)
FASTLANE = addr(0xFA57)
COINBASE = addr(0xC0B)

V3_BUSD_WMATIC = PoolMeta(addr(0x3001), Protocol.UNIV3, (WMATIC, BUSD), (18, 18))
V2_WMATIC_BUSD = PoolMeta(addr(0x2001), Protocol.UNIV2, (WMATIC, BUSD), (18, 18))
V2_WMATIC_WETH = PoolMeta(addr(0x2002), Protocol.UNIV2, (WMATIC, WETH), (18, 18))
ALG_WETH_WBTC = PoolMeta(addr(0x4001), Protocol.ALGEBRA, (WETH, WBTC), (18, 8))
BAL_WBTC_WMATIC = PoolMeta(addr(0x5001), Protocol.BALANCER_V2, (WMATIC, WBTC), (18, 8),
                           pool_id=addr(0x5001).to_bytes() + bytes(12), vault=BALANCER_VAULT)
V2_WMATIC_SHIB = PoolMeta(addr(0x2003), Protocol.UNIV2, (WMATIC, SHIB), (18, 18))
V2_BUSD_WETH = PoolMeta(addr(0x2004), Protocol.UNIV2, (BUSD, WETH), (18, 18))

POOLS = (V3_BUSD_WMATIC, V2_WMATIC_BUSD, V2_WMATIC_WETH, ALG_WETH_WBTC, BAL_WBTC_WMATIC,
         V2_WMATIC_SHIB, V2_BUSD_WETH)

DECIMALS = {WMATIC: 18, BUSD: 18, WETH: 18, WBTC: 8, SHIB: 18}


def registry() -> PoolRegistry:
    return PoolRegistry({p.pool: p for p in POOLS})


def price_table(**overrides) -> PriceTable:
    prices = {WMATIC: Fraction(1), BUSD: Fraction(135, 100), WETH: Fraction(3600), WBTC: Fraction(68000)}
    prices.update(overrides)
    return PriceTable(common_currency=WMATIC, prices=prices, decimals=dict(DECIMALS))


def config(**kw) -> ClassifierConfig:
    kw.setdefault("price_table", price_table())
    kw.setdefault("fastlane_addresses", frozenset({FASTLANE}))
    return ClassifierConfig(**kw)


def leg(meta: PoolMeta, token_in, amount_in: int, token_out, amount_out: int, log_index: int,
        recipient=BOT) -> SwapEvent:
    return SwapEvent(
        pool=meta.pool,
        protocol=meta.protocol,
        token_in=token_in,
        token_out=token_out,
        amount_in=TokenAmount(amount_in, meta.decimals_of(token_in)),
        amount_out=TokenAmount(amount_out, meta.decimals_of(token_out)),
        recipient=None if meta.protocol is Protocol.BALANCER_V2 else recipient,
        log_index=log_index,
    )


def make_tx(legs_with_meta, *, tx_hash=txh(1), index=0, to=BOT, value=0, gas_used=200_000,
            gas_price=50 * 10**9, status=1, extra_logs=(), sender=SEARCHER_EOA) -> RawTransaction:
    logs = [encode_swap(s, meta) for s, meta in legs_with_meta]
    logs.extend(extra_logs)
    logs.sort(key=lambda lg: lg.log_index)
    return RawTransaction(tx_hash, index, sender, to, value, gas_used, gas_price, status, tuple(logs))


def block_of(*txs, number=58_329_504, timestamp=1_724_000_000) -> RawBlock:
    return RawBlock(number, timestamp, COINBASE, tuple(txs))


# Plain arbitrage: 3.9383 BUSD -> 5.3139 WMATIC on a V3-style pool, then
# 5.0018 WMATIC -> 3.9383 BUSD on a V2-style pool; 0.3121 WMATIC left over.
ARB_V3_LEG = leg(V3_BUSD_WMATIC, BUSD, units("3.9383"), WMATIC, units("5.3139"), 0)
ARB_V2_LEG = leg(V2_WMATIC_BUSD, WMATIC, units("5.0018"), BUSD, units("3.9383"), 2)


def two_leg_tx(**kw) -> RawTransaction:
    transfer = encode_transfer_log(BUSD, BOT, V3_BUSD_WMATIC.pool, units("3.9383"), 1)
    return make_tx([(ARB_V3_LEG, V3_BUSD_WMATIC), (ARB_V2_LEG, V2_WMATIC_BUSD)],
                   extra_logs=(transfer,), **kw)


# Three-hop FastLane-routed cycle: WMATIC -> WETH -> WBTC -> WMATIC. The return
# leg uses 42,757.3 - 39,956.3 = 2,801 WMATIC of surplus.
FASTLANE_LEGS = (
    (leg(V2_WMATIC_WETH, WMATIC, units("39956.3"), WETH, units("11.8"), 0), V2_WMATIC_WETH),
    (leg(ALG_WETH_WBTC, WETH, units("11.8"), WBTC, units("0.62", 8), 1), ALG_WETH_WBTC),
    (leg(BAL_WBTC_WMATIC, WBTC, units("0.62", 8), WMATIC, units("42757.3"), 2), BAL_WBTC_WMATIC),
)


def fastlane_tx(bid_wei: int = units("1000"), via="to", **kw) -> RawTransaction:
    if via == "to":
        return make_tx(FASTLANE_LEGS, to=FASTLANE, value=bid_wei, **kw)
    bid = encode_bid_log(FASTLANE, BOT, bid_wei, 3)
    return make_tx(FASTLANE_LEGS, extra_logs=(bid,), **kw)
