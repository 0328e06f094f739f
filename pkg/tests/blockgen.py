"""Random RawBlocks for fixture and traversal tests."""

import random

from atomarb.model import Address, RawBlock, RawLog, RawTransaction


def random_block(rng: random.Random, number: int, max_txs: int = 4) -> RawBlock:
    def address():
        return Address(rng.randbytes(20))

    txs = []
    log_index = 0
    for i in range(rng.randint(0, max_txs)):
        logs = []
        for _ in range(rng.randint(0, 3)):
            topics = tuple(rng.randbytes(32) for _ in range(rng.randint(0, 4)))
            logs.append(RawLog(address(), topics, rng.randbytes(rng.choice((0, 32, 64, 160))), log_index))
            log_index += 1
        txs.append(RawTransaction(
            hash="0x" + rng.randbytes(32).hex(),
            index=i,
            sender=address(),
            to=None if rng.random() < 0.1 else address(),
            value=rng.choice((0, rng.getrandbits(80))),
            gas_used=rng.randint(21_000, 5_000_000),
            effective_gas_price=rng.getrandbits(40),
            status=rng.choice((0, 1, 1, 1)),
            logs=tuple(logs),
        ))
    return RawBlock(number, 1_700_000_000 + 2 * number, address(), tuple(txs))


def random_blocks(seed: int, count: int, first: int = 100, max_txs: int = 4) -> list[RawBlock]:
    rng = random.Random(seed)
    return [random_block(rng, first + i, max_txs) for i in range(count)]
