from collections import Counter
from dataclasses import replace
from types import SimpleNamespace

import pytest

from atomarb.classify import classify_block
from atomarb.decode import PoolRegistry, Protocol, decode_v2_swap
from atomarb.model import TokenAmount
from atomarb.synth import (
    NEAR_MULTI_SWAP,
    NEAR_PROFITABILITY,
    NEAR_SUFFICIENCY,
    NOISE,
    PLANTED,
    SynthPlan,
    Unencodable,
    encode_swap,
    generate,
    oracle_label_blocks,
    oracle_label_ledger,
)

from helpers import BAL_WBTC_WMATIC, BOT, ARB_V2_LEG, V2_WMATIC_BUSD, V3_BUSD_WMATIC, WBTC, WMATIC, leg


def test_two_leg_v2_leg_encodes_to_decodable_log():
    assert decode_v2_swap(encode_swap(ARB_V2_LEG, V2_WMATIC_BUSD), V2_WMATIC_BUSD) == ARB_V2_LEG


def test_encode_rejects_protocol_mismatch():
    with pytest.raises(Unencodable):
        encode_swap(ARB_V2_LEG, V3_BUSD_WMATIC)


def test_encode_rejects_balancer_same_token():
    s = SimpleNamespace(protocol=Protocol.BALANCER_V2, token_in=WBTC, token_out=WBTC, pool=BAL_WBTC_WMATIC.pool,
                        amount_in=TokenAmount(1, 8), amount_out=TokenAmount(1, 8), recipient=None, log_index=0)
    with pytest.raises(Unencodable):
        encode_swap(s, BAL_WBTC_WMATIC)


def test_encode_rejects_out_of_range_amounts():
    s = leg(V3_BUSD_WMATIC, WMATIC, 1 << 255, V3_BUSD_WMATIC.tokens[1], 1, 0)
    with pytest.raises(Unencodable):
        encode_swap(s, V3_BUSD_WMATIC)
    s = leg(V2_WMATIC_BUSD, WMATIC, 1 << 256, V2_WMATIC_BUSD.tokens[1], 1, 0)
    with pytest.raises(Unencodable):
        encode_swap(s, V2_WMATIC_BUSD)


def test_encode_rejects_balancer_recipient():
    s = replace(leg(BAL_WBTC_WMATIC, WBTC, 5, WMATIC, 7, 0), recipient=BOT)
    with pytest.raises(Unencodable):
        encode_swap(s, BAL_WBTC_WMATIC)


def test_plan_validation():
    with pytest.raises(ValueError):
        SynthPlan(planted_aa_fraction=1.5)
    with pytest.raises(ValueError):
        SynthPlan(planted_aa_fraction=0.7, near_miss_fraction=0.7)
    assert SynthPlan.from_json(SynthPlan(seed=3).to_json()) == SynthPlan(seed=3)


def test_same_seed_is_byte_identical(tmp_path):
    plan = SynthPlan(seed=99, block_count=30)
    generate(plan).write(tmp_path / "a")
    generate(plan).write(tmp_path / "b")
    for name in ("fixture.jsonl", "ground_truth.json", "pools.json", "classifier.json", "plan.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    generate(replace(plan, seed=100)).write(tmp_path / "c")
    assert (tmp_path / "a" / "fixture.jsonl").read_bytes() != (tmp_path / "c" / "fixture.jsonl").read_bytes()


def test_no_planted_means_no_aa():
    ledger = generate(SynthPlan(seed=5, block_count=40, planted_aa_fraction=0))
    assert ledger.ground_truth
    assert not any(label["is_aa"] for label in ledger.ground_truth.values())


def test_ground_truth_covers_every_tx(small_ledger):
    hashes = [tx.hash for b in small_ledger.blocks for tx in b.transactions]
    assert set(hashes) == set(small_ledger.ground_truth) and len(hashes) == len(set(hashes))


def test_every_kind_and_strategy_occurs(small_ledger):
    kinds = Counter(label["kind"] for label in small_ledger.ground_truth.values())
    assert set(kinds) == {PLANTED, NEAR_MULTI_SWAP, NEAR_SUFFICIENCY, NEAR_PROFITABILITY, NOISE}
    strategies = Counter(label["strategy"] for label in small_ledger.ground_truth.values())
    assert set(strategies) == {"SpamBased", "FastLaneBased", "NotAA"}


def test_near_misses_fail_their_own_condition(small_ledger):
    expected = {PLANTED: None, NEAR_MULTI_SWAP: "multi_swap", NEAR_SUFFICIENCY: "sufficiency",
                NEAR_PROFITABILITY: "profitability"}
    for block in small_ledger.blocks:
        for c in classify_block(block, small_ledger.registry, small_ledger.config):
            kind = small_ledger.ground_truth[c.tx_hash]["kind"]
            if kind in expected:
                assert c.failed_condition == expected[kind], c.tx_hash


def test_amount_magnitudes_span_range():
    ledger = generate(SynthPlan(seed=1, block_count=80))
    sizes = set()
    for block in ledger.blocks:
        for c in classify_block(block, ledger.registry, ledger.config):
            sizes.update(len(str(abs(v))) for v in c.delta.values())
    assert min(sizes) <= 2 and max(sizes) >= 24


def test_oracle_agrees_with_ground_truth(small_ledger):
    oracle = oracle_label_blocks(small_ledger)
    for h, label in small_ledger.ground_truth.items():
        o = oracle[h]
        assert (o["strategy"], o["N"], o["profit"]) == (label["strategy"], label["N"], label["profit"]), h


def test_oracle_from_files_matches_in_memory(small_ledger, ledger_dir):
    from_files = oracle_label_ledger(ledger_dir / "fixture.jsonl", ledger_dir / "pools.json",
                                     ledger_dir / "classifier.json")
    assert from_files == oracle_label_blocks(small_ledger)


def test_written_ledger_reloads(small_ledger, ledger_dir):
    assert PoolRegistry.load(ledger_dir / "pools.json").metas() == small_ledger.registry.metas()
