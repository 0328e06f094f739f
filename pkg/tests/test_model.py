from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from atomarb.model import (
    Address,
    Classification,
    DeltaVector,
    PriceTable,
    RawLog,
    Strategy,
    TokenAmount,
    delta_add,
    parse_amount,
    render_amount,
)

from helpers import addr, txh

TOKENS = [addr(i) for i in range(1, 6)]
X, Y = TOKENS[0], TOKENS[1]

big_ints = st.integers(min_value=-(10**30), max_value=10**30)
vectors = st.dictionaries(st.sampled_from(TOKENS), big_ints, max_size=5)


def entrywise_sum(a: dict, b: dict) -> dict:
    keys = set(a) | set(b)
    total = {k: a.get(k, 0) + b.get(k, 0) for k in keys}
    return {k: v for k, v in total.items() if v != 0}


def test_delta_add_cancels_to_empty():
    assert delta_add(DeltaVector({X: 5}), DeltaVector({X: -5})) == DeltaVector()
    assert len(delta_add(DeltaVector({X: 5}), DeltaVector({X: -5}))) == 0


def test_delta_add_disjoint_keys():
    assert delta_add(DeltaVector({X: 3}), DeltaVector({Y: 2})) == {X: 3, Y: 2}


@given(vectors, vectors)
def test_delta_add_matches_entrywise_oracle(a, b):
    assert dict(delta_add(DeltaVector(a), DeltaVector(b))) == entrywise_sum(a, b)


@given(vectors, vectors, vectors)
def test_delta_add_is_a_commutative_monoid(a, b, c):
    a, b, c = DeltaVector(a), DeltaVector(b), DeltaVector(c)
    assert a + b == b + a
    assert (a + b) + c == a + (b + c)
    assert a + DeltaVector() == a


@given(vectors)
def test_delta_vector_never_stores_zeros(a):
    assert all(v != 0 for v in DeltaVector(a).values())


@pytest.mark.parametrize("raw, decimals, text", [
    (3121000000000000000, 18, "3.121"),
    (0, 18, "0"),
    (-5001800000000000000, 18, "-5.0018"),
    (62000000, 8, "0.62"),
    (7, 0, "7"),
    (1, 36, "0." + "0" * 35 + "1"),
])
def test_render_amount(raw, decimals, text):
    assert render_amount(raw, decimals) == text
    assert parse_amount(text, decimals) == raw


@given(st.integers(min_value=-(10**40), max_value=10**40), st.integers(min_value=0, max_value=36))
def test_render_parse_round_trip(raw, decimals):
    t = TokenAmount(raw, decimals)
    assert TokenAmount.parse(str(t), decimals) == t


def test_parse_rejects_excess_precision():
    with pytest.raises(ValueError):
        parse_amount("1.123", 2)


@given(big_ints, big_ints)
def test_token_amount_arithmetic_is_exact(a, b):
    x, y = TokenAmount(a, 18), TokenAmount(b, 18)
    assert (x + y) - y == x


def test_token_amounts_refuse_mixed_decimals():
    with pytest.raises(ValueError):
        TokenAmount(1, 18) + TokenAmount(1, 6)


@given(st.binary(min_size=20, max_size=20))
def test_address_round_trip(raw):
    a = Address(raw)
    assert Address(str(a)) == a
    assert a.to_bytes() == raw
    assert Address.from_word(a.to_word()) == a


@pytest.mark.parametrize("bad", ["0x1234", "1" * 40, "0x" + "g" * 40, b"\x00" * 19])
def test_address_rejects_malformed(bad):
    with pytest.raises(ValueError):
        Address(bad)


def test_address_normalises_case():
    assert Address("0x" + "AB" * 20) == "0x" + "ab" * 20


def test_raw_log_limits_topics():
    with pytest.raises(ValueError):
        RawLog(addr(1), (bytes(32),) * 5, b"", 0)


def test_price_table_requires_unit_common_currency():
    with pytest.raises(ValueError):
        PriceTable(X, {X: Fraction(2)})
    with pytest.raises(ValueError):
        PriceTable(X, {Y: Fraction(-1)})
    assert PriceTable(X, {}).price_of(X) == 1


def _classification(**kw):
    base = dict(tx_hash=txh(9), block_number=1, tx_index=0, timestamp=10, strategy=Strategy.SPAM,
                swap_count=2, delta=DeltaVector({X: 5}), gross_value=Fraction(5), tau=Fraction(1),
                beta=Fraction(1, 2), profit=Fraction(7, 2), searcher=Y)
    base.update(kw)
    return Classification(**base)


def test_classification_profit_identity_enforced():
    with pytest.raises(ValueError):
        _classification(profit=Fraction(4))


@given(st.fractions(), st.fractions(min_value=0), st.fractions(min_value=0))
def test_classification_json_round_trip_keeps_profit_identity(gross, tau, beta):
    c = _classification(gross_value=gross, tau=tau, beta=beta, profit=gross - tau - beta)
    back = Classification.from_json(c.to_json())
    assert back == c
    assert back.profit == back.gross_value - back.tau - back.beta


def test_is_aa_tracks_strategy():
    assert _classification().is_aa
    assert not _classification(strategy=Strategy.NOT_AA).is_aa
    obj = _classification().to_json()
    obj["is_aa"] = False
    with pytest.raises(ValueError):
        Classification.from_json(obj)
