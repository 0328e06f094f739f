import csv
import dataclasses
import io
import json
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atomarb.analytics import (
    CSV_COLUMNS,
    DAY,
    BeforeEpoch,
    BucketTally,
    ExclusionList,
    UsdRateSeries,
    aggregate,
    bucketize,
    export_rows,
    format_rational,
    render_rows,
)
from atomarb.model import Strategy

from helpers import addr, txh
from tally import FOUR_WEEKS, random_stream, record, tally_rows

EPOCH = 1_672_531_200


def as_dicts(rows):
    return [dataclasses.asdict(r) for r in rows]


@pytest.mark.parametrize("offset, bucket", [(0, 0), (28 * DAY, 1), (28 * DAY - 1, 0), (57 * DAY, 2)])
def test_bucketize(offset, bucket):
    assert bucketize(EPOCH + offset, EPOCH) == bucket


def test_bucketize_before_epoch():
    with pytest.raises(BeforeEpoch):
        bucketize(EPOCH - 1, EPOCH)


def test_empty_stream():
    assert aggregate([]) == []


def test_thirteen_of_hundred_fastlane_share():
    stream = [record(i, EPOCH + i * 60, Strategy.FASTLANE, Fraction(1), Fraction(1, 4)) for i in range(13)]
    stream += [record(100 + i, EPOCH + i * 60, Strategy.SPAM, Fraction(1)) for i in range(87)]
    [row] = aggregate(stream)
    assert row.fastlane_mev_share == Fraction(13, 100)
    assert row.fastlane_tx_share == Fraction(13, 100)
    assert row.bid_to_mev_ratio == Fraction(1, 4)
    assert row.bids_total == Fraction(13, 4)
    assert as_dicts([row]) == tally_rows(stream)


def test_excluded_hash_contributes_nothing():
    stream = [record(1, EPOCH, Strategy.SPAM, 5), record(2, EPOCH + 10, Strategy.FASTLANE, 7, 1)]
    rows = aggregate(stream, ExclusionList({txh(2): "exploit"}))
    assert as_dicts(rows) == as_dicts(aggregate(stream[:1]))
    assert rows[0].aa_tx_count_fastlane == 0 and rows[0].bids_total == 0


def test_not_aa_records_are_ignored_but_extend_nothing():
    stream = [record(1, EPOCH, Strategy.SPAM, 5), record(2, EPOCH + 3 * FOUR_WEEKS, Strategy.NOT_AA, -1)]
    rows = aggregate(stream)
    assert len(rows) == 4
    assert [r.aa_tx_count_spam for r in rows] == [1, 0, 0, 0]
    assert rows[1].fastlane_tx_share is None and rows[1].bid_to_mev_ratio is None


def test_thousand_random_records_match_tally_oracle():
    stream = random_stream(random.Random(42), 1000)
    assert as_dicts(aggregate(stream)) == tally_rows(stream)


def test_explicit_epoch_and_bucket_days():
    stream = random_stream(random.Random(4), 300)
    rows = aggregate(stream, epoch_start=EPOCH - 5 * DAY, bucket_days=7)
    assert as_dicts(rows) == tally_rows(stream, epoch=EPOCH - 5 * DAY, bucket_seconds=7 * DAY)


def test_records_before_epoch_are_skipped():
    stream = [record(1, EPOCH, Strategy.SPAM, 5), record(2, EPOCH + DAY, Strategy.SPAM, 7)]
    [row] = aggregate(stream, epoch_start=EPOCH + 1)
    assert row.aa_tx_count_spam == 1


def test_usd_step_function():
    series = UsdRateSeries((EPOCH, EPOCH + DAY), (Fraction(1, 2), Fraction(2)))
    assert series.rate_at(EPOCH - 1) is None
    assert series.rate_at(EPOCH) == Fraction(1, 2)
    assert series.rate_at(EPOCH + DAY - 1) == Fraction(1, 2)
    assert series.rate_at(EPOCH + DAY) == 2
    stream = [record(1, EPOCH + 5, Strategy.SPAM, 10), record(2, EPOCH + DAY + 5, Strategy.FASTLANE, 10)]
    [row] = aggregate(stream, usd_rates=series)
    assert row.mev_volume_spam_usd == 5 and row.mev_volume_fastlane_usd == 20


def test_missing_usd_rate_leaves_usd_empty():
    series = UsdRateSeries((EPOCH + DAY,), (Fraction(2),))
    stream = [record(1, EPOCH, Strategy.SPAM, 10)]
    [row] = aggregate(stream, usd_rates=series)
    assert row.mev_volume_spam_usd is None


def test_rate_series_validation():
    with pytest.raises(ValueError):
        UsdRateSeries((2, 1), (Fraction(1), Fraction(1)))
    with pytest.raises(ValueError):
        UsdRateSeries((1,), (Fraction(0),))


def test_usd_random_matches_oracle():
    rng = random.Random(9)
    stream = random_stream(rng, 500)
    points = [(EPOCH + d * DAY, Fraction(rng.randrange(1, 300), 100)) for d in range(0, 201)]
    series = UsdRateSeries(tuple(t for t, _ in points), tuple(r for _, r in points))
    assert as_dicts(aggregate(stream, usd_rates=series)) == tally_rows(stream, rates=points)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 300))
def test_invariants(seed, size):
    stream = random_stream(random.Random(seed), size)
    rows = aggregate(stream)
    aa = [c for c in stream if c.is_aa]
    assert sum(r.aa_tx_count_spam + r.aa_tx_count_fastlane for r in rows) == len(aa)
    assert sum(r.mev_volume_spam + r.mev_volume_fastlane for r in rows) == sum(c.profit for c in aa)
    assert sum(r.bids_total for r in rows) == sum(c.beta for c in aa)
    for r in rows:
        for share in (r.fastlane_tx_share, r.fastlane_mev_share):
            assert share is None or 0 <= share <= 1
        assert r.aa_tx_count_spam >= 0 and r.aa_tx_count_fastlane >= 0
        assert (r.bid_to_mev_ratio is None) == (r.mev_volume_fastlane == 0)
    shuffled = list(stream)
    random.Random(seed).shuffle(shuffled)
    assert aggregate(shuffled, epoch_start=min(c.timestamp for c in stream)) == \
        aggregate(stream, epoch_start=min(c.timestamp for c in stream))


def test_tally_merge_is_order_free():
    stream = random_stream(random.Random(3), 200)
    parts = [BucketTally() for _ in range(3)]
    whole = BucketTally()
    for i, c in enumerate(stream):
        parts[i % 3].add(c, None)
        whole.add(c, None)
    a = parts[0].merge(parts[1]).merge(parts[2])
    b = parts[2].merge(parts[0].merge(parts[1]))
    assert a.row(0, 0, False) == b.row(0, 0, False) == whole.row(0, 0, False)


def test_exclusion_list_json(tmp_path):
    ex = ExclusionList({txh(1): "exploit"})
    path = tmp_path / "ex.json"
    path.write_text(json.dumps(ex.to_json()))
    assert ExclusionList.load(path) == ex
    with pytest.raises(ValueError):
        ExclusionList.from_json({"exclusions": [{"hash": "0x12"}]})


@pytest.mark.parametrize("value, text", [
    (None, ""), (Fraction(0), "0"), (Fraction(3121, 10000), "0.3121"), (Fraction(-5, 2), "-2.5"),
    (Fraction(1, 3), "0.333333333333333333"), (Fraction(2, 3), "0.666666666666666667"), (Fraction(7), "7"),
])
def test_format_rational(value, text):
    assert format_rational(value) == text


def test_csv_columns_and_determinism(tmp_path):
    stream = random_stream(random.Random(5), 300)
    rows = aggregate(stream)
    export_rows(rows, "csv", tmp_path / "a.csv")
    export_rows(aggregate(list(reversed(stream))), "csv", tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    parsed = list(csv.reader(io.StringIO((tmp_path / "a.csv").read_text())))
    assert tuple(parsed[0]) == CSV_COLUMNS
    assert len(parsed) == len(rows) + 1
    assert parsed[1][1].endswith("Z")


def test_json_output_uses_null_for_missing():
    rows = aggregate([record(1, EPOCH, Strategy.SPAM, 5)])
    [obj] = json.loads(render_rows(rows, "json"))
    assert obj["bid_to_mev_ratio"] is None and obj["spam_mev_native"] == "5"
    assert list(obj) == list(CSV_COLUMNS)
