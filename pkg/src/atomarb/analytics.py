"""Fixed-length time-bucket aggregation of classifications (4-week buckets by default)."""

from __future__ import annotations

import bisect
import csv
import io
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import ROUND_HALF_EVEN, Decimal, localcontext
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional

from .model import AggregateRow, Classification, Strategy, normalize_hash

log = logging.getLogger(__name__)

DAY = 86400
DEFAULT_BUCKET_DAYS = 28

CSV_COLUMNS = (
    "bucket_index", "bucket_start_iso", "spam_tx_count", "fl_tx_count",
    "spam_mev_native", "fl_mev_native", "spam_mev_usd", "fl_mev_usd", "bids_native",
    "uniq_searchers_spam", "uniq_searchers_fl", "fl_tx_share", "fl_mev_share",
    "bid_to_mev_ratio",
)


class BeforeEpoch(ValueError):
    pass


def bucketize(timestamp: int, epoch_start: int, bucket_seconds: int = DEFAULT_BUCKET_DAYS * DAY) -> int:
    if timestamp < epoch_start:
        raise BeforeEpoch(f"timestamp {timestamp} precedes epoch start {epoch_start}")
    return (timestamp - epoch_start) // bucket_seconds


@dataclass(frozen=True)
class ExclusionList:
    entries: dict = field(default_factory=dict)  # tx hash -> reason

    def __contains__(self, tx_hash: str) -> bool:
        return tx_hash in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_json(cls, obj) -> "ExclusionList":
        return cls({normalize_hash(e["hash"]): e.get("reason", "") for e in obj.get("exclusions", [])})

    @classmethod
    def load(cls, path: "str | Path") -> "ExclusionList":
        return cls.from_json(json.loads(Path(path).read_text()))

    def to_json(self) -> dict:
        return {"exclusions": [{"hash": h, "reason": r} for h, r in sorted(self.entries.items())]}


@dataclass(frozen=True)
class UsdRateSeries:
    """Step function of common-currency -> USD rates; each rate holds until the next."""

    timestamps: tuple
    rates: tuple

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError("rate timestamps must be strictly increasing")
        if any(r <= 0 for r in self.rates):
            raise ValueError("rates must be positive")
        if len(self.timestamps) != len(self.rates):
            raise ValueError("timestamps and rates differ in length")

    def rate_at(self, timestamp: int) -> Optional[Fraction]:
        i = bisect.bisect_right(self.timestamps, timestamp)
        return self.rates[i - 1] if i else None

    @classmethod
    def from_json(cls, obj) -> "UsdRateSeries":
        points = sorted((int(p["timestamp"]), Fraction(p["rate"])) for p in obj["rates"])
        return cls(tuple(t for t, _ in points), tuple(r for _, r in points))

    @classmethod
    def load(cls, path: "str | Path") -> "UsdRateSeries":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class BucketTally:
    """Mergeable per-bucket accumulator; searchers kept as sets so merges are exact."""

    count: Counter = field(default_factory=Counter)
    volume: dict = field(default_factory=lambda: {Strategy.SPAM: Fraction(0), Strategy.FASTLANE: Fraction(0)})
    volume_usd: dict = field(default_factory=lambda: {Strategy.SPAM: Fraction(0), Strategy.FASTLANE: Fraction(0)})
    usd_missing: int = 0
    bids: Fraction = Fraction(0)
    bids_fastlane: Fraction = Fraction(0)
    searchers: dict = field(default_factory=lambda: {Strategy.SPAM: set(), Strategy.FASTLANE: set()})

    def add(self, c: Classification, usd_rate: Optional[Fraction]) -> None:
        if not c.is_aa:
            return
        s = c.strategy
        self.count[s] += 1
        self.volume[s] += c.profit
        if usd_rate is None:
            self.usd_missing += 1
        else:
            self.volume_usd[s] += c.profit * usd_rate
        self.bids += c.beta
        if s is Strategy.FASTLANE:
            self.bids_fastlane += c.beta
        self.searchers[s].add(c.searcher)

    def merge(self, other: "BucketTally") -> "BucketTally":
        out = BucketTally()
        out.count = self.count + other.count
        for s in (Strategy.SPAM, Strategy.FASTLANE):
            out.volume[s] = self.volume[s] + other.volume[s]
            out.volume_usd[s] = self.volume_usd[s] + other.volume_usd[s]
            out.searchers[s] = self.searchers[s] | other.searchers[s]
        out.usd_missing = self.usd_missing + other.usd_missing
        out.bids = self.bids + other.bids
        out.bids_fastlane = self.bids_fastlane + other.bids_fastlane
        return out

    def row(self, index: int, start: int, with_usd: bool) -> AggregateRow:
        spam, fl = self.count[Strategy.SPAM], self.count[Strategy.FASTLANE]
        v_spam, v_fl = self.volume[Strategy.SPAM], self.volume[Strategy.FASTLANE]
        usd_ok = with_usd and self.usd_missing == 0
        return AggregateRow(
            bucket_index=index,
            bucket_start=start,
            aa_tx_count_spam=spam,
            aa_tx_count_fastlane=fl,
            mev_volume_spam=v_spam,
            mev_volume_fastlane=v_fl,
            mev_volume_spam_usd=self.volume_usd[Strategy.SPAM] if usd_ok else None,
            mev_volume_fastlane_usd=self.volume_usd[Strategy.FASTLANE] if usd_ok else None,
            bids_total=self.bids,
            unique_searchers_spam=len(self.searchers[Strategy.SPAM]),
            unique_searchers_fastlane=len(self.searchers[Strategy.FASTLANE]),
            fastlane_tx_share=Fraction(fl, spam + fl) if spam + fl else None,
            fastlane_mev_share=v_fl / (v_spam + v_fl) if v_spam + v_fl > 0 else None,
            bid_to_mev_ratio=self.bids_fastlane / v_fl if v_fl > 0 else None,
        )


def aggregate(classifications: Iterable[Classification], exclusions: Optional[ExclusionList] = None,
              usd_rates: Optional[UsdRateSeries] = None, epoch_start: Optional[int] = None,
              bucket_days: int = DEFAULT_BUCKET_DAYS) -> list[AggregateRow]:
    """Per-bucket AA metrics from buckets 0 through the last bucket with any record.

    Excluded hashes are dropped before anything else, including epoch selection.
    Without ``epoch_start`` the earliest remaining timestamp anchors the grid.
    """
    if bucket_days <= 0:
        raise ValueError("bucket_days must be positive")
    bucket_seconds = bucket_days * DAY
    kept = [c for c in classifications if not (exclusions and c.tx_hash in exclusions)]
    if not kept:
        return []
    if epoch_start is None:
        epoch_start = min(c.timestamp for c in kept)

    tallies: dict[int, BucketTally] = {}
    skipped = 0
    for c in kept:
        try:
            idx = bucketize(c.timestamp, epoch_start, bucket_seconds)
        except BeforeEpoch as exc:
            skipped += 1
            log.warning("skipping %s: %s", c.tx_hash, exc)
            continue
        tally = tallies.setdefault(idx, BucketTally())
        tally.add(c, usd_rates.rate_at(c.timestamp) if usd_rates else None)
    if skipped:
        log.warning("%d classifications precede the epoch start", skipped)
    if not tallies:
        return []
    last = max(tallies)
    return [
        tallies.get(i, BucketTally()).row(i, epoch_start + i * bucket_seconds, usd_rates is not None)
        for i in range(last + 1)
    ]


def format_rational(value: Optional[Fraction], places: int = 18) -> str:
    """Decimal text, exact when possible, else rounded half-even to ``places`` digits."""
    if value is None:
        return ""
    with localcontext() as ctx:
        ctx.prec = 200
        d = Decimal(value.numerator) / Decimal(value.denominator)
        d = d.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_EVEN)
    text = format(d, "f")
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    return "0" if text in ("-0", "") else text


def iso_utc(ts: int) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def row_record(row: AggregateRow) -> dict:
    return {
        "bucket_index": row.bucket_index,
        "bucket_start_iso": iso_utc(row.bucket_start),
        "spam_tx_count": row.aa_tx_count_spam,
        "fl_tx_count": row.aa_tx_count_fastlane,
        "spam_mev_native": format_rational(row.mev_volume_spam),
        "fl_mev_native": format_rational(row.mev_volume_fastlane),
        "spam_mev_usd": format_rational(row.mev_volume_spam_usd),
        "fl_mev_usd": format_rational(row.mev_volume_fastlane_usd),
        "bids_native": format_rational(row.bids_total),
        "uniq_searchers_spam": row.unique_searchers_spam,
        "uniq_searchers_fl": row.unique_searchers_fastlane,
        "fl_tx_share": format_rational(row.fastlane_tx_share),
        "fl_mev_share": format_rational(row.fastlane_mev_share),
        "bid_to_mev_ratio": format_rational(row.bid_to_mev_ratio),
    }


def render_rows(rows: Iterable[AggregateRow], fmt: str = "csv") -> str:
    records = [row_record(r) for r in rows]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(records)
        return buf.getvalue()
    if fmt == "json":
        for rec in records:
            for key, val in rec.items():
                if val == "":
                    rec[key] = None
        return json.dumps(records, indent=1) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def export_rows(rows: Iterable[AggregateRow], fmt: str, path: "str | Path") -> None:
    Path(path).write_text(render_rows(rows, fmt), encoding="utf-8")
