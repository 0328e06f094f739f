"""Atomic-arbitrage detection over EVM block data.

Pipeline: ingest (blocks + receipts) -> decode (swap legs) -> classify
(per-transaction verdict) -> analytics (time-bucketed aggregates).
"""

__version__ = "0.1.0"
