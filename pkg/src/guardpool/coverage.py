"""Allocation-site coverage policy for slot admission under pressure.

With a small pool, one hot allocation site can monopolize every slot
and starve rare call sites of coverage.  The policy: while pool
utilization is below a threshold, admit everything; at or above it,
admit only call sites that do not already hold a slot.  Site identity
is a 64-bit hash of the allocation stack trace, membership is tracked
in a counting Bloom filter sized for trivial memory cost, and counters
saturate rather than wrap so a degraded filter errs toward admitting.

All mutation happens under the owning allocator's pool lock; query is
read-only and safe anywhere.
"""

from __future__ import annotations

from typing import Iterable, Sequence

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

# Hash of the empty trace: capture failures still get a stable identity.
EMPTY_TRACE_SOURCE = _FNV_OFFSET


def source_of(trace: Sequence[int]) -> int:
    """FNV-1a over the trace pcs, each folded in as 8 LE bytes."""
    h = _FNV_OFFSET
    for pc in trace:
        for byte in (pc & _MASK64).to_bytes(8, "little"):
            h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


class CoverageFilter:
    """Counting Bloom filter keyed by allocation-site hash.

    counter_bits=4 gives saturation at 15; a saturated counter is never
    decremented (the count is no longer trustworthy), so heavy churn
    through one site can only make the filter over-admit, never drop a
    live site.  needs_rebuild() reports when saturation has accumulated
    enough that the owner should rebuild from the live slots.
    """

    def __init__(
        self,
        counters: int = 1024,
        hashes: int = 2,
        utilization_threshold: float = 0.75,
        counter_bits: int = 4,
        rebuild_saturation_fraction: float = 0.01,
    ):
        if counters < 1 or counters & (counters - 1):
            raise ValueError(f"counters must be a power of two, got {counters}")
        if hashes < 1:
            raise ValueError("hashes must be >= 1")
        if not 0.0 < utilization_threshold <= 1.0:
            raise ValueError(
                f"utilization_threshold must be in (0, 1], got {utilization_threshold}"
            )
        self.counters = counters
        self.hashes = hashes
        self.utilization_threshold = utilization_threshold
        self.counter_max = (1 << counter_bits) - 1
        self.rebuild_saturation_fraction = rebuild_saturation_fraction
        self._table = [0] * counters
        self._saturated = 0

    def _indexes(self, source: int) -> list[int]:
        # Double hashing from the two 32-bit halves; the odd step makes
        # every probe sequence cover the power-of-two table.
        h1 = source & 0xFFFFFFFF
        h2 = ((source >> 32) | 1) & 0xFFFFFFFF
        return [(h1 + i * h2) % self.counters for i in range(self.hashes)]

    def insert(self, source: int) -> None:
        for idx in self._indexes(source):
            count = self._table[idx]
            if count >= self.counter_max:
                continue
            self._table[idx] = count + 1
            if count + 1 == self.counter_max:
                self._saturated += 1

    def remove(self, source: int) -> None:
        """Decrement the source's counters; saturated counters stay put."""
        for idx in self._indexes(source):
            count = self._table[idx]
            if count >= self.counter_max or count == 0:
                continue
            self._table[idx] = count - 1

    def query(self, source: int) -> bool:
        """True if the source may hold a slot (no false negatives)."""
        return all(self._table[idx] > 0 for idx in self._indexes(source))

    def admit(self, pool_utilization: float, source: int) -> bool:
        """Admission decision; on True the caller inserts after acquiring."""
        if pool_utilization < self.utilization_threshold:
            return True
        return not self.query(source)

    @property
    def saturated_count(self) -> int:
        return self._saturated

    def needs_rebuild(self) -> bool:
        return self._saturated > self.rebuild_saturation_fraction * self.counters

    def rebuild(self, live_sources: Iterable[int]) -> None:
        """Reset and re-insert the given live sources (under the pool lock)."""
        self._table = [0] * self.counters
        self._saturated = 0
        for source in live_sources:
            self.insert(source)
