"""Allocator front end: sampling, routing, and free-path validation.

GuardianAllocator wraps a host allocator (here FallbackAllocator, a
bump-plus-freelist arena in the same modeled address space).  malloc
asks the sampling policy; almost always the answer is no and the call
forwards with one decrement of bookkeeping.  Sampled requests that fit
a page go to the guarded pool, get their stack captured and recorded,
and are registered with the coverage filter.  free routes by the
constant-time region test; guarded frees are validated, so double frees
and mid-object frees are detected directly by the shim without any
page fault.

Per-process enablement happens at construction: a disabled allocator
reserves no pool pages and rebinds its entry points straight to the
fallback's bound methods, making the disabled tool bit-identical to no
tool at all.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Optional, TextIO

from .coverage import CoverageFilter, source_of
from .metadata import MetadataStore, capture_trace, decompress_trace
from .pool import (
    AddressKind,
    AlignmentSide,
    GuardedPool,
    PoolConfig,
    PoolUnavailableError,
    SlotState,
)
from .reporter import (
    AccessType,
    ErrorReport,
    Reporter,
    ReporterConfig,
    ReportKind,
)
from .sampler import (
    CounterSampler,
    ProcessSampleConfig,
    TimerGate,
    Xorshift64Star,
    process_sampling_decision,
    splitmix64,
)
from .vmem import PROT_READ, PROT_WRITE, VirtualMemory

_MASK64 = (1 << 64) - 1


class FallbackAllocator:
    """Host allocator stand-in: bump arena with exact-size free lists.

    Recycles freed blocks without scrubbing them, like a production
    malloc fast path; newly carved arena space is zero because the
    backing reservation is anonymous.
    """

    def __init__(self, vm: VirtualMemory, initial_pages: int = 64):
        self.vm = vm
        self._lock = threading.Lock()
        self._regions: list[tuple[int, int]] = []
        self._cursor = 0
        self._limit = 0
        self._grow_pages = max(initial_pages, 1)
        self._sizes: dict[int, tuple[int, int]] = {}  # addr -> (size, alignment)
        self._free: dict[tuple[int, int], list[int]] = {}

    def malloc(self, size: int, alignment: int = 16) -> int:
        if size < 0:
            raise ValueError(f"size must be non-negative, got {size}")
        if alignment < 1 or alignment & (alignment - 1):
            raise ValueError(f"alignment must be a power of two, got {alignment}")
        with self._lock:
            bucket = self._free.get((size, alignment))
            if bucket:
                addr = bucket.pop()
                self._sizes[addr] = (size, alignment)
                return addr
            span = max(size, 1)
            addr = -(-self._cursor // alignment) * alignment
            if addr + span > self._limit:
                self._grow(span + alignment)
                addr = -(-self._cursor // alignment) * alignment
            self._cursor = addr + span
            self._sizes[addr] = (size, alignment)
            return addr

    def free(self, addr: int) -> None:
        if not addr:
            return
        with self._lock:
            size, alignment = self._sizes.pop(addr)
            self._free.setdefault((size, alignment), []).append(addr)

    def calloc(self, count: int, size: int) -> int:
        total = count * size
        addr = self.malloc(total)
        if total:
            self.vm.fill(addr, total, 0)
        return addr

    def usable_size(self, addr: int) -> int:
        return self._sizes[addr][0]

    def owns(self, addr: int) -> bool:
        with self._lock:
            return addr in self._sizes

    def _grow(self, need: int) -> None:
        pages = max(self._grow_pages, -(-need // self.vm.page_size))
        base = self.vm.reserve(pages, PROT_READ | PROT_WRITE)
        self._regions.append((base, pages * self.vm.page_size))
        self._cursor = base
        self._limit = base + pages * self.vm.page_size
        self._grow_pages *= 2


@dataclass
class GuardianConfig:
    """Everything a deployment tunes, with small-test-friendly defaults."""

    slot_count: int = 16
    max_live: Optional[int] = None
    quarantine_min_slots: int = 0
    metadata_capacity: Optional[int] = None  # defaults to slot_count
    max_frames: int = 64
    policy: str = "counter"  # "counter" or "timer"
    sample_rate: int = 5000
    sample_interval: float = 0.1
    timer_clock: Optional[object] = None  # injectable clock for the timer policy
    process_sample_probability: float = 1.0
    seed: Optional[int] = None
    recoverable: bool = False
    min_alignment: int = 16
    force_alignment_side: Optional[AlignmentSide] = None
    coverage_enabled: bool = True
    coverage_threshold: float = 0.75
    sink: Optional[TextIO] = None
    enabled: bool = True  # False models running with no tool linked in

    def validate(self) -> None:
        if self.policy not in ("counter", "timer"):
            raise ValueError(f"policy must be 'counter' or 'timer', got {self.policy!r}")
        if self.sample_rate < 1:
            raise ValueError(f"sample_rate must be >= 1, got {self.sample_rate}")
        if self.sample_interval <= 0:
            raise ValueError(f"sample_interval must be positive, got {self.sample_interval}")
        if self.min_alignment < 1 or self.min_alignment & (self.min_alignment - 1):
            raise ValueError(f"min_alignment must be a power of two, got {self.min_alignment}")
        if self.metadata_capacity is not None and self.metadata_capacity < 1:
            raise ValueError("metadata_capacity must be >= 1")


@dataclass
class AllocatorStats:
    """Slow-path counters only: the unsampled path is deliberately unobserved."""

    sampled: int = 0
    guarded: int = 0
    pool_unavailable: int = 0
    oversized: int = 0
    coverage_rejected: int = 0
    double_free: int = 0
    invalid_free: int = 0


class GuardianAllocator:
    """The user-facing allocator. See create() for the usual entry point."""

    def __init__(self, config: Optional[GuardianConfig] = None, vm: Optional[VirtualMemory] = None):
        self.config = config or GuardianConfig()
        self.config.validate()
        self.vm = vm if vm is not None else VirtualMemory()
        self.fallback = FallbackAllocator(self.vm)
        self.stats = AllocatorStats()

        self.pool: Optional[GuardedPool] = None
        self.store: Optional[MetadataStore] = None
        self.coverage: Optional[CoverageFilter] = None
        self.reporter: Optional[Reporter] = None
        self._sampler = None
        self._sampling_off = False

        seed = self.config.seed
        launch_rng = None
        if seed is not None:
            launch_rng = Xorshift64Star(splitmix64((seed ^ 0x70726F63) & _MASK64))
        decision = self.config.enabled and process_sampling_decision(
            ProcessSampleConfig(self.config.process_sample_probability), launch_rng
        )
        if decision:
            try:
                self._enable()
            except PoolUnavailableError:
                # No pool, no tool: behave exactly as if sampling had
                # been disabled for this launch.
                self.pool = None
        self.enabled = self.pool is not None
        if not self.enabled:
            self._bind_passthrough()

    @classmethod
    def create(cls, config: Optional[GuardianConfig] = None,
               vm: Optional[VirtualMemory] = None) -> "GuardianAllocator":
        return cls(config, vm)

    def _enable(self) -> None:
        cfg = self.config
        pool_config = PoolConfig(
            slot_count=cfg.slot_count,
            max_live=cfg.max_live,
            quarantine_min_slots=cfg.quarantine_min_slots,
            seed=cfg.seed,
            force_alignment_side=cfg.force_alignment_side,
        )
        self.pool = GuardedPool(pool_config, self.vm)
        capacity = cfg.metadata_capacity if cfg.metadata_capacity is not None else cfg.slot_count
        self.store = MetadataStore(capacity, cfg.max_frames)
        if cfg.coverage_enabled:
            self.coverage = CoverageFilter(utilization_threshold=cfg.coverage_threshold)
        self.reporter = Reporter(
            self.pool,
            self.store,
            ReporterConfig(recoverable=cfg.recoverable, sink=cfg.sink),
            on_disable=self._stop_sampling,
        )
        self.reporter.install(self.vm)
        if cfg.policy == "counter":
            self._sampler = CounterSampler(cfg.sample_rate, cfg.seed)
        else:
            clock = cfg.timer_clock
            self._sampler = (
                TimerGate(cfg.sample_interval, clock) if clock is not None
                else TimerGate(cfg.sample_interval)
            )

    def _bind_passthrough(self) -> None:
        # Bound-method rebinding: a disabled allocator IS the fallback,
        # so the "tool present but off" cost is one attribute lookup.
        self.malloc = self.fallback.malloc
        self.free = self.fallback.free
        self.usable_size = self.fallback.usable_size

    def _stop_sampling(self) -> None:
        """Recovery hook: never route another allocation to the pool."""
        self._sampling_off = True

    # -- allocation entry points ------------------------------------------

    def malloc(self, size: int, alignment: int = 0) -> int:
        if self._sampling_off or not self._sampler.want_to_sample():
            return self.fallback.malloc(size, alignment or self.config.min_alignment)
        return self._guarded_malloc(size, alignment)

    def calloc(self, count: int, size: int) -> int:
        if count < 0 or size < 0:
            raise ValueError("calloc arguments must be non-negative")
        total = count * size
        addr = self.malloc(total)
        # Guarded slots are scrubbed on acquire; recycled fallback
        # blocks are not, so calloc zeroes explicitly there.
        if total and not self.is_guarded(addr):
            self.vm.fill(addr, total, 0)
        return addr

    def realloc(self, addr: int, size: int) -> int:
        """Move-based realloc: fresh sampling decision for the new block."""
        if not addr:
            return self.malloc(size)
        old_size = self.usable_size(addr)
        new_addr = self.malloc(size)
        copy = min(old_size, size)
        if copy:
            self.vm.write(new_addr, self.vm.read(addr, copy))
        self.free(addr)
        return new_addr

    def free(self, addr: int) -> None:
        if not addr:
            return
        if self.pool is not None and self.pool.contains(addr):
            self._guarded_free(addr)
            return
        self.fallback.free(addr)

    def usable_size(self, addr: int) -> int:
        if self.pool is not None and self.pool.contains(addr):
            classification = self.pool.classify_address(addr)
            if classification.kind is AddressKind.ALLOCATED_SLOT:
                # Requested size, not page capacity: keeps byte-exact
                # bounds so off-by-one reads past the request still
                # look like bugs to callers honoring usable_size.
                return self.pool.slots[classification.slot_index].user_size
            raise ValueError(f"0x{addr:x} is not a live guarded allocation")
        return self.fallback.usable_size(addr)

    def is_guarded(self, addr: int) -> bool:
        """Constant-time ownership test, safe from any thread."""
        return self.pool is not None and self.pool.contains(addr)

    def destroy(self) -> None:
        """Detach from the fault-handler chain; the reservation stays.

        Guarded pointers may outlive the allocator object, so the pool
        pages are never returned to the platform.
        """
        if self.reporter is not None:
            self.reporter.uninstall()
        self._sampling_off = True

    # -- slow paths ----------------------------------------------------------

    def _guarded_malloc(self, size: int, alignment: int) -> int:
        self.stats.sampled += 1
        pool = self.pool
        effective_alignment = max(alignment, self.config.min_alignment)
        if size <= 0 or size > pool.page_size or effective_alignment > pool.page_size:
            # Wasted sample: the request cannot be guarded.
            self.stats.oversized += 1
            return self.fallback.malloc(size, alignment or self.config.min_alignment)

        trace = capture_trace(self.config.max_frames)
        thread_id = threading.get_ident()
        with pool.lock:
            source = None
            if self.coverage is not None:
                source = source_of(trace)
                utilization = pool.live_count / pool.max_live
                if not self.coverage.admit(utilization, source):
                    self.stats.coverage_rejected += 1
                    return self.fallback.malloc(size, effective_alignment)
            acquired = pool.acquire(size, effective_alignment)
            if acquired is None:
                self.stats.pool_unavailable += 1
                return self.fallback.malloc(size, effective_alignment)
            slot_index, user_address = acquired
            slot = pool.slots[slot_index]
            slot.metadata_index, slot.metadata_seq = self.store.store_alloc(
                slot_index, size, thread_id, trace
            )
            if self.coverage is not None:
                slot.coverage_source = source
                self.coverage.insert(source)
                if self.coverage.needs_rebuild():
                    self.coverage.rebuild(
                        s.coverage_source
                        for s in pool.slots
                        if s.coverage_source is not None and s.state is SlotState.ALLOCATED
                    )
            self.stats.guarded += 1
            return user_address

    def _guarded_free(self, addr: int) -> None:
        pool = self.pool
        report = None
        with pool.lock:
            classification = pool.classify_address(addr)
            if classification.kind is AddressKind.ALLOCATED_SLOT:
                slot_index = classification.slot_index
                slot = pool.slots[slot_index]
                user_address = pool.user_address(slot_index)
                if addr == user_address:
                    self.store.store_dealloc(
                        slot.metadata_index,
                        slot.metadata_seq,
                        threading.get_ident(),
                        capture_trace(self.config.max_frames),
                    )
                    if self.coverage is not None and slot.coverage_source is not None:
                        self.coverage.remove(slot.coverage_source)
                    pool.release(slot_index)
                    return
                report = self._free_error_report(
                    ReportKind.INVALID_FREE, addr, slot_index
                )
                self.stats.invalid_free += 1
            elif classification.kind is AddressKind.QUARANTINED_SLOT:
                report = self._free_error_report(
                    ReportKind.DOUBLE_FREE, addr, classification.slot_index
                )
                self.stats.double_free += 1
            else:
                # Guard page or free slot: never a valid pointer.
                report = self._free_error_report(
                    ReportKind.INVALID_FREE, addr, classification.slot_index
                )
                self.stats.invalid_free += 1
        # Emitting outside the pool lock: the reporter may terminate.
        self.reporter.emit_synthetic(report)

    def _free_error_report(
        self, kind: ReportKind, addr: int, slot_index: Optional[int]
    ) -> ErrorReport:
        access_trace = capture_trace(self.config.max_frames)
        thread_id = threading.get_ident()
        if slot_index is None:
            return ErrorReport(
                kind=kind,
                access_address=addr,
                access_kind=AccessType.UNKNOWN,
                faulting_thread=thread_id,
                access_trace=access_trace,
                metadata_lost=True,
            )
        slot = self.pool.slots[slot_index]
        allocation_address = self.pool.slot_page_addr(slot_index) + slot.user_offset
        snapshot = self.store.snapshot(slot.metadata_index, slot.metadata_seq)
        if snapshot is None:
            return ErrorReport(
                kind=kind,
                access_address=addr,
                access_kind=AccessType.UNKNOWN,
                faulting_thread=thread_id,
                access_trace=access_trace,
                allocation_address=allocation_address,
                allocation_size=slot.user_size,
                metadata_lost=True,
            )
        return ErrorReport(
            kind=kind,
            access_address=addr,
            access_kind=AccessType.UNKNOWN,
            faulting_thread=thread_id,
            access_trace=access_trace,
            allocation_address=allocation_address,
            allocation_size=snapshot.user_size,
            alloc_thread=snapshot.alloc_thread,
            alloc_trace=decompress_trace(snapshot.alloc_trace),
            dealloc_thread=snapshot.dealloc_thread,
            dealloc_trace=(
                decompress_trace(snapshot.dealloc_trace)
                if snapshot.dealloc_trace is not None
                else None
            ),
            metadata_lost=False,
        )

    # -- introspection ---------------------------------------------------------

    def estimated_resident_bytes(self) -> int:
        """Touched-memory footprint: live-capable slot pages plus metadata.

        Guard pages and quarantined pages are reserved but never
        touched, so they cost address space, not memory.
        """
        if self.pool is None:
            return 0
        slot_bytes = self.pool.max_live * self.pool.page_size
        metadata_bytes = 0
        if self.store is not None:
            per_record_overhead = 64  # fixed fields of one record
            metadata_bytes = (
                self.store.capacity * per_record_overhead
                + self.store.accounted_trace_bytes()
            )
        filter_bytes = self.coverage.counters // 2 if self.coverage is not None else 0
        return slot_bytes + metadata_bytes + filter_bytes
