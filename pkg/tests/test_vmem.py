"""Protection enforcement and fault-delivery semantics of the memory model."""

import threading

import pytest

from guardpool.vmem import (
    AccessKind,
    FaultAction,
    PROT_NONE,
    PROT_READ,
    PROT_WRITE,
    SegmentationFault,
    VirtualMemory,
)

RW = PROT_READ | PROT_WRITE


@pytest.fixture
def vm():
    return VirtualMemory(page_size=4096)


def test_reserve_returns_zero_filled_accessible_pages(vm):
    base = vm.reserve(2, prot=RW)
    assert vm.read(base, 2 * 4096) == bytes(2 * 4096)


def test_reserve_base_is_aligned_to_region_size(vm):
    base = vm.reserve(3)
    span = 3 * 4096
    align = 1 << (span - 1).bit_length()
    assert base % align == 0


def test_reservations_do_not_touch(vm):
    a = vm.reserve(1, prot=RW)
    b = vm.reserve(1, prot=RW)
    vm.write(a, b"x" * 4096)
    assert vm.read(b, 4096) == bytes(4096)


@pytest.mark.parametrize("page_size", [0, 3, 100, -4096])
def test_invalid_page_size_rejected(page_size):
    with pytest.raises(ValueError):
        VirtualMemory(page_size=page_size)


def test_read_of_protected_page_raises_by_default(vm):
    base = vm.reserve(1)  # PROT_NONE
    with pytest.raises(SegmentationFault) as excinfo:
        vm.read(base, 1)
    assert excinfo.value.fault.address == base
    assert excinfo.value.fault.access is AccessKind.READ


def test_write_needs_write_protection(vm):
    base = vm.reserve(1, prot=PROT_READ)
    vm.read(base, 16)
    with pytest.raises(SegmentationFault) as excinfo:
        vm.write(base + 5, b"z")
    assert excinfo.value.fault.address == base + 5
    assert excinfo.value.fault.access is AccessKind.WRITE


def test_unmapped_address_faults(vm):
    with pytest.raises(SegmentationFault):
        vm.read(0xDEAD0000, 1)


def test_protect_toggles_access(vm):
    base = vm.reserve(1)
    vm.protect(base, 4096, RW)
    vm.write(base, b"hello")
    vm.protect(base, 4096, PROT_NONE)
    with pytest.raises(SegmentationFault):
        vm.read(base, 5)
    # Contents survive protection changes.
    vm.protect(base, 4096, PROT_READ)
    assert vm.read(base, 5) == b"hello"


def test_protect_requires_page_alignment(vm):
    base = vm.reserve(1)
    with pytest.raises(ValueError):
        vm.protect(base + 1, 100, RW)


def test_protect_rejects_unmapped_range(vm):
    base = vm.reserve(1)
    with pytest.raises(ValueError):
        vm.protect(base, 2 * 4096, RW)


def test_multi_page_access_faults_on_the_exact_page(vm):
    base = vm.reserve(3, prot=RW)
    vm.protect(base + 4096, 4096, PROT_NONE)
    with pytest.raises(SegmentationFault) as excinfo:
        vm.read(base, 3 * 4096)
    # First page reads fine; the middle page faults at its first byte.
    assert excinfo.value.fault.address == base + 4096


def test_partial_write_prefix_persists_on_fault(vm):
    base = vm.reserve(2, prot=RW)
    vm.protect(base + 4096, 4096, PROT_NONE)
    with pytest.raises(SegmentationFault):
        vm.write(base + 4090, b"A" * 12)
    assert vm.read(base + 4090, 6) == b"A" * 6


def test_fill_ignores_protection(vm):
    base = vm.reserve(1)  # inaccessible
    vm.fill(base, 4096, 0xAB)
    vm.protect(base, 4096, PROT_READ)
    assert vm.read(base, 4096) == b"\xab" * 4096


def test_handler_resume_retries_the_access(vm):
    base = vm.reserve(1)
    seen = []

    def handler(fault):
        seen.append(fault.address)
        vm.protect(base, 4096, RW)
        return FaultAction.RESUME

    vm.install_fault_handler(handler)
    vm.write(base + 7, b"ok")
    assert seen == [base + 7]
    assert vm.read(base + 7, 2) == b"ok"


def test_handler_terminate_raises_segfault(vm):
    base = vm.reserve(1)
    vm.install_fault_handler(lambda fault: FaultAction.TERMINATE)
    with pytest.raises(SegmentationFault):
        vm.read(base, 1)


def test_install_returns_previous_handler_for_chaining(vm):
    base = vm.reserve(1)
    calls = []

    def first(fault):
        calls.append("first")
        return FaultAction.TERMINATE

    def second(fault):
        calls.append("second")
        return prev(fault)

    assert vm.install_fault_handler(first) is None
    prev = vm.install_fault_handler(second)
    assert prev is first
    with pytest.raises(SegmentationFault):
        vm.read(base, 1)
    assert calls == ["second", "first"]


def test_restore_fault_handler(vm):
    base = vm.reserve(1)
    handler = lambda fault: FaultAction.TERMINATE
    prev = vm.install_fault_handler(handler)
    vm.restore_fault_handler(prev)
    with pytest.raises(SegmentationFault):
        vm.read(base, 1)


def test_unresolvable_resume_loop_is_bounded(vm):
    base = vm.reserve(1)
    # Claims to resolve but never changes protections.
    vm.install_fault_handler(lambda fault: FaultAction.RESUME)
    with pytest.raises(RuntimeError, match="without making it accessible"):
        vm.read(base, 1)


def test_access_kind_hidden_when_not_exposed():
    vm = VirtualMemory(page_size=4096, expose_access_kind=False)
    base = vm.reserve(1)
    with pytest.raises(SegmentationFault) as excinfo:
        vm.write(base, b"x")
    assert excinfo.value.fault.access is None


def test_fault_count_increments_per_delivery(vm):
    base = vm.reserve(1)
    assert vm.fault_count == 0
    for _ in range(3):
        with pytest.raises(SegmentationFault):
            vm.read(base, 1)
    assert vm.fault_count == 3


def test_fault_reports_accessing_thread(vm):
    base = vm.reserve(1)
    fault_threads = []

    def handler(fault):
        fault_threads.append(fault.thread_id)
        return FaultAction.TERMINATE

    vm.install_fault_handler(handler)

    def worker():
        try:
            vm.read(base, 1)
        except SegmentationFault:
            pass

    thread = threading.Thread(target=worker)
    thread.start()
    thread.join()
    assert fault_threads == [thread.ident]
