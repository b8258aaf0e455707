"""Emulated smart-storage device.

A software stand-in for a computational storage drive: an array of
processing elements with private scratchpads, two memory regions (DDR and
NVM, the latter with configurable extra latency), a page pool whose space
is managed by the host, and a transfer ledger that accounts every byte
moved.  Modeled time is derived purely from ledger counters and the
configured rates, so identical call sequences always cost the same.

Byte movement comes in two flavors:

* raw region reads/writes (``read``/``write``) charge exactly the bytes
  they move — the conservation invariant holds over these;
* fine-grained navigation accessors (``pe_read_vid_entry``, ``pe_read_l2p``,
  ``pe_read_slot``, ``pe_probe_header``) charge the fixed modeled transfer
  sizes of the movement model (8B map entry, 4B address resolution, 4B slot,
  4B header probe) regardless of how much metadata the emulator decodes to
  serve them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import (
    AccessDenied,
    CorruptRecord,
    InvalidConfig,
    OutOfRange,
    OutOfSpace,
)
from .layout import PAGE_SIZE, SLOT_ENTRY_SIZE

GIB = 1024 ** 3

REGION_DDR = "DDR"
REGION_NVM = "NVM"

_SLOT = struct.Struct("<HH")
_PROBE = struct.Struct("<QQB")   # create_ts, pred, flags at record offset 8

# Modeled transfer sizes for in-situ navigation.
VID_ENTRY_BYTES = 8
L2P_ENTRY_BYTES = 4
SLOT_READ_BYTES = 4
HEADER_PROBE_BYTES = 4

# Propagation message accounting (bytes per element).
PROP_VID_ENTRY_BYTES = 16        # vid + record id
PROP_L2P_ENTRY_BYTES = 12        # page lid + packed location
PROP_TX_ENTRY_BYTES = 8
PROP_FIXED_BYTES = 16


@dataclass
class DeviceConfig:
    """Device parameters; defaults follow the modeled hardware profile.

    Bandwidths are GiB/s; the internal pair is read/write inside the
    device, the host pair is the host-link read/write direction.
    """

    pe_count: int = 8
    scratchpad_bytes: int = 64 * 1024
    pe_clock_hz: int = 200_000_000
    internal_read_gib_s: float = 16.0
    internal_write_gib_s: float = 30.0
    host_read_gib_s: float = 6.4
    host_write_gib_s: float = 12.0
    nvm_read_latency_ns: int = 300
    nvm_write_latency_ns: int = 1000
    # Plumbing knobs (explicit configuration, not hardware claims):
    ddr_capacity_pages: int = 16384
    nvm_capacity_pages: int = 65536
    host_roundtrip_ns: int = 5000
    pe_record_cost_cycles: int = 0
    stream_buffer_count: int = 2
    stream_buffer_bytes: int = 64 * 1024

    def validate(self):
        if not (1 <= self.pe_count <= 8):
            raise InvalidConfig(f"pe_count must be in [1,8], got {self.pe_count}")
        if self.scratchpad_bytes <= 0:
            raise InvalidConfig("scratchpad_bytes must be positive")
        for name in ("internal_read_gib_s", "internal_write_gib_s",
                     "host_read_gib_s", "host_write_gib_s"):
            if getattr(self, name) <= 0:
                raise InvalidConfig(f"{name} must be > 0")
        if self.nvm_read_latency_ns < 0 or self.nvm_write_latency_ns < 0:
            raise InvalidConfig("NVM latencies must be >= 0")
        if self.ddr_capacity_pages <= 0 or self.nvm_capacity_pages <= 0:
            raise InvalidConfig("region capacities must be positive")
        if self.stream_buffer_count <= 0 or self.stream_buffer_bytes <= 0:
            raise InvalidConfig("stream buffer budget must be positive")
        if self.pe_clock_hz <= 0:
            raise InvalidConfig("pe_clock_hz must be positive")


_COUNTERS = (
    "device_internal_bytes_read",
    "device_internal_bytes_written",
    "device_to_host_bytes",
    "host_to_device_bytes",
    "nvm_reads",
    "nvm_writes",
    "host_roundtrips",
    "records_processed",
)


class TransferLedger:
    """Byte- and operation-granular movement accounting."""

    __slots__ = _COUNTERS + ("pe_ops",)

    def __init__(self):
        for name in _COUNTERS:
            setattr(self, name, 0)
        self.pe_ops: dict = {}       # pe index -> {op name: count}

    @property
    def nvm_accesses(self) -> int:
        return self.nvm_reads + self.nvm_writes

    def pe_op(self, pe: int, op: str, n: int = 1):
        ops = self.pe_ops.setdefault(pe, {})
        ops[op] = ops.get(op, 0) + n

    def op_total(self, op: str) -> int:
        return sum(ops.get(op, 0) for ops in self.pe_ops.values())

    def snapshot(self) -> dict:
        snap = {name: getattr(self, name) for name in _COUNTERS}
        snap["pe_ops"] = {pe: dict(ops) for pe, ops in self.pe_ops.items()}
        return snap

    def delta_since(self, snap: dict) -> dict:
        delta = {name: getattr(self, name) - snap[name] for name in _COUNTERS}
        pe_delta: dict = {}
        for pe, ops in self.pe_ops.items():
            before = snap["pe_ops"].get(pe, {})
            d = {op: n - before.get(op, 0) for op, n in ops.items() if n != before.get(op, 0)}
            if d:
                pe_delta[pe] = d
        delta["pe_ops"] = pe_delta
        return delta

    def counters(self) -> dict:
        return {name: getattr(self, name) for name in _COUNTERS}


def _transfer_ns(nbytes: int, gib_s: float) -> float:
    return nbytes / (gib_s * GIB) * 1e9


def modeled_time(ledger, cfg: DeviceConfig) -> dict:
    """Nanoseconds by category, derived only from counters and rates."""
    get = ledger.get if isinstance(ledger, dict) else lambda k: getattr(ledger, k)
    t = {
        "internal_read_ns": _transfer_ns(get("device_internal_bytes_read"), cfg.internal_read_gib_s),
        "internal_write_ns": _transfer_ns(get("device_internal_bytes_written"), cfg.internal_write_gib_s),
        "device_to_host_ns": _transfer_ns(get("device_to_host_bytes"), cfg.host_read_gib_s),
        "host_to_device_ns": _transfer_ns(get("host_to_device_bytes"), cfg.host_write_gib_s),
        "nvm_ns": float(get("nvm_reads") * cfg.nvm_read_latency_ns
                        + get("nvm_writes") * cfg.nvm_write_latency_ns),
        "roundtrip_ns": float(get("host_roundtrips") * cfg.host_roundtrip_ns),
        "pe_compute_ns": get("records_processed") * cfg.pe_record_cost_cycles / cfg.pe_clock_hz * 1e9,
    }
    t["total_ns"] = sum(t.values())
    return t


def ledger_csv_rows(ledger, cfg: DeviceConfig) -> list:
    """(category, bytes, ops, modeled_ns) rows for export."""
    t = modeled_time(ledger, cfg)
    get = ledger.get if isinstance(ledger, dict) else lambda k: getattr(ledger, k)
    flushes = 0
    pe_ops = get("pe_ops") if isinstance(ledger, dict) else ledger.pe_ops
    if pe_ops:
        flushes = sum(ops.get("flush", 0) for ops in pe_ops.values())
    return [
        ("device_internal_read", get("device_internal_bytes_read"), flushes, t["internal_read_ns"]),
        ("device_internal_write", get("device_internal_bytes_written"), 0, t["internal_write_ns"]),
        ("device_to_host", get("device_to_host_bytes"), 0, t["device_to_host_ns"]),
        ("host_to_device", get("host_to_device_bytes"), 0, t["host_to_device_ns"]),
        ("nvm_access", 0, get("nvm_reads") + get("nvm_writes"), t["nvm_ns"]),
        ("host_roundtrip", 0, get("host_roundtrips"), t["roundtrip_ns"]),
        ("pe_compute", 0, get("records_processed"), t["pe_compute_ns"]),
        ("total", 0, 0, t["total_ns"]),
    ]


class Device:
    """One emulated device instance; see module docstring."""

    def __init__(self, cfg: DeviceConfig = None):
        cfg = cfg or DeviceConfig()
        cfg.validate()
        self.cfg = cfg
        self.ledger = TransferLedger()
        self._regions = {REGION_DDR: bytearray(), REGION_NVM: bytearray()}
        self._capacity = {REGION_DDR: cfg.ddr_capacity_pages, REGION_NVM: cfg.nvm_capacity_pages}
        self._next_page = {REGION_DDR: 0, REGION_NVM: 0}
        self._free = {REGION_DDR: [], REGION_NVM: []}
        self._allocations: dict = {}          # owner -> set[(region, idx)]
        self._host_readable: set = set()      # (region, idx) exposed to the host
        self.vid_map: dict = {}               # device mirror: vid -> packed rid
        self.l2p: dict = {}                   # device mirror: page_lid -> (region, idx)
        self.delta_pages: list = []           # lids resident in the DDR delta mirror

    # -- page pool -----------------------------------------------------------

    def free_page_count(self, region: str) -> int:
        return len(self._free[region]) + self._capacity[region] - self._next_page[region]

    def allocate_pages(self, region: str, count: int, owner: str) -> list:
        """Take ``count`` pages from the region's pool for ``owner``."""
        if region not in self._regions:
            raise InvalidConfig(f"unknown region {region!r}")
        if count > self.free_page_count(region):
            raise OutOfSpace(
                f"{region}: requested {count} pages, {self.free_page_count(region)} available"
            )
        pages = []
        free = self._free[region]
        buf = self._regions[region]
        for _ in range(count):
            if free:
                idx = free.pop()
            else:
                idx = self._next_page[region]
                self._next_page[region] += 1
                buf.extend(b"\x00" * PAGE_SIZE)
            pages.append(idx)
        self._allocations.setdefault(owner, set()).update((region, i) for i in pages)
        return pages

    def free_pages(self, owner: str, pages=None):
        """Return an owner's pages (all, or a subset) to their pools."""
        held = self._allocations.get(owner)
        if not held:
            return
        victims = set(held) if pages is None else {p for p in pages if p in held}
        for region, idx in victims:
            self._free[region].append(idx)
            self._host_readable.discard((region, idx))
            held.discard((region, idx))
        for region in self._free:
            self._free[region].sort(reverse=True)   # reuse lowest index first
        if not held:
            self._allocations.pop(owner, None)

    def owner_pages(self, owner: str) -> set:
        return set(self._allocations.get(owner, ()))

    def adopt_pages(self, src_owner: str, dst_owner: str):
        """Transfer every page of one owner to another (result adoption)."""
        held = self._allocations.pop(src_owner, None)
        if held:
            self._allocations.setdefault(dst_owner, set()).update(held)

    def expose_to_host(self, pages):
        self._host_readable.update(pages)

    # -- raw byte movement ----------------------------------------------------

    def _check_range(self, region: str, offset: int, length: int):
        buf = self._regions.get(region)
        if buf is None:
            raise OutOfRange(f"unknown region {region!r}")
        if offset < 0 or length < 0 or offset + length > len(buf):
            raise OutOfRange(f"{region}[{offset}:{offset + length}] outside {len(buf)} bytes")
        return buf

    def _check_host_access(self, region: str, offset: int, length: int):
        first = offset // PAGE_SIZE
        last = (offset + length - 1) // PAGE_SIZE if length else first
        for idx in range(first, last + 1):
            if (region, idx) not in self._host_readable:
                raise AccessDenied(f"host access to {region} page {idx} not exposed")

    def read(self, region: str, offset: int, length: int, requester) -> bytes:
        """Read bytes; requester "HOST" moves them over the host link."""
        buf = self._check_range(region, offset, length)
        if requester == "HOST":
            self._check_host_access(region, offset, length)
            self.ledger.device_to_host_bytes += length
        else:
            self.ledger.device_internal_bytes_read += length
            self.ledger.pe_op(requester, "read")
        if region == REGION_NVM:
            self.ledger.nvm_reads += 1
        return bytes(buf[offset:offset + length])

    def write(self, region: str, offset: int, data, requester):
        buf = self._check_range(region, offset, len(data))
        if requester == "HOST":
            self.ledger.host_to_device_bytes += len(data)
        else:
            self.ledger.device_internal_bytes_written += len(data)
            self.ledger.pe_op(requester, "write")
        if region == REGION_NVM:
            self.ledger.nvm_writes += 1
        buf[offset:offset + len(data)] = data

    def peek(self, region: str, offset: int, length: int) -> memoryview:
        """Uncharged view for host-oracle and test inspection only."""
        buf = self._check_range(region, offset, length)
        return memoryview(buf)[offset:offset + length]

    def patch(self, region: str, offset: int, data):
        """Host-issued in-place maintenance write (chain pointer rollback)."""
        buf = self._check_range(region, offset, len(data))
        self.ledger.host_to_device_bytes += len(data)
        if region == REGION_NVM:
            self.ledger.nvm_writes += 1
        buf[offset:offset + len(data)] = data

    # -- in-situ navigation accessors (modeled transfer sizes) -----------------

    def pe_read_vid_entry(self, pe: int):
        self.ledger.device_internal_bytes_read += VID_ENTRY_BYTES
        self.ledger.pe_op(pe, "vid_entry")

    def pe_read_l2p(self, pe: int):
        self.ledger.device_internal_bytes_read += L2P_ENTRY_BYTES
        self.ledger.pe_op(pe, "l2p")

    def pe_read_slot(self, pe: int, region: str, page_base: int, slot: int):
        """4B slot-entry read; returns (record offset, record length)."""
        buf = self._check_range(region, page_base, PAGE_SIZE)
        self.ledger.device_internal_bytes_read += SLOT_READ_BYTES
        self.ledger.pe_op(pe, "slot")
        if region == REGION_NVM:
            self.ledger.nvm_reads += 1
        off, length = _SLOT.unpack_from(buf, page_base + PAGE_SIZE - SLOT_ENTRY_SIZE * (slot + 1))
        if off == 0 or off + length > PAGE_SIZE:
            raise CorruptRecord(f"slot {slot} of page at {page_base} is invalid")
        return off, length

    def pe_probe_header(self, pe: int, region: str, record_offset: int):
        """Modeled 4B header probe; yields (create_ts, packed pred, flags)."""
        buf = self._check_range(region, record_offset, 25)
        self.ledger.device_internal_bytes_read += HEADER_PROBE_BYTES
        self.ledger.pe_op(pe, "probe")
        if region == REGION_NVM:
            self.ledger.nvm_reads += 1
        return _PROBE.unpack_from(buf, record_offset + 8)

    def pe_read_record(self, pe: int, region: str, offset: int, length: int) -> bytes:
        data = self.read(region, offset, length, pe)
        self.ledger.records_processed += 1
        self.ledger.pe_op(pe, "record_load")
        return data

    # -- propagation & maintenance ---------------------------------------------

    def apply_propagation(self, snapshot) -> dict:
        """Ingest a shared-state snapshot; returns page placements as ack."""
        placements = {}
        for lid, image in snapshot.pages:
            [idx] = self.allocate_pages(REGION_DDR, 1, "shared-state")
            base = idx * PAGE_SIZE
            self._regions[REGION_DDR][base:base + PAGE_SIZE] = image
            self.ledger.host_to_device_bytes += PAGE_SIZE
            self.l2p[lid] = (REGION_DDR, idx)
            placements[lid] = (REGION_DDR, idx)
            self.delta_pages.append(lid)
        for vid, rid in snapshot.vid_map_delta:
            if rid is None:
                self.vid_map.pop(vid, None)
            else:
                self.vid_map[vid] = (rid.page_lid << 16) | rid.slot
            self.ledger.host_to_device_bytes += PROP_VID_ENTRY_BYTES
        self.ledger.host_to_device_bytes += PROP_L2P_ENTRY_BYTES * len(snapshot.l2p_delta)
        self.ledger.host_to_device_bytes += PROP_FIXED_BYTES
        if snapshot.in_flight is not None:
            self.ledger.host_to_device_bytes += PROP_TX_ENTRY_BYTES * (len(snapshot.in_flight) + 1)
        self.ledger.host_roundtrips += 1
        return placements

    def merge_delta_pages(self) -> dict:
        """Relocate all delta-mirror pages into cold NVM storage.

        Must not run while an invocation is in flight (callers serialize);
        logical page ids are stable, only physical placement changes.
        """
        relocations = {}
        ddr = self._regions[REGION_DDR]
        for lid in self.delta_pages:
            region, idx = self.l2p[lid]
            if region != REGION_DDR:
                continue
            [nidx] = self.allocate_pages(REGION_NVM, 1, "cold")
            base, nbase = idx * PAGE_SIZE, nidx * PAGE_SIZE
            self._regions[REGION_NVM][nbase:nbase + PAGE_SIZE] = ddr[base:base + PAGE_SIZE]
            self.ledger.device_internal_bytes_read += PAGE_SIZE
            self.ledger.device_internal_bytes_written += PAGE_SIZE
            self.ledger.nvm_writes += 1
            self.free_pages("shared-state", [(REGION_DDR, idx)])
            self.l2p[lid] = (REGION_NVM, nidx)
            relocations[lid] = (REGION_NVM, nidx)
        self.delta_pages.clear()
        return relocations

    def freeze_views(self):
        """Per-invocation immutable copies of the map mirrors."""
        return dict(self.vid_map), dict(self.l2p)

    def modeled_time(self, ledger=None) -> dict:
        return modeled_time(ledger if ledger is not None else self.ledger, self.cfg)


def configure(cfg: DeviceConfig) -> Device:
    """Initialize a device with an empty ledger and pools."""
    return Device(cfg)
