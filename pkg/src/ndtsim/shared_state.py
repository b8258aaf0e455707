"""Host shared-state: the delta buffer plus staged map changes.

New version records accumulate in host-resident pages together with the
VID-map and logical-to-physical map entries they imply.  The whole bundle
is propagated to the device either when it reaches its configured capacity
or alongside an invocation, where it is frozen together with the caller's
transaction id and the in-flight list.

Hand-off is two-phase: the device acknowledges a propagation by returning
the physical placements it assigned, and only then does the host clear its
buffer and repoint its logical-to-physical map, so no window exists in
which a record is reachable from neither side.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

from .errors import DanglingReference, DeviceUnavailable
from .layout import (
    PAGE_SIZE,
    NsmPage,
    RecordID,
    pack_rid,
    slot_entry_at,
    page_slot_count_at,
)

REGION_HOST = "HOST"
REGION_DDR = "DDR"
REGION_NVM = "NVM"

DEFAULT_CAPACITY_BYTES = 512 * 1024


@dataclass(frozen=True)
class SharedStateSnapshot:
    """Frozen propagation payload; immutable once constructed."""

    pages: tuple                 # ((page_lid, 8 KiB image bytes), ...)
    vid_map_delta: tuple         # ((vid, RecordID | None), ...)
    l2p_delta: tuple             # page_lids newly declared by the host
    caller: Optional[int]        # set for invocation-mode propagation
    in_flight: Optional[frozenset]
    size_bytes: int              # record bytes carried


class HostSharedState:
    """Accumulator for modifications not yet merged into device state."""

    def __init__(self, device=None, capacity_bytes: int = DEFAULT_CAPACITY_BYTES):
        self.device = device
        self.capacity_bytes = capacity_bytes
        self.host_pages: dict = {}        # page_lid -> NsmPage, still host-resident
        self.l2p: dict = {}               # page_lid -> (region, page_index); HOST index -1
        self._next_page_lid = 1
        self._open_page: Optional[NsmPage] = None
        self._pending_pages: list = []    # lids awaiting propagation, in creation order
        self._staged_vid: dict = {}       # vid -> RecordID | None
        self.size_bytes = 0
        self.propagation_count = 0

    # -- accumulation -------------------------------------------------------

    def _new_page(self) -> NsmPage:
        lid = self._next_page_lid
        self._next_page_lid += 1
        page = NsmPage(lid)
        self.host_pages[lid] = page
        self.l2p[lid] = (REGION_HOST, -1)
        self._pending_pages.append(lid)
        self._open_page = page
        return page

    def append_record(self, record_bytes: bytes) -> RecordID:
        """Place a version record in the delta buffer, assigning its RecordID."""
        page = self._open_page
        if page is None or not page.fits(len(record_bytes)):
            page = self._new_page()
        slot = page.insert(record_bytes)
        self.size_bytes += len(record_bytes)
        return RecordID(page.page_lid, slot)

    def record_change(self, rid: RecordID, vid: int):
        """Stage the map delta for a newly placed record; auto-propagates
        in regular mode once the configured capacity is reached."""
        self._staged_vid[vid] = rid
        if self.size_bytes >= self.capacity_bytes and self.device is not None:
            self.propagate("regular")

    def stage_vid_delta(self, vid: int, rid: Optional[RecordID]):
        """Stage a map correction (abort rollback); None removes the entry."""
        self._staged_vid[vid] = rid

    @property
    def has_pending(self) -> bool:
        return bool(self._pending_pages or self._staged_vid)

    # -- propagation ----------------------------------------------------------

    def propagate(self, mode: str = "regular", caller: Optional[int] = None,
                  in_flight=None) -> SharedStateSnapshot:
        """Freeze and ship the accumulated state to the device.

        "regular" carries only data; "invocation" additionally carries the
        caller id and in-flight list needed for in-situ snapshot creation.
        The host buffer is cleared only after the device acknowledges.
        """
        if self.device is None:
            raise DeviceUnavailable("no device attached to shared state")
        if mode == "invocation":
            if caller is None or in_flight is None:
                raise ValueError("invocation propagation needs caller and in_flight")
            in_flight = frozenset(in_flight)
        elif mode == "regular":
            caller = None
            in_flight = None
        else:
            raise ValueError(f"unknown propagation mode {mode!r}")

        snapshot = SharedStateSnapshot(
            pages=tuple((lid, self.host_pages[lid].to_bytes()) for lid in self._pending_pages),
            vid_map_delta=tuple(sorted(self._staged_vid.items())),
            l2p_delta=tuple(self._pending_pages),
            caller=caller,
            in_flight=in_flight,
            size_bytes=self.size_bytes,
        )
        placements = self.device.apply_propagation(snapshot)
        for lid, loc in placements.items():
            self.l2p[lid] = loc
            del self.host_pages[lid]
        self._pending_pages.clear()
        self._staged_vid.clear()
        self.size_bytes = 0
        self._open_page = None
        self.propagation_count += 1
        return snapshot

    def merge_delta_pages(self):
        """Maintenance: relocate device delta-mirror pages into cold storage.

        Exposed as an explicit operation so experiments stay deterministic.
        """
        if self.device is None:
            raise DeviceUnavailable("no device attached to shared state")
        relocations = self.device.merge_delta_pages()
        self.l2p.update(relocations)
        return relocations

    # -- host-side record access (oracle path, not performance-modeled) -------

    def _locate(self, rid: RecordID):
        loc = self.l2p.get(rid.page_lid)
        if loc is None:
            raise DanglingReference(f"page {rid.page_lid} not mapped")
        return loc

    def read_record(self, rid: RecordID) -> bytes:
        """Fetch raw record bytes wherever the page currently lives."""
        region, idx = self._locate(rid)
        if region == REGION_HOST:
            return self.host_pages[rid.page_lid].slot_bytes(rid.slot)
        base = idx * PAGE_SIZE
        view = self.device.peek(region, base, PAGE_SIZE)
        count = page_slot_count_at(view, 0)
        off, length = slot_entry_at(view, 0, rid.slot, count)
        return bytes(view[off:off + length])

    def patch_pred(self, rid: RecordID, new_pred: Optional[RecordID]):
        """Rewrite the 8-byte predecessor pointer of an existing record.

        Used by abort rollback when a successor referenced a now-removed
        version.  Safe for concurrent snapshots: any snapshot that could
        traverse the removed version has its creator in the in-flight list,
        and both the old and the patched pointer lead to the same next
        committed version.
        """
        packed = struct.pack("<Q", pack_rid(new_pred))
        region, idx = self._locate(rid)
        if region == REGION_HOST:
            page = self.host_pages[rid.page_lid]
            off, _length = page.slot_entry(rid.slot)
            page.buf[off + 16:off + 24] = packed
            return
        base = idx * PAGE_SIZE
        view = self.device.peek(region, base, PAGE_SIZE)
        count = page_slot_count_at(view, 0)
        off, _length = slot_entry_at(view, 0, rid.slot, count)
        self.device.patch(region, base + off + 16, packed)
