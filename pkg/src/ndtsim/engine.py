"""On-device transformation engine.

An invocation carries a frozen snapshot (map views plus visibility
descriptor), the table schema and projection, and its pre-allocated result
space.  Work is split round-robin over the processing elements; each PE
walks its share of tuple entries, performs the in-situ visibility check,
loads the visible record into its scratchpad and rearranges it into
per-attribute value/validity/offset partitions, flushing them to result
pages (materialization) or rotating stream buffers as they fill.

PE jobs run as generators driven round-robin at tuple granularity by a
deterministic coordinator; a job that runs out of result pages yields a
page request, which the coordinator turns into a host round-trip before
resuming it.  Output is therefore identical to any legal parallel
execution of the same jobs.

Every result carries an implicit leading identity column (``__vid``,
u64) so results can be compared canonically and materializations can be
refreshed incrementally.  The identity vector is staged in job state, not
in a scratchpad partition, and flushed once per PE at job end.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .columns import (
    KIND_OFFSETS,
    KIND_VALIDITY,
    KIND_VALUES,
    VID_COLUMN,
    assemble,
    result_specs,
    value_width,
)
from .device import Device, REGION_DDR, REGION_NVM
from .errors import (
    CorruptRecord,
    DanglingReference,
    HostDenied,
    MissingColumn,
    PoolExhausted,
    ScratchpadTooSmall,
    TooManyPEsRequested,
)
from .layout import (
    PAGE_SIZE,
    RID_NONE,
    Schema,
    TC_INT32,
    TC_TIMESTAMP,
    TC_VARCHAR,
    pg_timestamp_to_unix_epoch,
    record_field_slices,
)
from .mvcc import SnapshotDescriptor

RECORD_LOAD_BYTES = 8192      # scratchpad partition reserved for record loads

MODE_MATERIALIZE = "materialize"
MODE_STREAM = "stream"

_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")
_U64 = struct.Struct("<Q")


@dataclass(frozen=True)
class ScratchpadLayout:
    """Partitioning of one PE's scratchpad for a given projection."""

    record_load_bytes: int
    partitions: dict            # (attr name, kind) -> capacity in bytes

    @property
    def total_bytes(self) -> int:
        return self.record_load_bytes + sum(self.partitions.values())


def plan_scratchpad(schema: Schema, projection, scratchpad_bytes: int) -> ScratchpadLayout:
    """Split the scratchpad: fixed record-load window, then an equal share
    per partition (value per attribute, validity per nullable, offsets per
    varlen), each rounded down to a whole number of its element size."""
    if not projection:
        raise ValueError("projection must not be empty")
    parts = []
    for name in projection:
        if name not in schema.index_of:
            raise MissingColumn(f"{name!r} not in schema {schema.table_name!r}")
        attr = schema.attribute(name)
        elem = 1 if attr.ftype.is_varlen else attr.ftype.width
        parts.append(((name, KIND_VALUES), elem))
        if attr.nullable:
            parts.append(((name, KIND_VALIDITY), 1))
        if attr.ftype.is_varlen:
            parts.append(((name, KIND_OFFSETS), 4))
    avail = scratchpad_bytes - RECORD_LOAD_BYTES
    if avail <= 0:
        raise ScratchpadTooSmall(
            f"{scratchpad_bytes} bytes leave nothing after the {RECORD_LOAD_BYTES}B load window"
        )
    share = avail // len(parts)
    partitions = {}
    for key, elem in parts:
        cap = (share // elem) * elem
        if cap < elem:
            raise ScratchpadTooSmall(
                f"{scratchpad_bytes} bytes give partition {key} only {share} bytes"
            )
        partitions[key] = cap
    return ScratchpadLayout(RECORD_LOAD_BYTES, partitions)


@dataclass
class NdtInvocation:
    """Everything the device needs to run one transformation."""

    owner: str
    descriptor: SnapshotDescriptor
    schema: Schema
    projection: tuple
    pe_count: int
    result_mode: str
    result_region: str
    result_pages: list            # page indexes pre-allocated for results
    stream_pages: list            # ring-buffer pages (stream mode)
    vid_view: dict                # frozen vid -> packed rid
    l2p_view: dict                # frozen page_lid -> (region, index)
    initial_pages: int = 0
    prior_handle: object = None
    proj_plan: tuple = field(default=())

    def __post_init__(self):
        if not self.projection:
            raise ValueError("projection must not be empty")
        plan = []
        for name in self.projection:
            if name not in self.schema.index_of:
                raise MissingColumn(f"{name!r} not in schema {self.schema.table_name!r}")
            idx = self.schema.index_of[name]
            attr = self.schema.attributes[idx]
            plan.append((idx, name, attr.ftype, attr.ftype.code, attr.nullable))
        self.proj_plan = tuple(plan)
        self.initial_pages = self.initial_pages or len(self.result_pages)

    @property
    def specs(self):
        return result_specs(self.schema, self.projection)


class PeJob:
    """Mutable state of one PE's partitioned job."""

    __slots__ = ("pe", "vid_items", "caps", "parts", "bit_counts", "cum",
                 "offsets_started", "vid_out", "rid_out", "rows", "page_queue",
                 "flushes", "done")

    def __init__(self, pe: int, vid_items, layout: ScratchpadLayout):
        self.pe = pe
        self.vid_items = vid_items                  # [(vid, packed rid), ...]
        self.caps = layout.partitions
        self.parts = {key: bytearray() for key in layout.partitions}
        self.bit_counts = {}                        # attr -> bits appended
        self.cum = {}                               # attr -> cumulative payload bytes
        self.offsets_started = set()
        self.vid_out = []
        self.rid_out = []
        self.rows = 0
        self.page_queue = deque()
        self.flushes = 0
        self.done = False


def partition_round_robin(items, pe_count: int) -> list:
    """Entry i goes to PE i mod pe_count; returns one list per PE."""
    out = [[] for _ in range(pe_count)]
    for i, item in enumerate(items):
        out[i % pe_count].append(item)
    return out


def schedule(inv: NdtInvocation, device: Device) -> list:
    """Build PE jobs: map entries round-robin, result pages round-robin."""
    if inv.pe_count > device.cfg.pe_count:
        raise TooManyPEsRequested(f"{inv.pe_count} PEs requested, device has {device.cfg.pe_count}")
    if inv.pe_count < 1:
        raise TooManyPEsRequested("need at least one PE")
    layout = plan_scratchpad(inv.schema, inv.projection, device.cfg.scratchpad_bytes)
    partitions = partition_round_robin(list(inv.vid_view.items()), inv.pe_count)
    jobs = [PeJob(pe, items, layout) for pe, items in enumerate(partitions)]
    for j, idx in enumerate(inv.result_pages):
        jobs[j % inv.pe_count].page_queue.append(idx)
    return jobs


def pe_visibility_check(device: Device, pe: int, vid: int, packed_rid: int,
                        snap: SnapshotDescriptor, l2p_view: dict):
    """In-situ visibility: walk the chain new-to-old over raw page bytes.

    Charges the modeled transfers (8B map entry, then 4B address
    resolution + 4B slot + 4B header probe per visited version) and
    returns the visible version's location, or None when nothing is
    visible or the visible version is a delete marker.
    """
    device.pe_read_vid_entry(pe)
    caller = snap.caller
    in_flight = snap.in_flight
    packed = packed_rid
    visits = 0
    while packed != RID_NONE:
        visits += 1
        if visits > 1_000_000:
            raise CorruptRecord(f"version chain for vid {vid} does not terminate")
        page_lid = packed >> 16
        slot = packed & 0xFFFF
        device.pe_read_l2p(pe)
        loc = l2p_view.get(page_lid)
        if loc is None or loc[0] not in (REGION_DDR, REGION_NVM):
            raise DanglingReference(
                f"vid {vid}: page {page_lid} unresolvable on device (got {loc})"
            )
        region, idx = loc
        base = idx * PAGE_SIZE
        off, length = device.pe_read_slot(pe, region, base, slot)
        create_ts, pred_packed, flags = device.pe_probe_header(pe, region, base + off)
        if create_ts < caller and create_ts not in in_flight:
            if flags & 1:
                return None
            return packed, region, base + off, length
        packed = pred_packed
    return None


# -- partition fills and flushes -----------------------------------------------


def flush_partition(job: PeJob, device: Device, sink, key):
    """Spill one scratchpad partition to its destination; no-op when empty."""
    buf = job.parts[key]
    if not buf:
        return
    data = bytes(buf)
    del buf[:]
    job.flushes += 1
    device.ledger.pe_op(job.pe, "flush")
    yield from sink.emit(job, key, data)


def _emit(job: PeJob, device: Device, sink, key, data):
    buf = job.parts[key]
    cap = job.caps[key]
    if len(buf) + len(data) > cap:
        yield from flush_partition(job, device, sink, key)
    if len(data) > cap:
        # element larger than the partition: spill it directly
        job.flushes += 1
        device.ledger.pe_op(job.pe, "flush")
        yield from sink.emit(job, key, bytes(data))
    else:
        buf.extend(data)


def _emit_bit(job: PeJob, device: Device, sink, name: str, valid: bool):
    key = (name, KIND_VALIDITY)
    buf = job.parts[key]
    count = job.bit_counts.get(name, 0)
    if count % 8 == 0:
        if len(buf) + 1 > job.caps[key]:
            yield from flush_partition(job, device, sink, key)
        buf = job.parts[key]
        buf.append(0)
    if valid:
        buf[-1] |= 1 << (count & 7)
    job.bit_counts[name] = count + 1


def transform_record(job: PeJob, inv: NdtInvocation, device: Device, sink,
                     vid: int, packed_rid: int, record_bytes):
    """Rearrange one loaded record into the per-attribute partitions.

    Fixed-width attributes are copied byte-for-byte from their aligned
    positions (timestamps converted to epoch seconds on the way); varchar
    payloads are parsed out and their cumulative offsets appended; the
    record header's null bitmap drives validity bits and zeroed value
    slots for NULLs.
    """
    slices, _header = record_field_slices(inv.schema, record_bytes)
    for attr_idx, name, ftype, code, nullable in inv.proj_plan:
        slc = slices[attr_idx]
        if code == TC_VARCHAR:
            if name not in job.offsets_started:
                job.offsets_started.add(name)
                job.cum[name] = 0
                yield from _emit(job, device, sink, (name, KIND_OFFSETS), _U32.pack(0))
            if slc is not None:
                start, length = slc
                if length:
                    yield from _emit(job, device, sink, (name, KIND_VALUES),
                                     record_bytes[start:start + length])
                job.cum[name] += length
            yield from _emit(job, device, sink, (name, KIND_OFFSETS), _U32.pack(job.cum[name]))
        else:
            width = ftype.width
            if slc is None:
                data = b"\x00" * width
            elif code == TC_TIMESTAMP:
                micros = _I64.unpack_from(record_bytes, slc[0])[0]
                data = _I64.pack(pg_timestamp_to_unix_epoch(micros))
            else:
                start = slc[0]
                data = bytes(record_bytes[start:start + width])
            yield from _emit(job, device, sink, (name, KIND_VALUES), data)
        if nullable:
            yield from _emit_bit(job, device, sink, name, slc is not None)
    job.vid_out.append(vid)
    job.rid_out.append(packed_rid)
    job.rows += 1


def _final_flush(job: PeJob, inv: NdtInvocation, device: Device, sink):
    for _idx, name, ftype, code, nullable in inv.proj_plan:
        yield from flush_partition(job, device, sink, (name, KIND_VALUES))
        if nullable:
            yield from flush_partition(job, device, sink, (name, KIND_VALIDITY))
        if code == TC_VARCHAR:
            yield from flush_partition(job, device, sink, (name, KIND_OFFSETS))
    if job.vid_out:
        data = struct.pack(f"<{len(job.vid_out)}Q", *job.vid_out)
        job.flushes += 1
        device.ledger.pe_op(job.pe, "flush")
        yield from sink.emit(job, (VID_COLUMN, KIND_VALUES), data)


_TICK = object()


@dataclass(frozen=True)
class PageRequest:
    pe: int
    count: int


def _job_gen(job: PeJob, inv: NdtInvocation, device: Device, sink):
    snap = inv.descriptor
    l2p = inv.l2p_view
    for vid, packed in job.vid_items:
        hit = pe_visibility_check(device, job.pe, vid, packed, snap, l2p)
        if hit is not None:
            packed_rid, region, rec_off, rec_len = hit
            record = device.pe_read_record(job.pe, region, rec_off, rec_len)
            yield from transform_record(job, inv, device, sink, vid, packed_rid, record)
        yield _TICK
    yield from _final_flush(job, inv, device, sink)
    job.done = True


def suspend_for_space(job: PeJob, inv: NdtInvocation, device: Device, grantor,
                      count: int):
    """Host round-trip for more result pages; the job resumes afterwards."""
    device.ledger.host_roundtrips += 1
    device.ledger.pe_op(job.pe, "space_request")
    if grantor is None:
        raise HostDenied(f"no space grantor for invocation {inv.owner}")
    try:
        pages = grantor(inv, count)
    except PoolExhausted as exc:
        raise HostDenied(str(exc)) from exc
    job.page_queue.extend(pages)


def run_jobs(jobs, inv: NdtInvocation, device: Device, sink, grantor=None,
             gen_factory=None):
    """Drive PE jobs round-robin at tuple granularity, deterministically.

    On a page request the requesting job is suspended, the grant obtained,
    and the job resumed before the rotation continues; denial fails the
    invocation cleanly with its pages returned to the pool.
    """
    factory = gen_factory or _job_gen
    gens = {job.pe: factory(job, inv, device, sink) for job in jobs}
    active = deque(jobs)
    try:
        while active:
            job = active.popleft()
            gen = gens[job.pe]
            while True:
                try:
                    signal = next(gen)
                except StopIteration:
                    break
                if signal is _TICK:
                    active.append(job)
                    break
                suspend_for_space(job, inv, device, grantor, signal.count)
    except BaseException:
        device.free_pages(inv.owner)
        raise


# -- result sinks ---------------------------------------------------------------


class FragmentWriter:
    """Append-only byte run across result pages; pages fill completely."""

    __slots__ = ("region", "pages", "room", "total")

    def __init__(self, region: str):
        self.region = region
        self.pages = []
        self.room = 0
        self.total = 0

    def pages_needed(self, nbytes: int) -> int:
        if nbytes <= self.room:
            return 0
        return -(-(nbytes - self.room) // PAGE_SIZE)

    def append(self, device: Device, pe: int, data, page_queue):
        mv = memoryview(data)
        pos = 0
        while pos < len(data):
            if self.room == 0:
                self.pages.append(page_queue.popleft())
                self.room = PAGE_SIZE
            take = min(self.room, len(data) - pos)
            offset = self.pages[-1] * PAGE_SIZE + (PAGE_SIZE - self.room)
            device.write(self.region, offset, mv[pos:pos + take], pe)
            pos += take
            self.room -= take
            self.total += take

    def fragment(self) -> "Fragment":
        return Fragment(self.region, tuple(self.pages), self.total)


@dataclass(frozen=True)
class Fragment:
    region: str
    pages: tuple
    nbytes: int


@dataclass
class Segment:
    """One PE's contribution within one transformation run."""

    run: int
    pe: int
    rows: int
    frags: dict                   # (name, kind) -> Fragment


class MaterializeSink:
    """Routes flushed partitions into per-(PE, column, kind) page chains."""

    def __init__(self, device: Device, region: str):
        self.device = device
        self.region = region
        self.writers = {}

    def emit(self, job: PeJob, key, data):
        writer = self.writers.get((job.pe, key))
        if writer is None:
            writer = FragmentWriter(self.region)
            self.writers[(job.pe, key)] = writer
        while writer.pages_needed(len(data)) > len(job.page_queue):
            yield PageRequest(job.pe, writer.pages_needed(len(data)) - len(job.page_queue))
        writer.append(self.device, job.pe, data, job.page_queue)

    def segments(self, jobs, run: int) -> list:
        out = []
        for job in jobs:
            if job.rows == 0:
                continue
            frags = {}
            for (pe, key), writer in self.writers.items():
                if pe == job.pe:
                    frags[key] = writer.fragment()
            out.append(Segment(run, job.pe, job.rows, frags))
        return out


@dataclass
class Batch:
    """One pulled stream buffer: framed column chunks plus payload size."""

    index: int
    chunks: list                  # [(pe, name, kind, bytes), ...]
    payload_bytes: int


class StreamSink:
    """Rotating on-device buffers pulled by the host as they fill.

    Chunk framing (pe, column, kind, length) travels as uncharged
    completion descriptors; the pulled payload bytes are charged as
    device-to-host movement, so the ledger's device_to_host counter equals
    the logical result size exactly.
    """

    def __init__(self, device: Device, inv: NdtInvocation, consumer=None):
        cfg = device.cfg
        per_buffer = cfg.stream_buffer_bytes // PAGE_SIZE
        self.device = device
        self.consumer = consumer
        self.buffer_bytes = per_buffer * PAGE_SIZE
        self.buffers = [
            inv.stream_pages[i * per_buffer:(i + 1) * per_buffer]
            for i in range(cfg.stream_buffer_count)
        ]
        device.expose_to_host((REGION_DDR, idx) for idx in inv.stream_pages)
        self.current = 0
        self.fill = 0
        self.pending = []             # (pe, key, length) in write order
        self.batches = []

    def emit(self, job: PeJob, key, data):
        mv = memoryview(data)
        pos = 0
        while pos < len(data):
            room = self.buffer_bytes - self.fill
            if room == 0:
                self._deliver()
                room = self.buffer_bytes
            take = min(room, len(data) - pos)
            self._write(job.pe, mv[pos:pos + take])
            self.pending.append((job.pe, key, take))
            pos += take
        return
        yield  # pragma: no cover - generator protocol parity with MaterializeSink

    def _write(self, pe: int, piece):
        pages = self.buffers[self.current]
        pos = 0
        while pos < len(piece):
            page_i, in_page = divmod(self.fill, PAGE_SIZE)
            take = min(PAGE_SIZE - in_page, len(piece) - pos)
            self.device.write(REGION_DDR, pages[page_i] * PAGE_SIZE + in_page,
                              piece[pos:pos + take], pe)
            self.fill += take
            pos += take

    def _deliver(self):
        if self.fill == 0:
            return
        pages = self.buffers[self.current]
        raw = bytearray()
        remaining = self.fill
        for idx in pages:
            if remaining <= 0:
                break
            take = min(PAGE_SIZE, remaining)
            raw += self.device.read(REGION_DDR, idx * PAGE_SIZE, take, "HOST")
            remaining -= take
        chunks = []
        pos = 0
        for pe, key, length in self.pending:
            chunks.append((pe, key[0], key[1], bytes(raw[pos:pos + length])))
            pos += length
        batch = Batch(len(self.batches), chunks, self.fill)
        self.batches.append(batch)
        if self.consumer is not None:
            self.consumer(batch)
        self.pending = []
        self.fill = 0
        self.current = (self.current + 1) % len(self.buffers)

    def finish(self):
        self._deliver()


def stream_segments(batches, pe_count: int) -> list:
    """Reassemble per-PE segment buffers from pulled batches."""
    bufs = [dict() for _ in range(pe_count)]
    for batch in batches:
        for pe, name, kind, payload in batch.chunks:
            bufs[pe].setdefault((name, kind), bytearray()).extend(payload)
    segments = []
    for pe in range(pe_count):
        vid_buf = bufs[pe].get((VID_COLUMN, KIND_VALUES))
        if not vid_buf:
            continue
        rows = len(vid_buf) // 8
        segments.append((rows, {k: bytes(v) for k, v in bufs[pe].items()}))
    return segments


def columns_from_batches(schema: Schema, projection, batches, pe_count: int):
    return assemble(result_specs(schema, projection),
                    stream_segments(batches, pe_count))


# -- materialization handles ------------------------------------------------------


@dataclass
class MaterializationHandle:
    """Descriptor of an on-device materialized result.

    Fragment addresses/sizes and the row counts are what the host pulls;
    the identity index and visibility bitmap live beside the fragments on
    the device and are only ever shipped if a consumer reads them.
    """

    owner: str
    device: Device
    schema: Schema
    projection: tuple
    specs: tuple
    snapshot: SnapshotDescriptor
    segments: list
    vid_index: dict               # vid -> global row position
    vid_rids: dict                # vid -> packed rid the current row came from
    visibility: bytearray         # little-endian u64 words, 1 = row current
    total_positions: int
    bitmap_pages: list
    column_bytes: int
    run_count: int = 1
    freed: bool = False

    @property
    def snapshot_ts(self) -> int:
        return self.snapshot.caller

    @property
    def row_count(self) -> int:
        return self.total_positions

    @property
    def visible_rows(self) -> int:
        return sum(int(w).bit_count() for w in _iter_words(self.visibility))

    def fragment_sizes(self) -> dict:
        sizes: dict = {}
        for seg in self.segments:
            for key, frag in seg.frags.items():
                sizes[key] = sizes.get(key, 0) + frag.nbytes
        return sizes


def _iter_words(bitmap: bytearray):
    for i in range(0, len(bitmap), 8):
        yield int.from_bytes(bitmap[i:i + 8], "little")


def bitmap_set(bitmap: bytearray, pos: int, value: bool):
    word, bit = divmod(pos, 64)
    byte = word * 8 + bit // 8
    if value:
        bitmap[byte] |= 1 << (bit & 7)
    else:
        bitmap[byte] &= ~(1 << (bit & 7))


def bitmap_get(bitmap: bytearray, pos: int) -> bool:
    word, bit = divmod(pos, 64)
    return bool(bitmap[word * 8 + bit // 8] >> (bit & 7) & 1)


def bitmap_words(rows: int) -> int:
    return -(-rows // 64)


def write_bitmap_pages(handle: MaterializationHandle):
    """Persist the visibility bitmap beside the fragments (charged writes)."""
    device = handle.device
    data = bytes(handle.visibility)
    need = -(-len(data) // PAGE_SIZE) if data else 0
    while len(handle.bitmap_pages) < need:
        [idx] = device.allocate_pages(REGION_NVM, 1, handle.owner)
        handle.bitmap_pages.append(idx)
        device.expose_to_host([(REGION_NVM, idx)])
    for i in range(need):
        piece = data[i * PAGE_SIZE:(i + 1) * PAGE_SIZE]
        device.write(REGION_NVM, handle.bitmap_pages[i] * PAGE_SIZE, piece, "COORD")


HANDLE_META_FRAGMENT_BYTES = 16     # address + size per fragment
HANDLE_META_FIXED_BYTES = 32


def _charge_handle_meta(device: Device, segments):
    n_frags = sum(len(seg.frags) for seg in segments)
    device.ledger.device_to_host_bytes += (
        HANDLE_META_FIXED_BYTES + HANDLE_META_FRAGMENT_BYTES * n_frags
    )


def _expose_segments(device: Device, segments):
    pages = []
    for seg in segments:
        for frag in seg.frags.values():
            pages.extend((frag.region, idx) for idx in frag.pages)
    device.expose_to_host(pages)


def materialize_results(inv: NdtInvocation, device: Device, grantor=None) -> MaterializationHandle:
    """Run a materializing invocation to completion and build its handle."""
    jobs = schedule(inv, device)
    sink = MaterializeSink(device, inv.result_region)
    run_jobs(jobs, inv, device, sink, grantor)
    segments = sink.segments(jobs, run=0)

    # Unused pre-allocated space is marked free.
    leftovers = []
    for job in jobs:
        leftovers.extend((inv.result_region, idx) for idx in job.page_queue)
        job.page_queue.clear()
    if leftovers:
        device.free_pages(inv.owner, leftovers)

    vid_index: dict = {}
    vid_rids: dict = {}
    position = 0
    for job in jobs:
        for vid, rid in zip(job.vid_out, job.rid_out):
            vid_index[vid] = position
            vid_rids[vid] = rid
            position += 1
    total = position
    visibility = bytearray(b"\xff" * (bitmap_words(total) * 8))
    # mask tail bits beyond the last row
    for pos in range(total, bitmap_words(total) * 64):
        bitmap_set(visibility, pos, False)

    handle = MaterializationHandle(
        owner=inv.owner,
        device=device,
        schema=inv.schema,
        projection=inv.projection,
        specs=inv.specs,
        snapshot=inv.descriptor,
        segments=segments,
        vid_index=vid_index,
        vid_rids=vid_rids,
        visibility=visibility,
        total_positions=total,
        bitmap_pages=[],
        column_bytes=sum(f.nbytes for s in segments for f in s.frags.values()),
    )
    write_bitmap_pages(handle)
    _expose_segments(device, segments)
    _charge_handle_meta(device, segments)
    return handle


def stream_results(inv: NdtInvocation, device: Device, consumer=None, grantor=None) -> list:
    """Run a streaming invocation; returns the pulled batches in order."""
    jobs = schedule(inv, device)
    sink = StreamSink(device, inv, consumer)
    run_jobs(jobs, inv, device, sink, grantor)
    sink.finish()
    device.free_pages(inv.owner)
    return sink.batches


def run_invocation(inv: NdtInvocation, device: Device, grantor=None, consumer=None):
    if inv.result_mode == MODE_STREAM:
        return stream_results(inv, device, consumer=consumer, grantor=grantor)
    return materialize_results(inv, device, grantor=grantor)
