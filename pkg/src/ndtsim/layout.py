"""Row-store (NSM) binary layout: field types, record codec, slotted pages.

Everything the device has to parse in-situ is defined here, byte for byte,
so host and device sides share one source of truth.

Record wire format (little-endian throughout):

    header:
        0   vid        u64
        8   create_ts  u64
        16  pred       u64   packed RecordID of the predecessor, NONE if absent
        24  flags      u8    bit 0 = tombstone
        25  null bitmap       ceil(n_attrs/8) bytes, LSB-first, 1 = NULL
    fixed-width fields, schema order, NULL fields omitted,
        each aligned (relative to record start) to its natural alignment
    variable-length fields, schema order, NULL fields omitted,
        each a u16 byte length followed by the raw payload

Tombstone records are header-only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from decimal import Decimal as PyDecimal
from typing import NamedTuple, Optional, Sequence, Union

from .errors import (
    ArityMismatch,
    CorruptRecord,
    NullNotAllowed,
    PageFull,
    RecordTooLarge,
    SlotOutOfRange,
    TypeMismatch,
    VarCharTooLong,
)

PAGE_SIZE = 8192
PAGE_HEADER_SIZE = 12          # page_lid u64, slot_count u16, free_offset u16
SLOT_ENTRY_SIZE = 4            # offset u16, length u16
RECORD_HEADER_FIXED = 25       # vid + create_ts + pred + flags
MAX_RECORD_SIZE = PAGE_SIZE - PAGE_HEADER_SIZE - SLOT_ENTRY_SIZE

# Seconds from 1970-01-01T00:00:00Z to 2000-01-01T00:00:00Z.
POSTGRES_EPOCH_OFFSET_SECONDS = 946_684_800

MICROS_PER_SECOND = 1_000_000

# Type codes; also used as on-disk type tags by the columnar file format.
TC_INT32 = 0
TC_INT64 = 1
TC_DECIMAL = 2
TC_TIMESTAMP = 3
TC_VARCHAR = 4


class FieldType:
    """Base for declared attribute types."""

    code: int
    width: Optional[int]       # fixed byte width, None for varlen
    alignment: int

    @property
    def is_varlen(self) -> bool:
        return self.width is None


@dataclass(frozen=True)
class Int32(FieldType):
    code: int = field(default=TC_INT32, init=False)
    width: int = field(default=4, init=False)
    alignment: int = field(default=4, init=False)


@dataclass(frozen=True)
class Int64(FieldType):
    code: int = field(default=TC_INT64, init=False)
    width: int = field(default=8, init=False)
    alignment: int = field(default=8, init=False)


@dataclass(frozen=True)
class Decimal(FieldType):
    """Exact decimal stored as a 64-bit integer scaled by 10**scale."""

    precision: int
    scale: int
    code: int = field(default=TC_DECIMAL, init=False)
    width: int = field(default=8, init=False)
    alignment: int = field(default=8, init=False)

    def __post_init__(self):
        if not (1 <= self.precision <= 18):
            raise ValueError(f"decimal precision must be in [1,18], got {self.precision}")
        if not (0 <= self.scale <= self.precision):
            raise ValueError(f"decimal scale must be in [0,precision], got {self.scale}")


@dataclass(frozen=True)
class TimestampPg(FieldType):
    """Microseconds since 2000-01-01T00:00:00Z, signed."""

    code: int = field(default=TC_TIMESTAMP, init=False)
    width: int = field(default=8, init=False)
    alignment: int = field(default=8, init=False)


@dataclass(frozen=True)
class VarChar(FieldType):
    max_len: int
    code: int = field(default=TC_VARCHAR, init=False)
    width: Optional[int] = field(default=None, init=False)
    alignment: int = field(default=1, init=False)

    def __post_init__(self):
        if self.max_len < 1:
            raise ValueError(f"varchar max_len must be >= 1, got {self.max_len}")


class Attribute(NamedTuple):
    name: str
    ftype: FieldType
    nullable: bool


class Schema:
    """Ordered attribute list plus the precomputed record layout plan."""

    def __init__(self, table_name: str, attributes: Sequence[tuple]):
        if not attributes:
            raise ValueError("schema needs at least one attribute")
        attrs = tuple(Attribute(*a) for a in attributes)
        names = [a.name for a in attrs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate attribute names in schema {table_name!r}")
        self.table_name = table_name
        self.attributes = attrs
        self.n_attrs = len(attrs)
        self.null_bitmap_bytes = (self.n_attrs + 7) // 8
        self.header_size = RECORD_HEADER_FIXED + self.null_bitmap_bytes
        self.index_of = {a.name: i for i, a in enumerate(attrs)}
        # (attr_index, width, alignment, type_code) for fixed-width attrs
        self.fixed_plan = tuple(
            (i, a.ftype.width, a.ftype.alignment, a.ftype.code)
            for i, a in enumerate(attrs)
            if not a.ftype.is_varlen
        )
        self.varlen_plan = tuple(i for i, a in enumerate(attrs) if a.ftype.is_varlen)

    def attribute(self, name: str) -> Attribute:
        return self.attributes[self.index_of[name]]

    def __repr__(self):
        return f"Schema({self.table_name!r}, {self.n_attrs} attrs)"


class RecordID(NamedTuple):
    page_lid: int
    slot: int


RID_NONE = 0xFFFF_FFFF_FFFF_FFFF


def pack_rid(rid: Optional[RecordID]) -> int:
    if rid is None:
        return RID_NONE
    return (rid.page_lid << 16) | rid.slot


def unpack_rid(packed: int) -> Optional[RecordID]:
    if packed == RID_NONE:
        return None
    return RecordID(packed >> 16, packed & 0xFFFF)


@dataclass
class RecordHeader:
    vid: int
    create_ts: int
    pred: Optional[RecordID] = None
    tombstone: bool = False
    null_mask: int = 0         # derived from values at encode time

    @property
    def flags(self) -> int:
        return 1 if self.tombstone else 0


Value = Union[int, str, PyDecimal, None]

_HDR = struct.Struct("<QQQB")
_U16 = struct.Struct("<H")
_I32 = struct.Struct("<i")
_I64 = struct.Struct("<q")
_SLOT = struct.Struct("<HH")


def _align_up(off: int, alignment: int) -> int:
    return (off + alignment - 1) & ~(alignment - 1)


def decimal_to_scaled(value, ftype: Decimal) -> int:
    """Convert a decimal value to its scaled-integer representation, exactly."""
    if isinstance(value, int) and not isinstance(value, bool):
        dec = PyDecimal(value)
    elif isinstance(value, PyDecimal):
        dec = value
    else:
        raise TypeMismatch(f"expected Decimal or int, got {type(value).__name__}")
    scaled = dec.scaleb(ftype.scale)
    if scaled != scaled.to_integral_value():
        raise TypeMismatch(f"{value} has more than {ftype.scale} fraction digits")
    n = int(scaled)
    if abs(n) >= 10 ** ftype.precision:
        raise TypeMismatch(f"{value} exceeds precision {ftype.precision}")
    return n


def scaled_to_decimal(scaled: int, ftype: Decimal) -> PyDecimal:
    return PyDecimal(scaled).scaleb(-ftype.scale)


def _check_int_range(value, bits: int) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise TypeMismatch(f"expected int, got {type(value).__name__}")
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    if not (lo <= value <= hi):
        raise TypeMismatch(f"{value} out of {bits}-bit range")
    return value


def encode_record(schema: Schema, header: RecordHeader, values: Optional[Sequence[Value]]) -> bytes:
    """Serialize one version record. Returns immutable bytes."""
    if header.tombstone:
        if values:
            raise TypeMismatch("tombstone records carry no field payload")
        buf = bytearray(schema.header_size)
        _HDR.pack_into(buf, 0, header.vid, header.create_ts, pack_rid(header.pred), header.flags)
        header.null_mask = 0
        return bytes(buf)

    if values is None or len(values) != schema.n_attrs:
        got = 0 if values is None else len(values)
        raise ArityMismatch(f"schema has {schema.n_attrs} attributes, got {got} values")

    null_mask = 0
    for i, (attr, v) in enumerate(zip(schema.attributes, values)):
        if v is None:
            if not attr.nullable:
                raise NullNotAllowed(f"attribute {attr.name!r} is not nullable")
            null_mask |= 1 << i

    buf = bytearray(schema.header_size)
    _HDR.pack_into(buf, 0, header.vid, header.create_ts, pack_rid(header.pred), header.flags)
    buf[RECORD_HEADER_FIXED:schema.header_size] = null_mask.to_bytes(schema.null_bitmap_bytes, "little")
    header.null_mask = null_mask

    pos = schema.header_size
    for i, width, alignment, code in schema.fixed_plan:
        if null_mask >> i & 1:
            continue
        v = values[i]
        aligned = _align_up(pos, alignment)
        if aligned != pos:
            buf.extend(b"\x00" * (aligned - pos))
            pos = aligned
        if code == TC_INT32:
            buf.extend(_I32.pack(_check_int_range(v, 32)))
        elif code == TC_DECIMAL:
            buf.extend(_I64.pack(decimal_to_scaled(v, schema.attributes[i].ftype)))
        else:  # TC_INT64 or TC_TIMESTAMP
            buf.extend(_I64.pack(_check_int_range(v, 64)))
        pos += width

    for i in schema.varlen_plan:
        if null_mask >> i & 1:
            continue
        v = values[i]
        if not isinstance(v, str):
            raise TypeMismatch(f"attribute {schema.attributes[i].name!r} expects str")
        payload = v.encode("utf-8")
        ftype = schema.attributes[i].ftype
        if len(payload) > ftype.max_len:
            raise VarCharTooLong(
                f"{schema.attributes[i].name!r}: {len(payload)} bytes > max_len {ftype.max_len}"
            )
        buf.extend(_U16.pack(len(payload)))
        buf.extend(payload)

    if len(buf) > MAX_RECORD_SIZE:
        raise RecordTooLarge(f"record of {len(buf)} bytes exceeds {MAX_RECORD_SIZE}")
    return bytes(buf)


def decode_header(buf, offset: int = 0) -> RecordHeader:
    """Parse the fixed header prefix at ``offset`` (no bitmap length check)."""
    vid, create_ts, pred, flags = _HDR.unpack_from(buf, offset)
    return RecordHeader(vid, create_ts, unpack_rid(pred), bool(flags & 1))


def _null_mask_at(schema: Schema, buf, offset: int) -> int:
    end = offset + schema.header_size
    if end > len(buf):
        raise CorruptRecord("record shorter than its header")
    return int.from_bytes(buf[offset + RECORD_HEADER_FIXED:end], "little")


def record_field_slices(schema: Schema, buf, offset: int = 0):
    """One-pass field locator: per attribute, (start, length) into ``buf``, or None.

    This is the format-parser walk the device performs: NULL fields are
    omitted from the payload, so locating attribute k requires skipping
    every present field before it.  Varlen entries point past the length
    prefix, at the payload itself.
    """
    header = decode_header(buf, offset)
    if header.tombstone:
        return [None] * schema.n_attrs, header
    null_mask = _null_mask_at(schema, buf, offset)
    header.null_mask = null_mask
    slices = [None] * schema.n_attrs
    pos = offset + schema.header_size
    limit = len(buf)
    for i, width, alignment, _code in schema.fixed_plan:
        if null_mask >> i & 1:
            continue
        pos = offset + _align_up(pos - offset, alignment)
        if pos + width > limit:
            raise CorruptRecord(f"fixed field {i} runs past record end")
        slices[i] = (pos, width)
        pos += width
    for i in schema.varlen_plan:
        if null_mask >> i & 1:
            continue
        if pos + 2 > limit:
            raise CorruptRecord(f"varlen field {i} length prefix past record end")
        (length,) = _U16.unpack_from(buf, pos)
        pos += 2
        if pos + length > limit:
            raise CorruptRecord(f"varlen field {i} payload past record end")
        slices[i] = (pos, length)
        pos += length
    return slices, header


def _decode_at(schema: Schema, buf, attr_index: int, slc) -> Value:
    if slc is None:
        return None
    start, length = slc
    ftype = schema.attributes[attr_index].ftype
    code = ftype.code
    if code == TC_INT32:
        return _I32.unpack_from(buf, start)[0]
    if code == TC_DECIMAL:
        return scaled_to_decimal(_I64.unpack_from(buf, start)[0], ftype)
    if code == TC_VARCHAR:
        return bytes(buf[start:start + length]).decode("utf-8")
    return _I64.unpack_from(buf, start)[0]


def decode_field(schema: Schema, record_bytes, attr_index: int) -> Value:
    """Extract one attribute; None when the null bitmap marks it NULL."""
    slices, _ = record_field_slices(schema, record_bytes)
    return _decode_at(schema, record_bytes, attr_index, slices[attr_index])


def decode_values(schema: Schema, record_bytes) -> list:
    """Decode every attribute of a record in one walk."""
    slices, _ = record_field_slices(schema, record_bytes)
    return [_decode_at(schema, record_bytes, i, s) for i, s in enumerate(slices)]


def pg_timestamp_to_unix_epoch(ts: int) -> int:
    """Microseconds-since-2000 to whole seconds-since-1970 (floor)."""
    return ts // MICROS_PER_SECOND + POSTGRES_EPOCH_OFFSET_SECONDS


class NsmPage:
    """Slotted page: records grow from the front, slot entries from the back."""

    def __init__(self, page_lid: int):
        self.page_lid = page_lid
        self.buf = bytearray(PAGE_SIZE)
        struct.pack_into("<Q", self.buf, 0, page_lid)
        self.slot_count = 0
        self.free_offset = PAGE_HEADER_SIZE
        self._sync_header()

    def _sync_header(self):
        struct.pack_into("<HH", self.buf, 8, self.slot_count, self.free_offset)

    @property
    def free_space(self) -> int:
        return PAGE_SIZE - self.free_offset - SLOT_ENTRY_SIZE * self.slot_count

    def fits(self, nbytes: int) -> bool:
        return nbytes + SLOT_ENTRY_SIZE <= self.free_space

    def insert(self, record_bytes: bytes) -> int:
        """Append a record, returning its slot index."""
        n = len(record_bytes)
        if n > MAX_RECORD_SIZE:
            raise RecordTooLarge(f"record of {n} bytes exceeds {MAX_RECORD_SIZE}")
        if not self.fits(n):
            raise PageFull(
                f"page {self.page_lid}: {n} bytes do not fit in {self.free_space - SLOT_ENTRY_SIZE}"
            )
        off = self.free_offset
        self.buf[off:off + n] = record_bytes
        slot = self.slot_count
        _SLOT.pack_into(self.buf, PAGE_SIZE - SLOT_ENTRY_SIZE * (slot + 1), off, n)
        self.slot_count += 1
        self.free_offset = off + n
        self._sync_header()
        return slot

    def slot_entry(self, slot: int):
        if not (0 <= slot < self.slot_count):
            raise SlotOutOfRange(f"slot {slot} not in [0,{self.slot_count})")
        return _SLOT.unpack_from(self.buf, PAGE_SIZE - SLOT_ENTRY_SIZE * (slot + 1))

    def slot_bytes(self, slot: int) -> bytes:
        off, length = self.slot_entry(slot)
        return bytes(self.buf[off:off + length])

    def to_bytes(self) -> bytes:
        return bytes(self.buf)


def slot_entry_at(buf, page_base: int, slot: int, slot_count: int):
    """Parse slot ``slot`` of the page image starting at ``page_base``."""
    if not (0 <= slot < slot_count):
        raise SlotOutOfRange(f"slot {slot} not in [0,{slot_count})")
    return _SLOT.unpack_from(buf, page_base + PAGE_SIZE - SLOT_ENTRY_SIZE * (slot + 1))


def page_slot_count_at(buf, page_base: int) -> int:
    return _U16.unpack_from(buf, page_base + 8)[0]
