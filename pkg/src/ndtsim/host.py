"""Host-side system: OLTP driver, invocation preparation, query evaluators.

Wires the transaction store, shared state, and device together and drives
the order-line workload against them.  Also provides both sides of the
query equivalence check: a columnar evaluator over transformation output
and a row-store evaluator that scans version chains directly.
"""

from __future__ import annotations

import random
import string
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import Decimal as PyDecimal

import numpy as np

from .columns import ColumnSet, result_specs
from .device import Device, DeviceConfig, REGION_DDR, REGION_NVM
from .engine import (
    MODE_MATERIALIZE,
    MODE_STREAM,
    NdtInvocation,
    run_invocation,
)
from .delta import delta_transform
from .errors import MissingColumn, PoolExhausted, UnknownTx
from .layout import (
    PAGE_SIZE,
    Decimal,
    Int32,
    Schema,
    TimestampPg,
    VarChar,
    decimal_to_scaled,
    pg_timestamp_to_unix_epoch,
    record_field_slices,
    POSTGRES_EPOCH_OFFSET_SECONDS,
    MICROS_PER_SECOND,
)
from .mvcc import MvccStore, SnapshotDescriptor, TOMBSTONE, oracle_visible_version
from .shared_state import HostSharedState


def orderline_schema() -> Schema:
    return Schema("orderline", [
        ("ol_o_id", Int32(), False),
        ("ol_d_id", Int32(), False),
        ("ol_w_id", Int32(), False),
        ("ol_number", Int32(), False),
        ("ol_i_id", Int32(), False),
        ("ol_delivery_d", TimestampPg(), True),
        ("ol_quantity", Int32(), False),
        ("ol_amount", Decimal(12, 2), False),
        ("ol_dist_info", VarChar(24), False),
    ])


def unix_seconds(year: int, month: int = 1, day: int = 1) -> int:
    return int(datetime(year, month, day, tzinfo=timezone.utc).timestamp())


def pg_micros(year: int, month: int = 1, day: int = 1) -> int:
    """Timestamp value (microseconds since 2000-01-01) for a calendar date."""
    return (unix_seconds(year, month, day) - POSTGRES_EPOCH_OFFSET_SECONDS) * MICROS_PER_SECOND


@dataclass(frozen=True)
class Q6Params:
    """Sum-of-amounts predicate: delivery date in [lo, hi), quantity in [qlo, qhi]."""

    date_lo_unix: int
    date_hi_unix: int
    qty_lo: int = 1
    qty_hi: int = 100_000


def q6_default_params() -> Q6Params:
    return Q6Params(unix_seconds(1999), unix_seconds(2020))


def q6_columnar(view: ColumnSet, params: Q6Params) -> PyDecimal:
    """Evaluate the predicate over a logical column set, exactly."""
    for needed in ("ol_delivery_d", "ol_quantity", "ol_amount"):
        if needed not in view.data:
            raise MissingColumn(f"view lacks {needed!r}")
    delivery = view.data["ol_delivery_d"]
    quantity = view.data["ol_quantity"]
    amount = view.data["ol_amount"]
    valid = view.validity.get("ol_delivery_d")
    keep = np.ones(view.n_rows, dtype=bool) if valid is None else valid.copy()
    if view.n_rows:
        keep &= (delivery >= params.date_lo_unix) & (delivery < params.date_hi_unix)
        keep &= (quantity >= params.qty_lo) & (quantity <= params.qty_hi)
        total = int(np.sum(amount[keep], dtype=np.int64))
    else:
        total = 0
    scale = orderline_schema().attribute("ol_amount").ftype.scale
    return PyDecimal(total).scaleb(-scale)


def estimated_row_bytes(schema: Schema, projection) -> int:
    """Upper-bound columnar footprint of one row, identity column included."""
    total = 8
    for name in projection:
        attr = schema.attribute(name)
        if attr.ftype.is_varlen:
            total += attr.ftype.max_len + 4
        else:
            total += attr.ftype.width
        if attr.nullable:
            total += 1
    return total


def default_estimator(schema, projection, row_count, prior_handle=None) -> int:
    """Expected result bytes: row count times projected width, with headroom."""
    scale = 0.25 if prior_handle is not None else 1.0
    return int(row_count * estimated_row_bytes(schema, projection) * 1.25 * scale)


@dataclass
class WorkloadConfig:
    """Deterministic order-line transaction mix."""

    seed: int = 7
    tx_count: int = 1000
    new_order_weight: float = 0.50
    delivery_weight: float = 0.40
    delete_weight: float = 0.02
    amount_update_weight: float = 0.08
    min_lines: int = 5
    max_lines: int = 15
    abort_fraction: float = 0.02
    warehouses: int = 10


@dataclass
class OltpReport:
    tx_committed: int = 0
    tx_aborted: int = 0
    versions_created: int = 0
    new_vids: int = 0
    oltp_ops: int = 0           # host-work counter delta for the run


class HostSystem:
    """One host DBMS instance attached to one emulated device."""

    def __init__(self, device_cfg: DeviceConfig = None, shared_capacity: int = 512 * 1024,
                 estimator=None):
        self.device = Device(device_cfg or DeviceConfig())
        self.shared = HostSharedState(self.device, capacity_bytes=shared_capacity)
        self.schema = orderline_schema()
        self.store = MvccStore(self.schema, self.shared)
        self.estimator = estimator or default_estimator
        self.admin_ops = 0            # invocation preparation + space grants
        self._inv_seq = 0
        self._next_vid = 1
        self._next_order = 1

    # -- data loading and OLTP --------------------------------------------------

    def new_vid(self) -> int:
        vid = self._next_vid
        self._next_vid += 1
        return vid

    def _random_row(self, rng: random.Random, order_id: int, line: int,
                    warehouses: int, delivered_micros):
        amount_cents = rng.randint(1, 999_999)
        dist_len = rng.randint(8, 24)
        return (
            order_id,
            rng.randint(1, 10),
            rng.randint(1, warehouses),
            line,
            rng.randint(1, 100_000),
            delivered_micros,
            rng.randint(1, 10),
            PyDecimal(amount_cents).scaleb(-2),
            "".join(rng.choices(string.ascii_lowercase, k=dist_len)),
        )

    _DELIVERY_RANGE = None

    def _random_delivery(self, rng: random.Random) -> int:
        # spread across 1995..2014 so both pre- and post-2000 encodings occur
        if HostSystem._DELIVERY_RANGE is None:
            HostSystem._DELIVERY_RANGE = (pg_micros(1995), pg_micros(2015))
        return rng.randrange(*HostSystem._DELIVERY_RANGE)

    def load_orderlines(self, n_rows: int, seed: int = 1, null_delivery_rate: float = 0.08,
                        batch: int = 1000) -> dict:
        """Bulk-load committed rows; returns the shadow {vid: values}."""
        rng = random.Random(seed)
        shadow = {}
        store = self.store
        remaining = n_rows
        while remaining > 0:
            t = store.begin_tx()
            for _ in range(min(batch, remaining)):
                order = self._next_order
                self._next_order += 1
                delivered = None if rng.random() < null_delivery_rate \
                    else self._random_delivery(rng)
                row = self._random_row(rng, order, 1, 10, delivered)
                vid = self.new_vid()
                store.install_version(t, vid, row)
                shadow[vid] = row
            store.commit_tx(t)
            remaining -= batch
        return shadow

    def run_oltp(self, cfg: WorkloadConfig, shadow: dict = None) -> OltpReport:
        driver = WorkloadDriver(self, cfg, shadow if shadow is not None else {})
        return driver.run(cfg.tx_count)

    # -- invocation lifecycle ------------------------------------------------------

    def prepare_invocation(self, caller: int, projection=None, mode: str = MODE_MATERIALIZE,
                           pe_count: int = None, estimate_scale: float = 1.0,
                           prior_handle=None) -> NdtInvocation:
        """Snapshot shared state with the call, size and reserve result space,
        and assemble the device invocation."""
        if caller not in self.store.in_flight:
            raise UnknownTx(f"caller {caller} is not in-flight")
        store = self.store
        projection = tuple(projection) if projection else tuple(
            a.name for a in self.schema.attributes)
        for name in projection:
            if name not in self.schema.index_of:
                raise MissingColumn(f"{name!r} not in table schema")
        cfg = self.device.cfg
        pe_count = pe_count or cfg.pe_count
        self.admin_ops += 1

        descriptor = store.snapshot_descriptor(caller)
        self.shared.propagate("invocation", caller=caller, in_flight=descriptor.in_flight)
        vid_view, l2p_view = self.device.freeze_views()

        self._inv_seq += 1
        owner = f"inv-{self._inv_seq}"
        # invocation command: context + schema/projection descriptor
        self.device.ledger.host_to_device_bytes += 64 + sum(len(n) for n in projection)
        self.device.ledger.host_roundtrips += 1

        if mode == MODE_STREAM:
            count = cfg.stream_buffer_count * (cfg.stream_buffer_bytes // PAGE_SIZE)
            stream_pages = self.device.allocate_pages(REGION_DDR, count, owner)
            result_pages = []
            region = REGION_DDR
        else:
            try:
                est_bytes = self.estimator(self.schema, projection, len(vid_view), prior_handle)
            except Exception:
                est_bytes = len(vid_view) * estimated_row_bytes(self.schema, projection)
            pages = max(pe_count, -(-int(est_bytes * estimate_scale) // PAGE_SIZE))
            region = REGION_NVM
            result_pages = self.device.allocate_pages(region, pages, owner)
            stream_pages = []

        return NdtInvocation(
            owner=owner,
            descriptor=descriptor,
            schema=self.schema,
            projection=projection,
            pe_count=pe_count,
            result_mode=mode,
            result_region=region,
            result_pages=result_pages,
            stream_pages=stream_pages,
            vid_view=vid_view,
            l2p_view=l2p_view,
            prior_handle=prior_handle,
        )

    def grant_space(self, inv: NdtInvocation, count: int) -> list:
        """Serve a device space request; grants a policy-sized chunk."""
        self.admin_ops += 1
        available = self.device.free_page_count(inv.result_region)
        if available < count:
            raise PoolExhausted(
                f"{inv.result_region} pool has {available} pages, {count} needed"
            )
        chunk = max(count, inv.initial_pages // (2 * inv.pe_count), 4)
        return self.device.allocate_pages(inv.result_region, min(chunk, available), inv.owner)

    def transform_snapshot(self, projection=None, mode: str = MODE_MATERIALIZE,
                           pe_count: int = None, estimate_scale: float = 1.0,
                           consumer=None):
        """Begin a reader transaction, run one transformation, commit."""
        caller = self.store.begin_tx()
        inv = self.prepare_invocation(caller, projection, mode, pe_count,
                                      estimate_scale=estimate_scale)
        result = run_invocation(inv, self.device, grantor=self.grant_space,
                                consumer=consumer)
        self.store.commit_tx(caller)
        return inv, result

    def delta_refresh(self, handle, pe_count: int = None, estimate_scale: float = 1.0):
        """Refresh a materialization to the current committed state."""
        caller = self.store.begin_tx()
        inv = self.prepare_invocation(caller, handle.projection, MODE_MATERIALIZE,
                                      pe_count or handle.device.cfg.pe_count,
                                      estimate_scale=estimate_scale, prior_handle=handle)
        updated = delta_transform(handle, inv, grantor=self.grant_space)
        self.store.commit_tx(caller)
        return inv, updated

    def merge_to_cold(self):
        """Propagate anything pending, then relocate delta pages to cold NVM."""
        if self.shared.has_pending:
            self.shared.propagate("regular")
        return self.shared.merge_delta_pages()

    # -- oracle side ---------------------------------------------------------------

    def oracle_rows(self, snap: SnapshotDescriptor, projection=None):
        """Visible rows per the host chain walk, decoded from record bytes."""
        projection = tuple(projection) if projection else tuple(
            a.name for a in self.schema.attributes)
        indexes = [self.schema.index_of[n] for n in projection]
        rows = []
        for vid, head in self.store.vid_map.items():
            rid = oracle_visible_version(head, snap)
            if rid is None:
                continue
            record = self.shared.read_record(rid)
            slices, _ = record_field_slices(self.schema, record)
            rows.append((vid, record, slices, indexes))
        return rows

    def oracle_column_set(self, snap: SnapshotDescriptor, projection=None) -> ColumnSet:
        """Expected transformation output, built without touching the device path."""
        projection = tuple(projection) if projection else tuple(
            a.name for a in self.schema.attributes)
        specs = result_specs(self.schema, projection)
        vids, columns, validity = [], {}, {}
        for spec in specs[1:]:
            columns[spec.name] = []
            validity[spec.name] = [] if spec.nullable else None
        for vid, record, slices, _ in self.oracle_rows(snap, projection):
            vids.append(vid)
            for spec in specs[1:]:
                idx = self.schema.index_of[spec.name]
                slc = slices[idx]
                ftype = spec.ftype
                if ftype.is_varlen:
                    value = "" if slc is None else bytes(record[slc[0]:slc[0] + slc[1]]).decode()
                    columns[spec.name].append(value)
                elif slc is None:
                    columns[spec.name].append(0)
                else:
                    raw = int.from_bytes(record[slc[0]:slc[0] + ftype.width], "little", signed=True)
                    if isinstance(ftype, TimestampPg):
                        raw = pg_timestamp_to_unix_epoch(raw)
                    columns[spec.name].append(raw)
                if spec.nullable:
                    validity[spec.name].append(slc is not None)
        data = {}
        vdata = {}
        for spec in specs[1:]:
            col = columns[spec.name]
            if spec.ftype.is_varlen:
                data[spec.name] = col
            else:
                width = 4 if isinstance(spec.ftype, Int32) else 8
                data[spec.name] = np.array(col, dtype=f"<i{width}")
            v = validity[spec.name]
            vdata[spec.name] = np.array(v, dtype=bool) if v is not None else None
        return ColumnSet(specs, np.array(vids, dtype="<u8"), data, vdata, len(vids))

    def q6_rowstore(self, snap: SnapshotDescriptor, params: Q6Params) -> PyDecimal:
        """Row-engine baseline: evaluate the predicate by MVCC chain scan."""
        schema = self.schema
        i_delivery = schema.index_of["ol_delivery_d"]
        i_quantity = schema.index_of["ol_quantity"]
        i_amount = schema.index_of["ol_amount"]
        total = 0
        for vid, head in self.store.vid_map.items():
            rid = oracle_visible_version(head, snap)
            if rid is None:
                continue
            record = self.shared.read_record(rid)
            slices, _ = record_field_slices(schema, record)
            slc = slices[i_delivery]
            if slc is None:
                continue
            micros = int.from_bytes(record[slc[0]:slc[0] + 8], "little", signed=True)
            seconds = pg_timestamp_to_unix_epoch(micros)
            if not (params.date_lo_unix <= seconds < params.date_hi_unix):
                continue
            qs = slices[i_quantity]
            quantity = int.from_bytes(record[qs[0]:qs[0] + 4], "little", signed=True)
            if not (params.qty_lo <= quantity <= params.qty_hi):
                continue
            ams = slices[i_amount]
            total += int.from_bytes(record[ams[0]:ams[0] + 8], "little", signed=True)
        scale = schema.attribute("ol_amount").ftype.scale
        return PyDecimal(total).scaleb(-scale)


class _IndexedSet:
    """Set with O(1) uniform random pick (list plus position map)."""

    def __init__(self, items=()):
        self.items = list(items)
        self.pos = {v: i for i, v in enumerate(self.items)}

    def add(self, v):
        if v not in self.pos:
            self.pos[v] = len(self.items)
            self.items.append(v)

    def discard(self, v):
        i = self.pos.pop(v, None)
        if i is None:
            return
        last = self.items.pop()
        if last != v:
            self.items[i] = last
            self.pos[last] = i

    def pick(self, rng: random.Random):
        if not self.items:
            return None
        return self.items[rng.randrange(len(self.items))]

    def __len__(self):
        return len(self.items)


class WorkloadDriver:
    """Resumable deterministic transaction stream against one system."""

    def __init__(self, system: HostSystem, cfg: WorkloadConfig, shadow: dict = None):
        self.system = system
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)
        self.shadow = shadow if shadow is not None else {}
        self.live = _IndexedSet(self.shadow)
        self.undelivered = _IndexedSet(
            vid for vid, row in self.shadow.items() if row[5] is None)
        self.report = OltpReport()

    def step(self):
        """Run one transaction; commits or aborts before returning."""
        cfg, rng, store = self.cfg, self.rng, self.system.store
        weights = (cfg.new_order_weight, cfg.delivery_weight,
                   cfg.delete_weight, cfg.amount_update_weight)
        pick = rng.random() * sum(weights)
        t = store.begin_tx()
        writes = []
        if pick < weights[0] or not self.shadow:
            order = self.system._next_order
            self.system._next_order += 1
            lines = rng.randint(cfg.min_lines, cfg.max_lines)
            for line in range(1, lines + 1):
                vid = self.system.new_vid()
                row = self.system._random_row(rng, order, line, cfg.warehouses, None)
                store.install_version(t, vid, row)
                writes.append((vid, row, False))
        elif pick < weights[0] + weights[1]:
            vid = self.undelivered.pick(rng)
            if vid is not None:
                old = self.shadow[vid]
                row = old[:5] + (self.system._random_delivery(rng),) + old[6:]
                store.install_version(t, vid, row)
                writes.append((vid, row, False))
        elif pick < weights[0] + weights[1] + weights[2]:
            vid = self.live.pick(rng)
            if vid is not None:
                store.delete_version(t, vid)
                writes.append((vid, None, True))
        else:
            vid = self.live.pick(rng)
            if vid is not None:
                old = self.shadow[vid]
                amount = PyDecimal(rng.randint(1, 999_999)).scaleb(-2)
                row = old[:7] + (amount,) + old[8:]
                store.install_version(t, vid, row)
                writes.append((vid, row, False))

        if writes and rng.random() < cfg.abort_fraction:
            store.abort_tx(t)
            self.report.tx_aborted += 1
            return
        store.commit_tx(t)
        self.report.tx_committed += 1
        for vid, row, deleted in writes:
            self.report.versions_created += 1
            if deleted:
                self.shadow.pop(vid, None)
                self.live.discard(vid)
                self.undelivered.discard(vid)
                continue
            if vid not in self.shadow:
                self.report.new_vids += 1
                self.live.add(vid)
                if row[5] is None:
                    self.undelivered.add(vid)
            elif self.shadow[vid][5] is None and row[5] is not None:
                self.undelivered.discard(vid)
            self.shadow[vid] = row

    def run(self, n_tx: int) -> OltpReport:
        ops_before = self.system.store.op_count
        for _ in range(n_tx):
            self.step()
        self.report.oltp_ops = self.system.store.op_count - ops_before
        return self.report
