import random
from decimal import Decimal as D

import pytest

from ndtsim.device import Device, DeviceConfig, REGION_DDR, REGION_NVM
from ndtsim.engine import MODE_MATERIALIZE, MODE_STREAM, NdtInvocation
from ndtsim.host import HostSystem, orderline_schema
from ndtsim.layout import PAGE_SIZE
from ndtsim.mvcc import MvccStore
from ndtsim.shared_state import HostSharedState


@pytest.fixture
def schema():
    return orderline_schema()


@pytest.fixture
def system():
    return HostSystem(DeviceConfig())


class Harness:
    """Minimal host wiring around an arbitrary schema, with explicit control
    over result-page allocation for engine-level tests."""

    def __init__(self, schema, cfg: DeviceConfig = None, capacity: int = 512 * 1024):
        self.device = Device(cfg or DeviceConfig())
        self.shared = HostSharedState(self.device, capacity_bytes=capacity)
        self.store = MvccStore(schema, self.shared)
        self.schema = schema
        self._seq = 0

    def install_rows(self, rows: dict):
        t = self.store.begin_tx()
        rids = {vid: self.store.install_version(t, vid, values)
                for vid, values in rows.items()}
        self.store.commit_tx(t)
        return rids

    def prepare(self, projection=None, mode=MODE_MATERIALIZE, pe_count=1,
                pages=64, caller=None):
        own_caller = caller is None
        if own_caller:
            caller = self.store.begin_tx()
        descriptor = self.store.snapshot_descriptor(caller)
        self.shared.propagate("invocation", caller=caller,
                              in_flight=descriptor.in_flight)
        vid_view, l2p_view = self.device.freeze_views()
        self._seq += 1
        owner = f"t-inv-{self._seq}"
        projection = tuple(projection or [a.name for a in self.schema.attributes])
        if mode == MODE_STREAM:
            cfg = self.device.cfg
            count = cfg.stream_buffer_count * (cfg.stream_buffer_bytes // PAGE_SIZE)
            stream_pages = self.device.allocate_pages(REGION_DDR, count, owner)
            result_pages = []
        else:
            stream_pages = []
            result_pages = self.device.allocate_pages(REGION_NVM, pages, owner)
        if own_caller:
            self.store.commit_tx(caller)
        return NdtInvocation(
            owner=owner, descriptor=descriptor, schema=self.schema,
            projection=projection, pe_count=pe_count, result_mode=mode,
            result_region=REGION_NVM, result_pages=result_pages,
            stream_pages=stream_pages, vid_view=vid_view, l2p_view=l2p_view,
        )

    def grantor(self, inv, count):
        return self.device.allocate_pages(inv.result_region, count, inv.owner)


def random_orderline(rng: random.Random, order_id: int = 1, line: int = 1,
                     delivered=None, null_delivery=False):
    """One valid orderline row tuple for tests."""
    delivery = None if null_delivery else (
        delivered if delivered is not None else rng.randrange(-10**14, 10**14))
    return (
        order_id,
        rng.randint(1, 10),
        rng.randint(1, 10),
        line,
        rng.randint(1, 100_000),
        delivery,
        rng.randint(1, 10),
        D(rng.randint(1, 999_999)).scaleb(-2),
        "".join(rng.choice("abcdefghij") for _ in range(rng.randint(0, 24))),
    )
