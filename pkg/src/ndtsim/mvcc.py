"""Host-side multi-version concurrency control.

Version records live as bytes in the shared-state delta buffer (and later
on the device); this module maintains the logical view of them: per-tuple
new-to-old chains, the map from tuple id to chain head, and the reference
visibility rule that everything device-side is tested against.

Chains are published as immutable cons-style nodes: installing a version
swaps one dict entry, so concurrent snapshot readers never observe a
half-updated chain.  A single logical writer is assumed for mutation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

from .errors import AlreadyFinished, StaleWrite, UnknownTx
from .layout import RecordHeader, RecordID, Schema, encode_record


class ChainNode(NamedTuple):
    """One version in a new-to-old chain; ``pred`` links toward older."""

    rid: RecordID
    create_ts: int
    tombstone: bool
    pred: Optional["ChainNode"]


@dataclass(frozen=True)
class SnapshotDescriptor:
    """Visibility context shipped with an invocation: caller id plus the
    transactions that were still in-flight when it was taken."""

    caller: int
    in_flight: frozenset


# Sentinel passed to install_version to create a delete marker.
TOMBSTONE = object()


def oracle_visible_version(chain: Optional[ChainNode], snap: SnapshotDescriptor) -> Optional[RecordID]:
    """Reference visibility rule: newest version committed before the caller.

    Walks the chain new-to-old and returns the first version whose creator
    both precedes the caller and is not in the in-flight set; None when no
    version qualifies or the qualifying version is a tombstone.
    """
    node = chain
    caller = snap.caller
    in_flight = snap.in_flight
    while node is not None:
        ts = node.create_ts
        if ts < caller and ts not in in_flight:
            return None if node.tombstone else node.rid
        node = node.pred
    return None


def visible_node(chain: Optional[ChainNode], snap: SnapshotDescriptor) -> Optional[ChainNode]:
    """Like oracle_visible_version but returns the node (tombstones included)."""
    node = chain
    while node is not None:
        ts = node.create_ts
        if ts < snap.caller and ts not in snap.in_flight:
            return node
        node = node.pred
    return None


class MvccStore:
    """Transaction lifecycle plus version-chain and map maintenance.

    ``shared`` is the host shared-state accumulator; every installed
    version is appended there and its map deltas staged for propagation.
    """

    def __init__(self, schema: Schema, shared):
        self.schema = schema
        self.shared = shared
        self._next_txid = 1
        self.in_flight: set = set()
        self._finished: dict = {}          # txid -> "committed" | "aborted"
        self.vid_map: dict = {}            # vid -> ChainNode (chain head)
        self._tx_writes: dict = {}         # txid -> [(vid, rid), ...]
        self.op_count = 0                  # host-work counter (OLTP operations)

    # -- transaction lifecycle -------------------------------------------

    def begin_tx(self) -> int:
        t = self._next_txid
        self._next_txid += 1
        self.in_flight.add(t)
        self._tx_writes[t] = []
        self.op_count += 1
        return t

    def _require_active(self, t: int):
        if t in self.in_flight:
            return
        if t in self._finished:
            raise AlreadyFinished(f"tx {t} already {self._finished[t]}")
        raise UnknownTx(f"tx {t} was never begun")

    def commit_tx(self, t: int):
        self._require_active(t)
        self.in_flight.discard(t)
        self._finished[t] = "committed"
        del self._tx_writes[t]
        self.op_count += 1

    def abort_tx(self, t: int):
        self._require_active(t)
        for vid, rid in reversed(self._tx_writes[t]):
            self._unlink(vid, rid)
        self.in_flight.discard(t)
        self._finished[t] = "aborted"
        del self._tx_writes[t]
        self.op_count += 1

    # -- version installation ---------------------------------------------

    def install_version(self, t: int, vid: int, values) -> RecordID:
        """Encode a new version for ``vid`` and link it as the chain head.

        The new version's predecessor is the current head; a re-update by
        the same transaction bypasses its own earlier version so creation
        timestamps stay strictly decreasing along the chain.
        """
        self._require_active(t)
        head = self.vid_map.get(vid)
        if head is not None:
            if head.create_ts == t:
                pred = head.pred           # same-tx re-update: bypass own version
            elif t < head.create_ts:
                raise StaleWrite(f"tx {t} behind chain head {head.create_ts} for vid {vid}")
            else:
                pred = head
        else:
            pred = None

        tombstone = values is TOMBSTONE
        header = RecordHeader(
            vid=vid,
            create_ts=t,
            pred=pred.rid if pred is not None else None,
            tombstone=tombstone,
        )
        record = encode_record(self.schema, header, None if tombstone else values)
        rid = self.shared.append_record(record)
        self.vid_map[vid] = ChainNode(rid, t, tombstone, pred)
        self._tx_writes[t].append((vid, rid))
        self.op_count += 1
        self.shared.record_change(rid, vid)
        return rid

    def delete_version(self, t: int, vid: int) -> RecordID:
        return self.install_version(t, vid, TOMBSTONE)

    def _unlink(self, vid: int, rid: RecordID):
        """Remove one aborted version from its chain.

        The version is either the chain head (map entry rolls back to its
        predecessor), an interior node (the successor's pred pointer is
        patched in the record bytes), or same-tx bypass garbage that was
        never reachable.
        """
        head = self.vid_map.get(vid)
        above = []
        node = head
        while node is not None and node.rid != rid:
            above.append(node)
            node = node.pred
        if node is None:
            return
        pred = node.pred
        if not above:
            if pred is None:
                del self.vid_map[vid]
                self.shared.stage_vid_delta(vid, None)
            else:
                self.vid_map[vid] = pred
                self.shared.stage_vid_delta(vid, pred.rid)
            return
        # Interior: rewrite the successor's pred pointer, then rebuild the
        # immutable nodes above it.
        successor = above[-1]
        self.shared.patch_pred(successor.rid, pred.rid if pred is not None else None)
        rebuilt = ChainNode(successor.rid, successor.create_ts, successor.tombstone, pred)
        for n in reversed(above[:-1]):
            rebuilt = ChainNode(n.rid, n.create_ts, n.tombstone, rebuilt)
        self.vid_map[vid] = rebuilt

    # -- snapshots ----------------------------------------------------------

    def snapshot_descriptor(self, caller: int) -> SnapshotDescriptor:
        return SnapshotDescriptor(caller, frozenset(self.in_flight))

    def visible_version(self, vid: int, snap: SnapshotDescriptor) -> Optional[RecordID]:
        return oracle_visible_version(self.vid_map.get(vid), snap)

    def chain_of(self, vid: int) -> Optional[ChainNode]:
        return self.vid_map.get(vid)

    def chain_rids(self, vid: int) -> list:
        out = []
        node = self.vid_map.get(vid)
        while node is not None:
            out.append(node.rid)
            node = node.pred
        return out

    def gc_old_versions(self):
        """Hook for asynchronous garbage collection of superseded versions.

        Space reclamation is scheduled out-of-band in the modeled system;
        nothing to do here.
        """
