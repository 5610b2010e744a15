"""Tree mechanics shared by the data ORAM and metadata ORAM levels.

``TreeLevel`` owns one complete binary tree of Z-slot buckets in an NVM
region plus its volatile stash and (optionally) a pending-remap table. It
implements path loading with stale-copy filtering and eviction planning.

Eviction planning uses three priority classes:

* blocks absorbed from the loaded path (collaterals) must always re-place,
  otherwise a block whose persisted position-map entry still names this
  path could be stranded in the volatile stash with no durable copy;
* backup blocks (the access's fresh backup plus any re-absorbed live
  backups) must always place, padding into slots the live plan left empty
  so both plain and persistent runs place the same live blocks;
* the access target and older stash blocks place best-effort - each of
  them is covered by a pending remap plus a committed backup, so leaving
  them in the stash is crash-safe.

Placement is latest-fit (deepest legal bucket first); legal buckets for a
block are the common prefix of its path and the eviction path, so a set of
mandatory blocks that fit the path at load time always re-fits.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable, Iterable

from .blocks import Block, KIND_BACKUP, KIND_DUMMY, KIND_REAL, decode_block, encode_block, make_dummy
from .cipher import ToyCipher
from .errors import (
    ConsistencyError,
    ProtocolError,
    StashOverflowError,
    TempPosMapOverflowError,
)
from .nvm import NvmImage


@dataclass(frozen=True)
class TreeGeometry:
    levels: int  # height L; depths run 0 (root) .. L (leaf)
    z: int

    @property
    def node_count(self) -> int:
        return 2 ** (self.levels + 1) - 1

    @property
    def leaf_base(self) -> int:
        return 2 ** self.levels - 1

    @property
    def n_leaves(self) -> int:
        return 2 ** self.levels

    @property
    def path_slots(self) -> int:
        return self.z * (self.levels + 1)


@lru_cache(maxsize=65536)
def path_nodes(label: int, levels: int) -> tuple[int, ...]:
    """Heap indices of the buckets on the path to ``label``, leaf to root."""
    if not 0 <= label < 2 ** levels:
        raise ValueError(f"label {label} out of range for height {levels}")
    node = (2 ** levels - 1) + label
    out = [node]
    while node:
        node = (node - 1) // 2
        out.append(node)
    return tuple(out)


def common_depth(label_a: int, label_b: int, levels: int) -> int:
    """Deepest depth shared by the paths to two leaves (root = depth 0)."""
    diff = label_a ^ label_b
    return levels if diff == 0 else levels - diff.bit_length()


class Counter:
    """Shared monotone counter (write sequence numbers, IV nonces)."""

    __slots__ = ("value",)

    def __init__(self, start: int = 0):
        self.value = start

    def next(self) -> int:
        self.value += 1
        return self.value


class Stash:
    """Blocks in flight, keyed by (addr, is_backup); insertion-ordered."""

    __slots__ = ("_entries",)

    def __init__(self):
        self._entries: dict[tuple[int, bool], Block] = {}

    def live(self, addr: int) -> Block | None:
        return self._entries.get((addr, False))

    def put_live(self, blk: Block) -> None:
        self._entries[(blk.addr, False)] = blk

    def put_backup(self, blk: Block) -> None:
        key = (blk.addr, True)
        cur = self._entries.get(key)
        if cur is None or blk.seq > cur.seq:
            self._entries[key] = blk

    def get(self, key: tuple[int, bool]) -> Block | None:
        return self._entries.get(key)

    def pop(self, key: tuple[int, bool]) -> Block:
        return self._entries.pop(key)

    def total(self) -> int:
        return len(self._entries)

    def live_count(self) -> int:
        return sum(1 for (_, backup) in self._entries if not backup)

    def live_items(self) -> list[tuple[tuple[int, bool], Block]]:
        return [(k, b) for k, b in self._entries.items() if not k[1]]

    def items(self):
        return self._entries.items()

    def clone(self) -> "Stash":
        copy = Stash()
        copy._entries = {k: replace(b) for k, b in self._entries.items()}
        return copy


@dataclass
class LoadResult:
    target: Block | None
    collaterals: list[Block]        # live blocks absorbed from the path this load
    retained_backups: list[Block]   # tree backups whose live block is still pending
    blocks_read: int


@dataclass
class PlanResult:
    slots: list[Block | None]             # index = depth * z + j, depth 0 = root
    placements: dict[tuple[int, bool], int]
    displacements: int
    reordered: bool


class TreeLevel:
    """One Path ORAM tree plus its volatile controller-side state."""

    def __init__(
        self,
        name: str,
        region: str,
        geom: TreeGeometry,
        nvm: NvmImage,
        cipher: ToyCipher,
        block_size: int,
        stash_capacity: int,
        seq: Counter,
        iv: Counter,
        persisted_label: Callable[[int], int],
        pending_capacity: int | None = None,
    ):
        self.name = name
        self.region = region
        self.geom = geom
        self.nvm = nvm
        self.cipher = cipher
        self.block_size = block_size
        self.stash = Stash()
        self.stash_capacity = stash_capacity
        self.seq = seq
        self.iv = iv
        self.persisted_label = persisted_label
        # pending is the not-yet-persisted remap overlay; None means remaps
        # are applied to the persisted view immediately (plain semantics).
        self.pending: dict[int, int] | None = {} if pending_capacity else None
        self.pending_capacity = pending_capacity or 0
        self.plan_displacements = 0
        self.plan_reorders = 0
        self.stash_high_water = 0

    # -- label views -------------------------------------------------------

    def current_label(self, addr: int) -> int:
        if self.pending is not None:
            hit = self.pending.get(addr)
            if hit is not None:
                return hit
        return self.persisted_label(addr)

    def note_pending(self, addr: int, label: int) -> None:
        if self.pending is None:
            raise ProtocolError(f"{self.name}: no pending table in this mode")
        self.pending[addr] = label
        if len(self.pending) > self.pending_capacity:
            raise TempPosMapOverflowError(
                f"{self.name}: pending remaps exceed capacity {self.pending_capacity}"
            )

    # -- initialization ----------------------------------------------------

    def fill_initial(self, entries: Iterable[tuple[int, int, bytes]]) -> None:
        """Eagerly place (addr, label, payload) blocks and write every bucket."""
        geom = self.geom
        buckets: dict[int, list[Block]] = {}
        for addr, label, payload in entries:
            placed = False
            for node in path_nodes(label, geom.levels):  # leaf to root
                bucket = buckets.setdefault(node, [])
                if len(bucket) < geom.z:
                    bucket.append(
                        Block(addr=addr, label=label, seq=self.seq.next(),
                              kind=KIND_REAL, payload=payload)
                    )
                    placed = True
                    break
            if not placed:
                raise ProtocolError(
                    f"{self.name}: initial placement overflow on label {label}"
                )
        dummy = make_dummy(self.block_size)
        for node in range(geom.node_count):
            bucket = buckets.get(node, [])
            for j in range(geom.z):
                blk = bucket[j] if j < len(bucket) else dummy
                data = encode_block(blk, self.cipher, self.iv.next(), self.iv.next())
                self.nvm.write_block(self.region, node * geom.z + j, data,
                                     round_tag="init")

    # -- path load ---------------------------------------------------------

    def load_path(
        self,
        label: int,
        target_addr: int | None = None,
        target_label: int | None = None,
        point_cb: Callable[[int], None] | None = None,
    ) -> LoadResult:
        """Read all blocks on a path, filter stale copies, absorb the rest.

        ``target_label`` is the pre-remap label of the in-flight target (the
        label being loaded); its copies are matched against that label, not
        against the already-updated overlay.
        """
        geom = self.geom
        want_label = label if target_label is None else target_label
        best_target: Block | None = None
        best_live: dict[int, Block] = {}
        best_retained: dict[int, Block] = {}
        k = 0
        for node in path_nodes(label, geom.levels):  # absorb leaf-first
            base = node * geom.z
            for j in range(geom.z):
                if point_cb is not None:
                    point_cb(k)
                blk = decode_block(self.nvm.read_block(self.region, base + j), self.cipher)
                k += 1
                if blk.kind == KIND_DUMMY or blk.addr is None:
                    continue
                if target_addr is not None and blk.addr == target_addr:
                    if blk.label != want_label:
                        continue  # stale copy of the target from an older epoch
                    if best_target is None or blk.seq > best_target.seq:
                        best_target = blk
                    continue
                if blk.kind == KIND_BACKUP:
                    if self.stash.live(blk.addr) is not None:
                        if self.pending is not None and blk.addr in self.pending:
                            cur = best_retained.get(blk.addr)
                            if cur is None or blk.seq > cur.seq:
                                best_retained[blk.addr] = blk
                        continue
                    if self.persisted_label(blk.addr) == blk.label:
                        # No live copy anywhere: this backup is authoritative.
                        cur = best_live.get(blk.addr)
                        if cur is None or blk.seq > cur.seq:
                            best_live[blk.addr] = blk
                    continue
                if self.stash.live(blk.addr) is not None:
                    continue
                if self.persisted_label(blk.addr) != blk.label:
                    continue
                cur = best_live.get(blk.addr)
                if cur is None or blk.seq > cur.seq:
                    best_live[blk.addr] = blk

        if target_addr is not None and best_target is None:
            raise ConsistencyError(
                f"{self.name}: block {target_addr} not found on path {label}"
            )

        collaterals = []
        for blk in best_live.values():
            blk.kind = KIND_REAL
            self.stash.put_live(blk)
            collaterals.append(blk)
        retained = []
        for blk in best_retained.values():
            self.stash.put_backup(blk)
            retained.append(blk)
        if best_target is not None:
            best_target.kind = KIND_REAL
            self.stash.put_live(best_target)

        self.stash_high_water = max(self.stash_high_water, self.stash.live_count())
        if self.stash.total() > self.stash_capacity:
            raise StashOverflowError(
                f"{self.name}: stash holds {self.stash.total()} blocks, "
                f"capacity {self.stash_capacity}"
            )
        return LoadResult(best_target, collaterals, retained, k)

    # -- eviction planning ---------------------------------------------------

    def build_plan(
        self,
        evict_label: int,
        collaterals: list[Block],
        retained_backups: list[Block],
        new_backup: Block | None,
        target_addr: int | None,
    ) -> PlanResult:
        geom = self.geom
        z, levels = geom.z, geom.levels
        slots: list[Block | None] = [None] * geom.path_slots
        placements: dict[tuple[int, bool], int] = {}
        displaced = 0
        reordered = False

        def fit(blk: Block) -> int:
            dmax = common_depth(blk.label, evict_label, levels)
            for d in range(dmax, -1, -1):
                base = d * z
                for j in range(z):
                    if slots[base + j] is None:
                        return base + j
            return -1

        def place(blk: Block, key: tuple[int, bool]) -> bool:
            i = fit(blk)
            if i < 0:
                return False
            slots[i] = blk
            placements[key] = i
            return True

        collateral_keys = {(b.addr, False) for b in collaterals}
        live_plan: list[tuple[Block, tuple[int, bool]]] = []
        target_key = (target_addr, False) if target_addr is not None else None
        if target_key is not None:
            tgt = self.stash.get(target_key)
            if tgt is not None:
                live_plan.append((tgt, target_key))
        for key, blk in self.stash.live_items():
            if key in collateral_keys or key == target_key:
                continue
            live_plan.append((blk, key))

        backup_plan: list[tuple[Block, tuple[int, bool]]] = []
        if new_backup is not None:
            backup_plan.append((new_backup, (new_backup.addr, True)))
        for blk in retained_backups:
            backup_plan.append((blk, (blk.addr, True)))

        def run_phases(order_backups_first: bool) -> bool:
            nonlocal displaced
            # mandatory collaterals
            for blk in collaterals:
                if not place(blk, (blk.addr, False)):
                    return False
            if not order_backups_first:
                for blk, key in live_plan:
                    place(blk, key)
            # mandatory backups; may displace best-effort placements
            for blk, key in backup_plan:
                if place(blk, key):
                    continue
                dmax = common_depth(blk.label, evict_label, levels)
                victim = None
                for d in range(dmax, -1, -1):
                    for j in range(z):
                        i = d * z + j
                        occupant = slots[i]
                        if occupant is None:
                            continue
                        okey = (occupant.addr, occupant.kind == KIND_BACKUP)
                        if okey in placements and okey not in collateral_keys \
                                and occupant.kind != KIND_BACKUP:
                            victim = (i, okey)
                            break
                    if victim:
                        break
                if victim is None:
                    return False
                i, okey = victim
                del placements[okey]
                slots[i] = blk
                placements[key] = i
                displaced += 1
            if order_backups_first:
                for blk, key in live_plan:
                    place(blk, key)
            return True

        if not run_phases(order_backups_first=False):
            # Rebuild with backups first; sacrifices live-placement parity
            # with the plain design but never strands a mandatory block.
            slots = [None] * geom.path_slots
            placements = {}
            displaced = 0
            reordered = True
            self.plan_reorders += 1
            ok = True
            for blk, key in backup_plan:
                ok = ok and place(blk, key)
            for blk in collaterals:
                ok = ok and place(blk, (blk.addr, False))
            for blk, key in live_plan:
                place(blk, key)
            if not ok:
                raise ProtocolError(
                    f"{self.name}: cannot place mandatory eviction candidates "
                    f"on path {evict_label}"
                )
        self.plan_displacements += displaced
        return PlanResult(slots, placements, displaced, reordered)

    def encode_plan(
        self, plan: PlanResult, evict_label: int
    ) -> tuple[list[tuple[int, bytes]], list[tuple[int, int, bytes, int]]]:
        """Serialize a plan into slot writes (leaf to root) plus plaintext
        (addr, seq, payload, kind) records for commit accounting."""
        geom = self.geom
        path = path_nodes(evict_label, geom.levels)
        writes: list[tuple[int, bytes]] = []
        contents: list[tuple[int, int, bytes, int]] = []
        dummy = make_dummy(self.block_size)
        for d in range(geom.levels, -1, -1):
            node = path[geom.levels - d]
            for j in range(geom.z):
                blk = plan.slots[d * geom.z + j]
                if blk is None:
                    data = encode_block(dummy, self.cipher, self.iv.next(), self.iv.next())
                else:
                    seq = self.seq.next()
                    out = replace(blk, seq=seq)
                    data = encode_block(out, self.cipher, self.iv.next(), self.iv.next())
                    contents.append((blk.addr, seq, blk.payload, blk.kind))
                writes.append((node * geom.z + j, data))
        return writes, contents

    def drop_placed(self, plan: PlanResult) -> None:
        """Remove plan-placed blocks from the stash (call once flushed)."""
        for key in plan.placements:
            self.stash.pop(key)

    def merged_pending(self, plan: PlanResult) -> list[tuple[int, int]]:
        """Pending remaps whose live block is placed by this plan."""
        if self.pending is None:
            return []
        out = []
        for (addr, is_backup) in plan.placements:
            if not is_backup and addr in self.pending:
                out.append((addr, self.pending[addr]))
        return out

    # -- invariants / inspection --------------------------------------------

    def scan_tree(self) -> list[tuple[int, int, Block]]:
        """Decode the whole region (uncounted): (node, slot, block) reals."""
        geom = self.geom
        out = []
        for node in range(geom.node_count):
            for j in range(geom.z):
                blk = decode_block(self.nvm.peek_slot(self.region, node * geom.z + j),
                                   self.cipher)
                if blk.is_real():
                    out.append((node, j, blk))
        return out

    def clone_onto(self, nvm: NvmImage, seq: Counter, iv: Counter,
                   persisted_label: Callable[[int], int]) -> "TreeLevel":
        copy = TreeLevel(
            self.name, self.region, self.geom, nvm, self.cipher, self.block_size,
            self.stash_capacity, seq, iv, persisted_label,
            self.pending_capacity if self.pending is not None else None,
        )
        copy.stash = self.stash.clone()
        if self.pending is not None:
            copy.pending = dict(self.pending)
        copy.plan_displacements = self.plan_displacements
        copy.plan_reorders = self.plan_reorders
        copy.stash_high_water = self.stash_high_water
        return copy
