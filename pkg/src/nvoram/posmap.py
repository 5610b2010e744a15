"""Position-map persistence strategies.

Flat strategies keep a volatile mirror for lookups and persist labels into
the trusted ``posmap_region``:

* direct   - one entry write per merged remap;
* oblivious - a full-region sweep per flush whose (address, op) trace is a
  function of region size only, hiding which entries changed.

``fp-tree`` persists into an untrusted entry-granular bucket tree: every
flush writes one full tree path regardless of dirtiness (write-only after
initialization), trading write traffic for not needing a trusted region.

``recursive`` stores the map as a chain of small ORAM trees; the label of
a level-i block lives in the content of its level-(i+1) parent, and the
top-level table persists in the trusted region. Each chain level runs the
same backup/pending protocol as the data tree, so a committed flush keeps
the whole chain consistent.
"""

from __future__ import annotations

import random
import struct
from typing import Callable

from .blocks import Block, KIND_BACKUP, decode_block
from .cipher import ToyCipher, mix64
from .config import ExperimentConfig
from .core import Counter, LoadResult, TreeGeometry, TreeLevel, path_nodes
from .errors import ConsistencyError, ProtocolError
from .nvm import NvmImage, REGION_POSMAP, REGION_POSMAP_TREE

_LABEL = struct.Struct("<I")
_FP_SLOT = struct.Struct("<QQQ")  # iv, masked addr|label, masked seq
_FP_DUMMY = 0xFFFFFFFF

# Serialized width of one queued posmap entry: 32-bit address + 24-bit label.
ENTRY_BITS = 32 + 24


def pack_entry(addr: int, label: int) -> bytes:
    """Queue wire format: 56 bits, little-endian."""
    return (addr | (label << 32)).to_bytes(7, "little")


def unpack_entry(data: bytes) -> tuple[int, int]:
    value = int.from_bytes(data, "little")
    return value & 0xFFFFFFFF, value >> 32


def record_write_count(record) -> int:
    """NVM writes one staged posmap record performs when applied."""
    kind = record[0]
    if kind == "sweep":
        return record[2]
    return 1


class DirectBackend:
    """Trusted-region table, volatile mirror, per-entry flush writes."""

    name = "direct"

    def __init__(self, config: ExperimentConfig, nvm: NvmImage,
                 cipher: ToyCipher, seq: Counter, iv: Counter,
                 write_through: bool = False):
        self.config = config
        self.nvm = nvm
        self.cipher = cipher
        self.mirror: list[int] = [0] * config.n_blocks
        self.write_through = write_through
        self.entries_lost = 0

    def init_regions(self, init_labels: list[int]) -> None:
        self.nvm.add_region(REGION_POSMAP, _LABEL.size, self.config.n_blocks)
        for addr, label in enumerate(init_labels):
            self.mirror[addr] = label
            self.nvm.write_block(REGION_POSMAP, addr, _LABEL.pack(label),
                                 round_tag="init")

    def lookup(self, addr: int, read_cb=None) -> int:
        if self.write_through:
            self.nvm.read_block(REGION_POSMAP, addr)
        else:
            self.nvm.charge_volatile_read()
        return self.mirror[addr]

    def view(self, addr: int) -> int:
        return self.mirror[addr]

    def set_immediate(self, addr: int, label: int, read_cb=None, apply_cb=None) -> None:
        self.mirror[addr] = label
        if self.write_through:
            self.nvm.write_block(REGION_POSMAP, addr, _LABEL.pack(label))

    def note_merged(self, addr: int, label: int) -> None:
        self.mirror[addr] = label

    def queue_flush(self, dirty: list[tuple[int, int]], evict_label: int,
                    read_cb=None) -> list:
        return [("entry", addr, label) for addr, label in dirty]

    def apply(self, record, round_tag=None, point_cb=None) -> None:
        kind = record[0]
        if kind != "entry":
            raise ProtocolError(f"direct backend cannot apply {kind!r}")
        _, addr, label = record
        if point_cb is not None:
            point_cb(0)
        self.nvm.write_block(REGION_POSMAP, addr, _LABEL.pack(label),
                             round_tag=round_tag)

    @staticmethod
    def recover_table(image: NvmImage, config: ExperimentConfig,
                      cipher: ToyCipher) -> list[int | None]:
        return [
            _LABEL.unpack(image.peek_slot(REGION_POSMAP, addr))[0]
            for addr in range(config.n_blocks)
        ]

    def clone_onto(self, nvm: NvmImage, cipher: ToyCipher,
                   seq: Counter, iv: Counter) -> "DirectBackend":
        copy = type(self)(self.config, nvm, cipher, seq, iv,
                          write_through=self.write_through)
        copy.mirror = list(self.mirror)
        copy.entries_lost = self.entries_lost
        return copy


class ObliviousBackend(DirectBackend):
    """Trusted-region table flushed with a change-independent full sweep."""

    name = "oblivious"

    def queue_flush(self, dirty, evict_label, read_cb=None) -> list:
        return [("sweep", tuple(dirty), self.config.n_blocks)]

    def apply(self, record, round_tag=None, point_cb=None) -> None:
        if record[0] != "sweep":
            raise ProtocolError(f"oblivious backend cannot apply {record[0]!r}")
        _, dirty, n_slots = record
        new = dict(dirty)
        for slot in range(n_slots):
            if point_cb is not None:
                point_cb(slot)
            current = self.nvm.read_block(REGION_POSMAP, slot)
            label = new.get(slot)
            data = current if label is None else _LABEL.pack(label)
            self.nvm.write_block(REGION_POSMAP, slot, data, round_tag=round_tag)


class FpTreeBackend:
    """Untrusted entry-granular tree; a full path of entries per flush."""

    name = "fp-tree"

    def __init__(self, config: ExperimentConfig, nvm: NvmImage,
                 cipher: ToyCipher, seq: Counter, iv: Counter):
        self.config = config
        self.nvm = nvm
        self.cipher = cipher
        self.seq = seq
        self.iv = iv
        self.mirror: list[int] = [0] * config.n_blocks
        n_leaf_slots = -(-config.n_blocks // config.z)  # leaves hold N entries
        self.geom = TreeGeometry(max(0, (n_leaf_slots - 1).bit_length()), config.z)
        self.entries_lost = 0

    @property
    def path_entries(self) -> int:
        return self.geom.path_slots

    def init_regions(self, init_labels: list[int]) -> None:
        self.nvm.add_region(REGION_POSMAP_TREE, _FP_SLOT.size,
                            self.geom.node_count * self.config.z)
        for addr, label in enumerate(init_labels):
            self.mirror[addr] = label
            self.nvm.write_block(REGION_POSMAP_TREE, addr,
                                 self._encode(addr, label, 0), round_tag="init")

    def _encode(self, addr: int | None, label: int, seq: int) -> bytes:
        iv = self.iv.next()
        m1, m2, _, _ = self.cipher.header_words(iv)
        raw = _FP_DUMMY if addr is None else addr
        return _FP_SLOT.pack(iv, (raw | (label << 32)) ^ m1, seq ^ m2)

    def _decode(self, data: bytes) -> tuple[int | None, int, int]:
        iv, e1, e2 = _FP_SLOT.unpack(data)
        m1, m2, _, _ = self.cipher.header_words(iv)
        value = e1 ^ m1
        addr = value & 0xFFFFFFFF
        return (None if addr == _FP_DUMMY else addr), value >> 32, e2 ^ m2

    def lookup(self, addr: int, read_cb=None) -> int:
        self.nvm.charge_volatile_read()
        return self.mirror[addr]

    def view(self, addr: int) -> int:
        return self.mirror[addr]

    def note_merged(self, addr: int, label: int) -> None:
        self.mirror[addr] = label

    def queue_flush(self, dirty, evict_label, read_cb=None) -> list:
        """One full tree path of entry writes toward the eviction label."""
        pos_label = evict_label % self.geom.n_leaves
        slots = []
        for node in path_nodes(pos_label, self.geom.levels):
            for j in range(self.config.z):
                slots.append(node * self.config.z + j)
        if len(dirty) > len(slots):
            self.entries_lost += len(dirty) - len(slots)
        records = []
        for k, slot in enumerate(slots):
            if k < len(dirty):
                addr, label = dirty[k]
                data = self._encode(addr, label, self.seq.next())
            else:
                data = self._encode(None, 0, 0)
            records.append(("slot", REGION_POSMAP_TREE, slot, data))
        return records

    def apply(self, record, round_tag=None, point_cb=None) -> None:
        _, region, slot, data = record
        if point_cb is not None:
            point_cb(slot)
        self.nvm.write_block(region, slot, data, round_tag=round_tag)

    @staticmethod
    def recover_table(image: NvmImage, config: ExperimentConfig,
                      cipher: ToyCipher) -> list[int | None]:
        """Best-effort scan: highest-seq record per address; overwritten
        records are unrecoverable by construction of the write-only tree."""
        probe = FpTreeBackend(config, image, cipher, Counter(), Counter())
        table: list[int | None] = [None] * config.n_blocks
        best = [-1] * config.n_blocks
        for slot in range(image.region_slots(REGION_POSMAP_TREE)):
            addr, label, seq = probe._decode(image.peek_slot(REGION_POSMAP_TREE, slot))
            if addr is None or addr >= config.n_blocks:
                continue
            if seq > best[addr]:
                best[addr] = seq
                table[addr] = label
        return table

    def clone_onto(self, nvm: NvmImage, cipher: ToyCipher,
                   seq: Counter, iv: Counter) -> "FpTreeBackend":
        copy = FpTreeBackend(self.config, nvm, cipher, seq, iv)
        copy.mirror = list(self.mirror)
        copy.entries_lost = self.entries_lost
        return copy


def _pm_sizes(config: ExperimentConfig) -> list[int]:
    """Block counts per chain level (index 0 = level holding data labels)."""
    sizes = []
    prev = config.n_blocks
    for _ in range(config.rcr_levels):
        prev = -(-prev // config.rcr_pack)
        sizes.append(prev)
    return sizes


def _pm_geometry(n_blocks: int, z: int) -> TreeGeometry:
    return TreeGeometry(max(0, (n_blocks - 1).bit_length()), z)


def _unpack_label(payload: bytes, index: int) -> int:
    return _LABEL.unpack_from(payload, index * 4)[0]


def _pack_label(payload: bytes, index: int, label: int) -> bytes:
    off = index * 4
    return payload[:off] + _LABEL.pack(label) + payload[off + 4:]


class RecursiveBackend:
    """Chain of metadata ORAM trees with a trusted-region top table.

    ``queued=True`` defers chain evictions into the caller's staged round
    (crash-consistent); ``queued=False`` writes them back immediately with
    no backups (the plain recursive design).
    """

    name = "recursive"

    def __init__(self, config: ExperimentConfig, nvm: NvmImage,
                 cipher: ToyCipher, seq: Counter, iv: Counter, queued: bool):
        self.config = config
        self.nvm = nvm
        self.cipher = cipher
        self.seq = seq
        self.iv = iv
        self.queued = queued
        self.pack = config.rcr_pack
        self.sizes = _pm_sizes(config)
        self.h = config.rcr_levels
        self.persisted_data: list[int] = [0] * config.n_blocks
        # block_labels[i][b] = persisted label of level-i block b
        self.block_labels: list[list[int]] = [[0] * n for n in self.sizes]
        self.rngs = [
            random.Random(mix64(config.seed ^ (0x9C0FFEE0 + i)))
            for i in range(self.h)
        ]
        self.levels: list[TreeLevel] = []
        for i, n_blocks in enumerate(self.sizes):
            geom = _pm_geometry(n_blocks, config.z)
            labels = self.block_labels[i]
            self.levels.append(TreeLevel(
                name=f"posmap-{i + 1}",
                region=f"{REGION_POSMAP_TREE}_{i + 1}",
                geom=geom,
                nvm=nvm,
                cipher=cipher,
                block_size=config.block_size,
                stash_capacity=config.stash_capacity,
                seq=seq,
                iv=iv,
                persisted_label=labels.__getitem__,
                pending_capacity=config.temp_posmap_capacity if queued else None,
            ))
        # per-level loads pending eviction: (label, LoadResult, new_backup|None)
        self._loaded: list[list[tuple[int, LoadResult, Block | None]]] = [
            [] for _ in range(self.h)
        ]

    @property
    def n_top(self) -> int:
        return self.sizes[-1]

    # -- initialization ------------------------------------------------------

    def init_regions(self, init_labels: list[int]) -> None:
        contents: list[list[bytes]] = []
        child_labels = list(init_labels)
        for i, n_blocks in enumerate(self.sizes):
            payloads = []
            for b in range(n_blocks):
                payload = bytearray(self.config.block_size)
                for j in range(self.pack):
                    child = b * self.pack + j
                    if child < len(child_labels):
                        payload[j * 4:j * 4 + 4] = _LABEL.pack(child_labels[child])
                payloads.append(bytes(payload))
            contents.append(payloads)
            geom = self.levels[i].geom
            self.block_labels[i] = [
                self.rngs[i].randrange(geom.n_leaves) for _ in range(n_blocks)
            ]
            self.levels[i].persisted_label = self.block_labels[i].__getitem__
            child_labels = self.block_labels[i]
        self.persisted_data = list(init_labels)
        for i, lvl in enumerate(self.levels):
            self.nvm.add_region(lvl.region, 41 + self.config.block_size,
                                lvl.geom.node_count * self.config.z)
            lvl.fill_initial(
                (b, self.block_labels[i][b], contents[i][b])
                for b in range(self.sizes[i])
            )
        self.nvm.add_region(REGION_POSMAP, _LABEL.size, self.n_top)
        for b, label in enumerate(self.block_labels[-1]):
            self.nvm.write_block(REGION_POSMAP, b, _LABEL.pack(label),
                                 round_tag="init")

    # -- lookups ---------------------------------------------------------------

    def _touch_block(self, i: int, g: int, read_cb=None) -> Block:
        """One chain access at level i: exactly one path read, remap on miss."""
        lvl = self.levels[i]
        live = lvl.stash.live(g)
        if live is not None:
            dummy_label = self.rngs[i].randrange(lvl.geom.n_leaves)
            res = lvl.load_path(dummy_label, None, None, point_cb=read_cb)
            self._loaded[i].append((dummy_label, res, None))
            return live
        label = lvl.current_label(g)
        res = lvl.load_path(label, g, label, point_cb=read_cb)
        self._loaded[i].append((label, res, None))
        blk = res.target
        new_label = self.rngs[i].randrange(lvl.geom.n_leaves)
        if self.queued:
            lvl.note_pending(g, new_label)
            backup = Block(addr=g, label=label, seq=0, kind=KIND_BACKUP,
                           payload=blk.payload)
            lvl.stash.put_backup(backup)
            self._loaded[i][-1] = (label, res, backup)
        else:
            self._record_label_immediate(i, g, new_label)
        blk.label = new_label
        return blk

    def _record_label_immediate(self, i: int, g: int, label: int) -> None:
        self.block_labels[i][g] = label
        if i + 1 < self.h:
            parent = self.levels[i + 1].stash.live(g // self.pack)
            if parent is None:
                raise ProtocolError("chain parent missing during immediate update")
            parent.payload = _pack_label(parent.payload, g % self.pack, label)
        # top level labels live only in the volatile table for the plain design

    def lookup(self, addr: int, read_cb=None) -> int:
        value = None
        for i in range(self.h - 1, -1, -1):
            g = addr // self.pack ** (i + 1)
            blk = self._touch_block(i, g, read_cb)
            child = (addr // self.pack ** i) % self.pack
            value = _unpack_label(blk.payload, child)
        return value

    def view(self, addr: int) -> int:
        return self.persisted_data[addr]

    def note_merged(self, addr: int, label: int) -> None:
        # persisted_data is maintained inside the flush cascade
        pass

    # -- plain (immediate) updates ----------------------------------------------

    def set_immediate(self, addr: int, label: int, read_cb=None,
                      apply_cb: Callable | None = None) -> None:
        g = addr // self.pack
        blk = self.levels[0].stash.live(g)
        if blk is None:
            raise ProtocolError("chain block missing during immediate update")
        blk.payload = _pack_label(blk.payload, addr % self.pack, label)
        self.persisted_data[addr] = label
        for record in self._evict_loaded():
            if apply_cb is not None:
                apply_cb(record)
            else:
                self.apply(record)

    def _evict_loaded(self) -> list:
        """Write back every path loaded since the last write-back (plain mode)."""
        records: list = []
        for i in range(self.h):
            lvl = self.levels[i]
            for label, res, new_backup in self._loaded[i]:
                plan = lvl.build_plan(label, res.collaterals,
                                      res.retained_backups, new_backup, None)
                writes, _ = lvl.encode_plan(plan, label)
                records.extend(
                    ("slot", lvl.region, slot, data) for slot, data in writes
                )
                lvl.drop_placed(plan)
            self._loaded[i] = []
        return records

    # -- staged (queued) flush ----------------------------------------------------

    def _ensure_for_update(self, i: int, g: int, read_cb=None) -> Block:
        """Make level-i block g updatable so the round persists its new
        content: either it is stash-resident and its chain path (holding
        its backup) is loaded this round, or we run a full chain touch."""
        lvl = self.levels[i]
        live = lvl.stash.live(g)
        chain_label = lvl.persisted_label(g)
        if live is not None:
            if all(lbl != chain_label for lbl, _, _ in self._loaded[i]):
                res = lvl.load_path(chain_label, None, None, point_cb=read_cb)
                self._loaded[i].append((chain_label, res, None))
            return live
        res = lvl.load_path(chain_label, g, chain_label, point_cb=read_cb)
        blk = res.target
        new_label = self.rngs[i].randrange(lvl.geom.n_leaves)
        lvl.note_pending(g, new_label)
        backup = Block(addr=g, label=chain_label, seq=0, kind=KIND_BACKUP,
                       payload=blk.payload)
        lvl.stash.put_backup(backup)
        self._loaded[i].append((chain_label, res, backup))
        blk.label = new_label
        return blk

    def queue_flush(self, dirty: list[tuple[int, int]], evict_label: int,
                    read_cb=None) -> list:
        if not self.queued:
            raise ProtocolError("plain recursive backend has no staged flush")
        records: list = []
        updates: list[list[tuple[int, int]]] = [list(dirty)]
        updates.extend([] for _ in range(self.h))
        for i in range(self.h):
            lvl = self.levels[i]
            for child, label in updates[i]:
                g = child // self.pack
                blk = self._ensure_for_update(i, g, read_cb)
                blk.payload = _pack_label(blk.payload, child % self.pack, label)
                if i == 0:
                    self.persisted_data[child] = label
                else:
                    self.block_labels[i - 1][child] = label
            # backups must carry post-update content
            for key, backup in list(lvl.stash.items()):
                if key[1]:
                    live = lvl.stash.live(key[0])
                    if live is not None:
                        backup.payload = live.payload
            for label, res, new_backup in self._loaded[i]:
                target = new_backup.addr if new_backup is not None else None
                plan = lvl.build_plan(label, res.collaterals, res.retained_backups,
                                      new_backup, target)
                writes, _ = lvl.encode_plan(plan, label)
                records.extend(
                    ("slot", lvl.region, slot, data) for slot, data in writes
                )
                merged = lvl.merged_pending(plan)
                lvl.drop_placed(plan)
                for b, new_label in merged:
                    lvl.pending.pop(b, None)
                    if i + 1 < self.h:
                        updates[i + 1].append((b, new_label))
                    else:
                        self.block_labels[i][b] = new_label
                        records.append(("entry", b, new_label))
            self._loaded[i] = []
        return records

    def apply(self, record, round_tag=None, point_cb=None) -> None:
        kind = record[0]
        if point_cb is not None:
            point_cb(0)
        if kind == "slot":
            _, region, slot, data = record
            self.nvm.write_block(region, slot, data, round_tag=round_tag)
        elif kind == "entry":
            _, b, label = record
            self.nvm.write_block(REGION_POSMAP, b, _LABEL.pack(label),
                                 round_tag=round_tag)
        else:
            raise ProtocolError(f"recursive backend cannot apply {kind!r}")

    # -- recovery ------------------------------------------------------------------

    @staticmethod
    def recover_table(image: NvmImage, config: ExperimentConfig,
                      cipher: ToyCipher) -> list[int | None]:
        sizes = _pm_sizes(config)
        pack = config.rcr_pack
        labels = [
            _LABEL.unpack(image.peek_slot(REGION_POSMAP, b))[0]
            for b in range(sizes[-1])
        ]
        for i in range(config.rcr_levels - 1, -1, -1):
            geom = _pm_geometry(sizes[i], config.z)
            region = f"{REGION_POSMAP_TREE}_{i + 1}"
            child_count = config.n_blocks if i == 0 else sizes[i - 1]
            child_labels: list[int] = []
            for b in range(sizes[i]):
                blk = resolve_tree_copy(image, region, cipher, geom, config.z,
                                        labels[b], b)
                for j in range(pack):
                    child = b * pack + j
                    if child < child_count:
                        child_labels.append(_unpack_label(blk.payload, j))
            labels = child_labels
        return labels

    def clone_onto(self, nvm: NvmImage, cipher: ToyCipher,
                   seq: Counter, iv: Counter) -> "RecursiveBackend":
        if any(self._loaded[i] for i in range(self.h)):
            raise ProtocolError("cannot clone with evictions pending")
        copy = RecursiveBackend(self.config, nvm, cipher, seq, iv, self.queued)
        copy.persisted_data = list(self.persisted_data)
        copy.block_labels = [list(x) for x in self.block_labels]
        for i in range(self.h):
            copy.rngs[i].setstate(self.rngs[i].getstate())
            copy.levels[i] = self.levels[i].clone_onto(
                nvm, seq, iv, copy.block_labels[i].__getitem__
            )
        return copy


def resolve_tree_copy(image: NvmImage, region: str, cipher: ToyCipher,
                      geom: TreeGeometry, z: int, label: int, addr: int) -> Block:
    """Maximal-seq copy of ``addr`` with a matching label on one path.

    Backup copies count; raises if no copy exists (a persistent entry must
    always point at a reachable copy)."""
    best: Block | None = None
    for node in path_nodes(label, geom.levels):
        for j in range(z):
            blk = decode_block(image.peek_slot(region, node * z + j), cipher)
            if not blk.is_real() or blk.addr != addr or blk.label != label:
                continue
            if best is None or blk.seq > best.seq:
                best = blk
    if best is None:
        raise ConsistencyError(
            f"{region}: no copy of block {addr} on path {label}"
        )
    return best
