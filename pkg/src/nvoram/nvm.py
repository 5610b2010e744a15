"""Simulated non-volatile memory.

Named regions of fixed-size slots with block-granularity write atomicity:
a slot is always either the old bytes or the new bytes, never a mix (slots
are immutable ``bytes`` replaced whole). Every read/write increments
traffic counters and accrues cycles from the cost model. Volatile-side
work accrues cycles only.

Writes may carry a round tag; per-round applied-write counts survive
``crash()`` so a harness can verify all-or-nothing application of staged
eviction rounds.
"""

from __future__ import annotations

from .config import CostModel
from .errors import CorruptImageError, OramError

REGION_TREE = "oram_tree"
REGION_POSMAP = "posmap_region"
REGION_POSMAP_TREE = "posmap_tree"
REGION_STASH = "stash_region"


class NvmImage:
    def __init__(self, cost: CostModel | None = None, record_trace: bool = False):
        self.cost = cost or CostModel()
        self._regions: dict[str, list[bytes]] = {}
        self._slot_sizes: dict[str, int] = {}
        self.reads: dict[str, int] = {}
        self.writes: dict[str, int] = {}
        self._elapsed = 0
        self.applied_per_round: dict[object, int] = {}
        self.trace: list[tuple[str, str, int]] | None = [] if record_trace else None

    # -- layout ----------------------------------------------------------

    def add_region(self, name: str, slot_size: int, slot_count: int) -> None:
        if name in self._regions:
            raise OramError(f"region {name!r} already exists")
        if slot_size < 1 or slot_count < 0:
            raise OramError("bad region geometry")
        zero = bytes(slot_size)
        self._regions[name] = [zero] * slot_count
        self._slot_sizes[name] = slot_size
        self.reads[name] = 0
        self.writes[name] = 0

    def has_region(self, name: str) -> bool:
        return name in self._regions

    def region_slots(self, name: str) -> int:
        return len(self._regions[name])

    def slot_size(self, name: str) -> int:
        return self._slot_sizes[name]

    def _check(self, region: str, index: int) -> None:
        slots = self._regions.get(region)
        if slots is None:
            raise OramError(f"unknown region {region!r}")
        if not 0 <= index < len(slots):
            raise OramError(f"index {index} out of range for region {region!r}")

    # -- traffic ----------------------------------------------------------

    def read_block(self, region: str, index: int) -> bytes:
        self._check(region, index)
        self.reads[region] += 1
        self._elapsed += self.cost.t_read_nvm
        if self.trace is not None:
            self.trace.append((region, "read", index))
        return self._regions[region][index]

    def write_block(self, region: str, index: int, data: bytes, round_tag=None) -> None:
        self._check(region, index)
        if len(data) != self._slot_sizes[region]:
            raise OramError(
                f"write of {len(data)} bytes into {self._slot_sizes[region]}-byte "
                f"slots of region {region!r}"
            )
        self._regions[region][index] = bytes(data)
        self.writes[region] += 1
        self._elapsed += self.cost.t_write_nvm
        if round_tag is not None:
            self.applied_per_round[round_tag] = self.applied_per_round.get(round_tag, 0) + 1
        if self.trace is not None:
            self.trace.append((region, "write", index))

    def peek_slot(self, region: str, index: int) -> bytes:
        """Uncounted read for test-side and recovery-side inspection."""
        self._check(region, index)
        return self._regions[region][index]

    def charge_volatile_read(self, n: int = 1) -> None:
        self._elapsed += n * self.cost.t_read_volatile

    def charge_volatile_write(self, n: int = 1) -> None:
        self._elapsed += n * self.cost.t_write_volatile

    @property
    def total_reads(self) -> int:
        return sum(self.reads.values())

    @property
    def total_writes(self) -> int:
        return sum(self.writes.values())

    def elapsed(self) -> int:
        return self._elapsed

    def reset_counters(self) -> None:
        for name in self.reads:
            self.reads[name] = 0
            self.writes[name] = 0
        self._elapsed = 0
        self.applied_per_round = {}
        if self.trace is not None:
            self.trace = []

    # -- crash / copy ------------------------------------------------------

    def _copy_into(self, other: "NvmImage") -> "NvmImage":
        other._regions = {name: list(slots) for name, slots in self._regions.items()}
        other._slot_sizes = dict(self._slot_sizes)
        other.reads = dict(self.reads)
        other.writes = dict(self.writes)
        other._elapsed = self._elapsed
        other.applied_per_round = dict(self.applied_per_round)
        return other

    def crash(self) -> "NvmImage":
        """Persistent state as of this instant; caller discards volatile state."""
        return self._copy_into(NvmImage(self.cost))

    def clone(self) -> "NvmImage":
        copy = self._copy_into(NvmImage(self.cost))
        if self.trace is not None:
            copy.trace = list(self.trace)
        return copy

    # -- dump / restore ----------------------------------------------------

    def dump_bytes(self) -> bytes:
        """Little-endian: per region, u32 name length, name, u64 byte length, bytes."""
        out = bytearray()
        for name, slots in self._regions.items():
            encoded = name.encode("utf-8")
            body = b"".join(slots)
            out += len(encoded).to_bytes(4, "little")
            out += encoded
            out += len(body).to_bytes(8, "little")
            out += body
        return bytes(out)

    def restore_bytes(self, data: bytes) -> None:
        """Load a dump into this image; region geometry must already match."""
        seen = set()
        pos = 0
        while pos < len(data):
            if pos + 4 > len(data):
                raise CorruptImageError("truncated region header")
            name_len = int.from_bytes(data[pos:pos + 4], "little")
            pos += 4
            if pos + name_len + 8 > len(data):
                raise CorruptImageError("truncated region header")
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            body_len = int.from_bytes(data[pos:pos + 8], "little")
            pos += 8
            if pos + body_len > len(data):
                raise CorruptImageError(f"region {name!r} body truncated")
            if name not in self._regions:
                raise CorruptImageError(f"unknown region {name!r} in dump")
            slot_size = self._slot_sizes[name]
            expected = slot_size * len(self._regions[name])
            if body_len != expected:
                raise CorruptImageError(
                    f"region {name!r} has {body_len} bytes, expected {expected}"
                )
            body = data[pos:pos + body_len]
            pos += body_len
            self._regions[name] = [
                bytes(body[i:i + slot_size]) for i in range(0, body_len, slot_size)
            ]
            seen.add(name)
        missing = set(self._regions) - seen
        if missing:
            raise CorruptImageError(f"dump is missing regions {sorted(missing)}")
