"""Battery-backed write pending queues and the drainer bracketing rounds.

Entries enqueued between a ``start`` and ``end`` marker belong to exactly
one eviction round. Contents survive a crash iff the end marker was seen:
``flush_on_crash`` completes a committed round and discards anything else.
"""

from __future__ import annotations

from typing import Callable

from .errors import ProtocolError, WpqOverflowError


class Wpq:
    def __init__(self, name: str, capacity: int):
        self.name = name
        self.capacity = capacity
        self.entries: list = []
        self.round_id = None
        self.start_seen = False
        self.end_seen = False
        self._drained = 0

    def idle(self) -> bool:
        return self.round_id is None

    def begin(self, round_id) -> None:
        if self.round_id is not None:
            raise ProtocolError(f"{self.name}: round {self.round_id} still open")
        self.round_id = round_id
        self.start_seen = True
        self.end_seen = False
        self.entries = []
        self._drained = 0

    def push(self, item) -> None:
        if not self.start_seen or self.end_seen:
            raise ProtocolError(f"{self.name}: push outside an open round")
        if len(self.entries) >= self.capacity:
            raise WpqOverflowError(
                f"{self.name}: capacity {self.capacity} exceeded"
            )
        self.entries.append(item)

    def end(self) -> None:
        if not self.start_seen:
            raise ProtocolError(f"{self.name}: end without start")
        self.end_seen = True

    def drain(self, apply: Callable) -> None:
        """Apply all entries in order and close the round."""
        if not self.end_seen:
            raise ProtocolError(f"{self.name}: drain before end marker")
        while self._drained < len(self.entries):
            apply(self.entries[self._drained])
            self._drained += 1
        self._reset()

    def flush_on_crash(self, apply: Callable) -> str | None:
        """Power-fail disposition: complete a committed round, drop the rest."""
        if self.round_id is None:
            return None
        if self.end_seen:
            while self._drained < len(self.entries):
                apply(self.entries[self._drained])
                self._drained += 1
            self._reset()
            return "committed"
        self._reset()
        return "discarded"

    def _reset(self) -> None:
        self.round_id = None
        self.start_seen = False
        self.end_seen = False
        self.entries = []
        self._drained = 0

    def clone(self) -> "Wpq":
        copy = Wpq(self.name, self.capacity)
        copy.entries = list(self.entries)
        copy.round_id = self.round_id
        copy.start_seen = self.start_seen
        copy.end_seen = self.end_seen
        copy._drained = self._drained
        return copy


class Drainer:
    """Issues the start/end signals that gate both queues atomically."""

    def __init__(self, data: Wpq, posmap: Wpq):
        self.data = data
        self.posmap = posmap

    def start(self, round_id) -> None:
        self.data.begin(round_id)
        self.posmap.begin(round_id)

    def end(self) -> None:
        self.data.end()
        self.posmap.end()
