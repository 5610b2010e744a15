"""Block wire format: header (addr, label, IVs, seq) plus fixed payload.

A block is dummy, real, or backup. Dummies carry the sentinel address and
seq 0; backups are real-valued copies flagged for priority eviction. The
seq field is a monotone write stamp used to resolve stale copies at read
time instead of persisting per-block valid bits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .cipher import ToyCipher

KIND_DUMMY = 0
KIND_REAL = 1
KIND_BACKUP = 2

_RAW_DUMMY_ADDR = (1 << 64) - 1
_HDR = struct.Struct("<QQQQQB")
HEADER_BYTES = _HDR.size  # 41


@dataclass(slots=True)
class Block:
    addr: int | None          # None is the dummy sentinel
    label: int
    seq: int
    kind: int
    payload: bytes
    iv1: int = 0              # nonces of the encoding this block was read from
    iv2: int = 0

    def is_real(self) -> bool:
        return self.kind != KIND_DUMMY


def slot_bytes(block_size: int) -> int:
    return HEADER_BYTES + block_size


def make_dummy(block_size: int) -> Block:
    return Block(addr=None, label=0, seq=0, kind=KIND_DUMMY, payload=bytes(block_size))


def encode_block(block: Block, cipher: ToyCipher, iv1: int, iv2: int) -> bytes:
    m_addr, m_label, m_seq, m_kind = cipher.header_words(iv1)
    raw_addr = _RAW_DUMMY_ADDR if block.addr is None else block.addr
    header = _HDR.pack(
        iv1,
        iv2,
        raw_addr ^ m_addr,
        block.label ^ m_label,
        block.seq ^ m_seq,
        (block.kind ^ m_kind) & 0xFF,
    )
    return header + cipher.xor_payload(iv2, block.payload)


def decode_block(data: bytes, cipher: ToyCipher) -> Block:
    iv1, iv2, e_addr, e_label, e_seq, e_kind = _HDR.unpack_from(data)
    m_addr, m_label, m_seq, m_kind = cipher.header_words(iv1)
    raw_addr = e_addr ^ m_addr
    addr = None if raw_addr == _RAW_DUMMY_ADDR else raw_addr
    return Block(
        addr=addr,
        label=e_label ^ m_label,
        seq=e_seq ^ m_seq,
        kind=(e_kind ^ m_kind) & 0xFF,
        payload=cipher.xor_payload(iv2, data[HEADER_BYTES:]),
        iv1=iv1,
        iv2=iv2,
    )
