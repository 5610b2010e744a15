"""Format-preserving toy cipher.

Keyed keystream XOR over payloads (nonce iv2) and a word mask over header
fields (nonce iv1). Preserves the header/IV wire format without claiming
any cryptographic strength; do not reuse outside the simulator.
"""

_MASK64 = (1 << 64) - 1
_REP_BASE = (1 << 64) - 1  # repunit divisor for repeating a 64-bit lane


def mix64(x: int) -> int:
    """splitmix64 finalizer; cheap keyed diffusion."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class ToyCipher:
    def __init__(self, key: int):
        self._key = key & _MASK64

    def header_words(self, iv1: int) -> tuple[int, int, int, int]:
        """Four mask words for (addr, label, seq, kind) under nonce iv1."""
        base = self._key ^ (iv1 & _MASK64)
        return (
            mix64(base ^ 0xA5A50001),
            mix64(base ^ 0xA5A50002),
            mix64(base ^ 0xA5A50003),
            mix64(base ^ 0xA5A50004),
        )

    def payload_mask(self, iv2: int, nbytes: int) -> int:
        """Keystream for an nbytes payload (nbytes must be a multiple of 8)."""
        word = mix64(self._key ^ (iv2 & _MASK64) ^ 0x5EEDC0DE)
        # Repeat the 64-bit lane across the payload width.
        return word * (((1 << (8 * nbytes)) - 1) // _REP_BASE)

    def xor_payload(self, iv2: int, payload: bytes) -> bytes:
        n = len(payload)
        value = int.from_bytes(payload, "little") ^ self.payload_mask(iv2, n)
        return value.to_bytes(n, "little")


def expand_seed(seed: int, nbytes: int) -> bytes:
    """Deterministic payload bytes from a 64-bit seed (trace write values)."""
    out = bytearray()
    state = seed & _MASK64
    while len(out) < nbytes:
        state = mix64(state + 0x9E3779B97F4A7C15)
        out += state.to_bytes(8, "little")
    return bytes(out[:nbytes])
