"""Word-addressed scratchpad memory with SECDED codewords and an access log.

The model is deliberately flat: every access completes in the cycle it is
issued and the interconnect never reorders.  What matters for the engine is
(a) the codeword actually stored, (b) the order and addresses of accesses,
and (c) which compute rows a response was fanned out to.

Reads return the stored codeword as delivered on the response bus; a transit
flip mask models a transient on that bus, applied before the per-row ECC
decoders.  All rows served by one response see the same delivered bits, so
one decode stands in for the per-row decoder bank.

The engine-facing port (`read`/`write`) appends to the access log.  Operand
preload and result readback go through `poke`/`peek`, which model host DMA
over a side channel and are not logged.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .ecc import EccStatus, secded_decode, secded_encode

__all__ = ["MemResponse", "MemoryRangeError", "Tcdm"]

_MAGIC = b"FTGM"
_IMAGE_VERSION = 1


class MemoryRangeError(ValueError):
    """An address fell outside the configured capacity."""


@dataclass(frozen=True)
class MemResponse:
    """One read response as seen by the consumers.

    codeword carries the delivered bits (post transit faults, pre decode);
    word and ecc_status are the decoder outputs.  served_rows lists the
    engine rows this response was fanned out to.
    """

    word: int
    ecc_status: EccStatus
    served_rows: frozenset[int]
    codeword: int


class Tcdm:
    """Tightly coupled data memory with optional SECDED protection."""

    def __init__(self, capacity: int, ecc: bool = True):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.ecc = ecc
        self.cells: list[int] = [secded_encode(0) if ecc else 0] * capacity
        self.access_log: list[tuple[int, str, int]] = []

    def _check(self, addr: int) -> None:
        if not 0 <= addr < self.capacity:
            raise MemoryRangeError(f"address {addr} outside capacity {self.capacity}")

    # Engine-facing port -------------------------------------------------

    def read(
        self,
        addr: int,
        cycle: int,
        served_rows: frozenset[int] = frozenset(),
        flip_mask: int = 0,
    ) -> MemResponse:
        self._check(addr)
        self.access_log.append((cycle, "read", addr))
        cw = self.cells[addr] ^ flip_mask
        if self.ecc:
            dec = secded_decode(cw)
            return MemResponse(dec.word, dec.status, served_rows, cw)
        return MemResponse(cw & 0xFFFFFFFF, EccStatus.CLEAN, served_rows, cw)

    def write(self, addr: int, word: int, cycle: int) -> None:
        self._check(addr)
        if not 0 <= word < (1 << 32):
            raise ValueError(f"data word out of range: {word:#x}")
        self.access_log.append((cycle, "write", addr))
        self.cells[addr] = secded_encode(word) if self.ecc else word

    # Host side channel --------------------------------------------------

    def poke(self, addr: int, word: int) -> None:
        """Store a word without touching the access log (host DMA)."""
        self._check(addr)
        if not 0 <= word < (1 << 32):
            raise ValueError(f"data word out of range: {word:#x}")
        self.cells[addr] = secded_encode(word) if self.ecc else word

    def peek(self, addr: int) -> int:
        """Decoded data word at addr, ignoring any ECC damage."""
        self._check(addr)
        return self.cells[addr] & 0xFFFFFFFF

    def poke_raw(self, addr: int, cell: int) -> None:
        """Store raw cell bits, including check bits.  Test hook for ECC faults."""
        self._check(addr)
        if not 0 <= cell < (1 << 39):
            raise ValueError(f"cell value out of range: {cell:#x}")
        self.cells[addr] = cell

    def peek_raw(self, addr: int) -> int:
        self._check(addr)
        return self.cells[addr]

    # Image files --------------------------------------------------------

    def dump_image(self, path: str) -> None:
        """Write the full memory to a binary image file.

        Layout: 16-byte header (magic "FTGM", version u8, flags u8 with
        bit0 = ecc, u16 zero, capacity u64 LE) followed by one u64 LE
        record per word holding the raw cell bits.
        """
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<BBHQ", _IMAGE_VERSION, 1 if self.ecc else 0, 0, self.capacity))
            fh.write(struct.pack(f"<{self.capacity}Q", *self.cells))

    @classmethod
    def load_image(cls, path: str) -> "Tcdm":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _MAGIC:
                raise ValueError(f"{path}: not a memory image (bad magic)")
            version, flags, _, capacity = struct.unpack("<BBHQ", fh.read(12))
            if version != _IMAGE_VERSION:
                raise ValueError(f"{path}: unsupported image version {version}")
            payload = fh.read(8 * capacity)
            if len(payload) != 8 * capacity:
                raise ValueError(f"{path}: truncated image")
            mem = cls(capacity, ecc=bool(flags & 1))
            cells = list(struct.unpack(f"<{capacity}Q", payload))
            limit = 1 << (39 if mem.ecc else 32)
            for i, cell in enumerate(cells):
                if cell >= limit:
                    raise ValueError(f"{path}: record {i} out of range")
            mem.cells = cells
            return mem
