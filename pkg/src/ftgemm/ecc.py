"""SECDED codec for 32-bit memory words: Hamming(38,32) plus overall parity.

Packed codeword layout (39 bits):

    bits  0..31   data word
    bits 32..37   Hamming check bits c0..c5
    bit  38       overall parity over bits 0..37

Internally the code uses the classic Hamming position numbering 1..38 where
positions 1, 2, 4, 8, 16, 32 hold the check bits and every other position
holds a data bit in ascending order.  A single flipped bit yields a nonzero
syndrome equal to its position and odd overall parity; two flips yield a
nonzero syndrome with even parity, which is detected but not correctable.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

__all__ = [
    "CODEWORD_BITS",
    "DATA_BITS",
    "EccStatus",
    "EccDecode",
    "secded_encode",
    "secded_decode",
    "parity_bit",
    "regfile_parity",
]

CODEWORD_BITS = 39
DATA_BITS = 32
_CHECK_COUNT = 6
_PARITY_BIT = 38

# Hamming position (1-based) of each packed data bit, and the reverse map
# from positions to packed bit indices.
_DATA_POS: list[int] = []
_POS_TO_PACKED: dict[int, int] = {}
for _pos in range(1, 39):
    if _pos & (_pos - 1) == 0:
        _POS_TO_PACKED[_pos] = DATA_BITS + _pos.bit_length() - 1
    else:
        _POS_TO_PACKED[_pos] = len(_DATA_POS)
        _DATA_POS.append(_pos)
assert len(_DATA_POS) == DATA_BITS

# For each check bit, the mask of packed data bits it covers.
_CHECK_MASK = [0] * _CHECK_COUNT
for _i, _pos in enumerate(_DATA_POS):
    for _j in range(_CHECK_COUNT):
        if _pos & (1 << _j):
            _CHECK_MASK[_j] |= 1 << _i


class EccStatus(enum.Enum):
    CLEAN = "clean"
    CORRECTED = "corrected"
    UNCORRECTABLE = "uncorrectable"


@dataclass(frozen=True)
class EccDecode:
    """Outcome of decoding one codeword."""

    word: int
    status: EccStatus
    corrected_bit: int | None = None  # packed bit index, when status is CORRECTED


def parity_bit(word: int) -> int:
    """Even-parity bit over an arbitrary-width word."""
    return word.bit_count() & 1


def regfile_parity(words) -> int:
    """XOR fold of a sequence of 32-bit words."""
    acc = 0
    for w in words:
        acc ^= w
    return acc & 0xFFFFFFFF


@lru_cache(maxsize=1 << 16)
def secded_encode(word: int) -> int:
    """Pack a 32-bit word into a 39-bit SECDED codeword."""
    if not 0 <= word < (1 << DATA_BITS):
        raise ValueError(f"data word out of range: {word:#x}")
    cw = word
    for j in range(_CHECK_COUNT):
        cw |= ((word & _CHECK_MASK[j]).bit_count() & 1) << (DATA_BITS + j)
    cw |= (cw.bit_count() & 1) << _PARITY_BIT
    return cw


@lru_cache(maxsize=1 << 16)
def secded_decode(cw: int) -> EccDecode:
    """Decode a 39-bit codeword, correcting at most one flipped bit."""
    if not 0 <= cw < (1 << CODEWORD_BITS):
        raise ValueError(f"codeword out of range: {cw:#x}")
    word = cw & 0xFFFFFFFF
    syndrome = 0
    for j in range(_CHECK_COUNT):
        calc = (word & _CHECK_MASK[j]).bit_count() & 1
        stored = (cw >> (DATA_BITS + j)) & 1
        if calc != stored:
            syndrome |= 1 << j
    odd = cw.bit_count() & 1

    if syndrome == 0 and not odd:
        return EccDecode(word, EccStatus.CLEAN)
    if odd:
        if syndrome == 0:
            # The overall parity bit itself flipped; data is intact.
            return EccDecode(word, EccStatus.CORRECTED, _PARITY_BIT)
        packed = _POS_TO_PACKED.get(syndrome)
        if packed is None:
            return EccDecode(word, EccStatus.UNCORRECTABLE)
        if packed < DATA_BITS:
            word ^= 1 << packed
        return EccDecode(word, EccStatus.CORRECTED, packed)
    return EccDecode(word, EccStatus.UNCORRECTABLE)
