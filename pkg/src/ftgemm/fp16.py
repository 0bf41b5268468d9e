"""IEEE 754 binary16 arithmetic done entirely on integer bit patterns.

The compute array accumulates with a fused multiply-add: the product a*b is
kept exact and added to c before a single round-to-nearest-even step.  Host
floating point is never consulted, so results are reproducible bit for bit
on any interpreter.

Values are passed around as 16-bit unsigned integers.  All NaN outputs are
canonicalized to QNAN (0x7E00); NaN payloads never propagate.
"""

from __future__ import annotations

from fractions import Fraction
from functools import lru_cache
from numbers import Rational

__all__ = [
    "QNAN",
    "POS_INF",
    "NEG_INF",
    "fp16_fma",
    "fp16_add",
    "fp16_mul",
    "fp16_from_real",
    "fp16_to_real",
    "is_nan",
    "is_inf",
]

QNAN = 0x7E00
POS_INF = 0x7C00
NEG_INF = 0xFC00

_EXP_MASK = 0x1F
_MAN_MASK = 0x3FF


def _unpack(bits: int) -> tuple[int, int, int]:
    return (bits >> 15) & 1, (bits >> 10) & _EXP_MASK, bits & _MAN_MASK


def is_nan(bits: int) -> bool:
    s, e, m = _unpack(bits)
    return e == _EXP_MASK and m != 0


def is_inf(bits: int) -> bool:
    s, e, m = _unpack(bits)
    return e == _EXP_MASK and m == 0


def _significand(e: int, m: int) -> tuple[int, int]:
    """Return (integer significand, exponent of its LSB) for a finite input."""
    if e == 0:
        # subnormal: value = m * 2^-24
        return m, -24
    return m | 0x400, e - 25


def _round_pack(sign: int, mag: int, lsb_exp: int) -> int:
    """Round mag * 2**lsb_exp to nearest-even binary16 and pack with sign.

    mag must be positive.  Handles subnormal results, the carry out of
    rounding, and overflow to infinity.
    """
    # Exponent of the most significant bit of the value.
    top = lsb_exp + mag.bit_length() - 1
    if top >= -14:
        # Normal candidate: keep 11 significand bits, LSB at top - 10.
        target = top - 10
    else:
        # Subnormal: LSB pinned at 2^-24.
        target = -24
    shift = target - lsb_exp
    if shift <= 0:
        keep = mag << -shift
        rem = 0
        half = 1
    else:
        keep = mag >> shift
        rem = mag & ((1 << shift) - 1)
        half = 1 << (shift - 1)
    if rem > half or (rem == half and keep & 1):
        keep += 1
    if top >= -14:
        if keep == 0x800:
            keep >>= 1
            top += 1
        if top > 15:
            return (sign << 15) | POS_INF
        return (sign << 15) | ((top + 15) << 10) | (keep & _MAN_MASK)
    # Subnormal path.  keep == 0x400 means we rounded up into the smallest
    # normal; the packed encoding happens to fall out of the same arithmetic.
    return (sign << 15) | keep


@lru_cache(maxsize=1 << 20)
def fp16_fma(a: int, b: int, c: int) -> int:
    """Fused multiply-add: round(a * b + c) with one rounding step.

    The cache is load bearing: a fault campaign re-runs the same job many
    thousands of times, so the triple stream is almost entirely repeats.
    """
    sa, ea, ma = _unpack(a)
    sb, eb, mb = _unpack(b)
    sc, ec, mc = _unpack(c)

    a_nan = ea == _EXP_MASK and ma != 0
    b_nan = eb == _EXP_MASK and mb != 0
    c_nan = ec == _EXP_MASK and mc != 0
    if a_nan or b_nan or c_nan:
        return QNAN

    a_inf = ea == _EXP_MASK
    b_inf = eb == _EXP_MASK
    c_inf = ec == _EXP_MASK
    a_zero = ea == 0 and ma == 0
    b_zero = eb == 0 and mb == 0

    sp = sa ^ sb
    if a_inf or b_inf:
        if a_zero or b_zero:
            return QNAN  # inf * 0
        if c_inf and sc != sp:
            return QNAN  # inf - inf
        return (sp << 15) | POS_INF
    if c_inf:
        return (sc << 15) | POS_INF

    if a_zero or b_zero:
        # Exact product +-0; fall back to signed-zero addition rules.
        if ec != 0 or mc != 0:
            return c
        # 0 + 0: result is -0 only when both addends are -0 (round-to-nearest).
        return 0x8000 if (sp and sc) else 0x0000

    pa, xa = _significand(ea, ma)
    pb, xb = _significand(eb, mb)
    prod = pa * pb
    prod_exp = xa + xb

    if ec == 0 and mc == 0:
        total = prod if sp == 0 else -prod
        base = prod_exp
    else:
        pc, xc = _significand(ec, mc)
        base = min(prod_exp, xc)
        total = (prod << (prod_exp - base)) if sp == 0 else -(prod << (prod_exp - base))
        total += (pc << (xc - base)) if sc == 0 else -(pc << (xc - base))

    if total == 0:
        # Exact cancellation gives +0 under round-to-nearest-even.
        return 0x0000
    sign = 1 if total < 0 else 0
    return _round_pack(sign, abs(total), base)


def fp16_add(a: int, b: int) -> int:
    return fp16_fma(a, 0x3C00, b)


def fp16_mul(a: int, b: int) -> int:
    # The addend must carry the product's sign, or a zero product would
    # take its sign from the +0 addend instead of from the operands.
    return fp16_fma(a, b, (a ^ b) & 0x8000)


def fp16_from_real(value) -> int:
    """Quantize an exact real (int, Fraction, or float) to binary16.

    Floats are taken at their exact binary value.  Rounding is to nearest
    with ties to even; overflow saturates to the infinities.
    """
    if isinstance(value, float):
        if value != value:
            return QNAN
        if value == float("inf"):
            return POS_INF
        if value == float("-inf"):
            return NEG_INF
        value = Fraction(value)
    elif isinstance(value, int):
        value = Fraction(value)
    elif not isinstance(value, Rational):
        raise TypeError(f"expected an exact real, got {type(value).__name__}")

    if value == 0:
        return 0x0000
    sign = 1 if value < 0 else 0
    mag = -value if sign else value

    # Scale so the integer image keeps at least two guard bits below the
    # final LSB; a sticky bit folds in the remainder.
    p, q = mag.numerator, mag.denominator
    est = p.bit_length() - q.bit_length()  # floor(log2(mag)) within +-1
    lsb = min(est - 13, -26)
    if lsb < 0:
        num, den = p << -lsb, q
    else:
        num, den = p, q << lsb
    scaled, rem = divmod(num, den)
    sticky = 1 if rem else 0
    return _round_pack(sign, (scaled << 1) | sticky, lsb - 1)


def fp16_to_real(bits: int) -> Fraction:
    """Exact rational value of a finite pattern.  Raises on NaN and inf."""
    s, e, m = _unpack(bits)
    if e == _EXP_MASK:
        raise ValueError(f"pattern 0x{bits:04X} is not finite")
    sig, lsb = _significand(e, m)
    val = Fraction(sig) * Fraction(2) ** lsb
    return -val if s else val
