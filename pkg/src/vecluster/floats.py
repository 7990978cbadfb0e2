"""Floating-point format codecs for the narrow element widths.

f64, f32, and f16 ride on struct's native formats ('d', 'f', 'e'), which
round to nearest-even.  There is no stdlib 8-bit float, so an E4M3-style
codec (1 sign, 4 exponent, 3 mantissa bits, bias 7, no infinities) is
implemented here.  Narrow arithmetic elsewhere is computed in f64 and
rounded through these codecs at accumulation boundaries only.
"""

import math
import struct

F8_BIAS = 7
F8_MAX = 448.0  # 0x7e = 1.75 * 2**8


def f8_decode(byte: int) -> float:
    sign = -1.0 if byte & 0x80 else 1.0
    exp = (byte >> 3) & 0xF
    mant = byte & 0x7
    if exp == 0:
        return sign * mant * 2.0 ** (1 - F8_BIAS - 3)
    return sign * (1.0 + mant / 8.0) * 2.0 ** (exp - F8_BIAS)


def f8_encode(value: float) -> int:
    if math.isnan(value):
        return 0x7F
    sign = 0x80 if math.copysign(1.0, value) < 0 else 0
    mag = abs(value)
    if mag == 0.0:
        return sign
    if mag >= F8_MAX:
        return sign | 0x7E  # saturate, no infinity in this format
    # Round mantissa in the scale of the candidate exponent (ties to even).
    exp = max(math.floor(math.log2(mag)), -F8_BIAS)
    scaled = _round_even(mag * 2.0 ** (3 - exp))
    if scaled >= 16:  # rounded up across a binade
        exp += 1
        scaled = _round_even(mag * 2.0 ** (3 - exp))
    if exp < 1 - F8_BIAS:  # subnormal
        quant = _round_even(mag * 2.0 ** (F8_BIAS - 1 + 3))
        if quant >= 8:
            return sign | (1 << 3) | (quant - 8)
        return sign | quant
    if exp > 8 or (exp == 8 and scaled > 14):
        return sign | 0x7E
    return sign | ((exp + F8_BIAS) << 3) | (scaled - 8)


def _round_even(x: float) -> int:
    lo = math.floor(x)
    frac = x - lo
    if frac > 0.5 or (frac == 0.5 and lo % 2 == 1):
        return lo + 1
    return lo


def f16_round(value: float) -> float:
    return struct.unpack("<e", struct.pack("<e", value))[0]


def f32_round(value: float) -> float:
    return struct.unpack("<f", struct.pack("<f", value))[0]


def f8_round(value: float) -> float:
    return f8_decode(f8_encode(value))


def decode_elements(data: bytes, width_bits: int) -> list:
    """Unpack a byte string into floats of the given element width."""
    if width_bits == 64:
        return list(struct.unpack(f"<{len(data) // 8}d", data))
    if width_bits == 32:
        return list(struct.unpack(f"<{len(data) // 4}f", data))
    if width_bits == 16:
        return list(struct.unpack(f"<{len(data) // 2}e", data))
    if width_bits == 8:
        return [f8_decode(b) for b in data]
    raise ValueError(f"unsupported element width: {width_bits}")


def encode_elements(values, width_bits: int) -> bytes:
    if width_bits == 64:
        return struct.pack(f"<{len(values)}d", *values)
    if width_bits == 32:
        return struct.pack(f"<{len(values)}f", *values)
    if width_bits == 16:
        return struct.pack(f"<{len(values)}e", *values)
    if width_bits == 8:
        return bytes(f8_encode(v) for v in values)
    raise ValueError(f"unsupported element width: {width_bits}")


def round_to_width(value: float, width_bits: int) -> float:
    if width_bits == 64:
        return value
    if width_bits == 32:
        return f32_round(value)
    if width_bits == 16:
        return f16_round(value)
    if width_bits == 8:
        return f8_round(value)
    raise ValueError(f"unsupported element width: {width_bits}")


def f64_bits(value: float) -> int:
    """Bit pattern of a double, for embedding operands in immediates."""
    return struct.unpack("<Q", struct.pack("<d", value))[0]


def bits_to_f64(bits: int) -> float:
    return struct.unpack("<d", struct.pack("<Q", bits & 0xFFFFFFFFFFFFFFFF))[0]
