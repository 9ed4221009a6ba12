"""Stochastic fixed-point quantizer with a run-length + Elias-omega bitstream.

Wire format (bits MSB-first within each byte)::

    header  n     uint32 little-endian
            norm  IEEE-754 binary32 little-endian
            q     uint8
    body    for each nonzero level, in index order:
                omega(gap + 1)   gap = zero levels since the previous nonzero
                sign bit         1 = negative
                omega(level)     level in [1, 2**q]
            omega(trailing_zeros + 1)   only if the vector ends in zeros
    padding 0 bits up to the byte boundary

Levels index the ``2**q + 1`` endpoints ``{0, 1/s, ..., 1}`` of ``s = 2**q``
equal intervals of ``[0, 1]``; a value decodes to ``sign * norm * level / s``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

HEADER = struct.Struct("<IfB")
HEADER_BITS = HEADER.size * 8
MAX_Q = 32
_F32_MAX = float(np.finfo(np.float32).max)


class DecodeError(ValueError):
    """Malformed bitstream; ``bit_offset`` is measured from the start of the payload."""

    def __init__(self, message: str, bit_offset: int):
        super().__init__(f"{message} (at bit {bit_offset})")
        self.bit_offset = bit_offset


class PrecisionClass(enum.Enum):
    INT8 = 8
    FLOAT16 = 16
    FLOAT32 = 32


def precision_class(q: int) -> PrecisionClass:
    """Deployment container for a ``q``-bit model: round ``q`` up to 8, 16 or 32."""
    _check_q(q)
    if q <= 8:
        return PrecisionClass.INT8
    if q <= 16:
        return PrecisionClass.FLOAT16
    return PrecisionClass.FLOAT32


def round_to_precision(values: np.ndarray, cls: PrecisionClass) -> np.ndarray:
    """Store dequantized values in the container ``cls``.

    INT8 keeps the values as they are: they already sit on the quantizer's
    integer grid (at most 2**8 magnitudes times a shared scale).  The float
    containers round to their storage type.
    """
    values = np.asarray(values, dtype=np.float64)
    if cls is PrecisionClass.FLOAT16:
        return values.astype(np.float16).astype(np.float64)
    if cls is PrecisionClass.FLOAT32:
        return values.astype(np.float32).astype(np.float64)
    return values.copy()


def _check_q(q: int) -> None:
    if not 1 <= q <= MAX_Q:
        raise ValueError(f"q must be in [1, {MAX_Q}], got {q}")


@lru_cache(maxsize=1 << 16)
def elias_omega(n: int) -> str:
    """Elias-omega code of a positive integer as a string of '0'/'1'."""
    if n < 1:
        raise ValueError(f"Elias-omega is defined on positive integers, got {n}")
    code = "0"
    while n > 1:
        b = format(n, "b")
        code = b + code
        n = len(b) - 1
    return code


def elias_omega_decode(bits: str, pos: int, base: int = 0) -> tuple[int, int]:
    """Read one code starting at ``pos``; return ``(value, next_pos)``.

    ``base`` is added to offsets reported in errors.
    """
    n = 1
    start = pos
    while True:
        if pos >= len(bits):
            raise DecodeError("truncated Elias-omega code", base + start)
        if bits[pos] == "0":
            return n, pos + 1
        if n > 64:
            raise DecodeError("Elias-omega code exceeds 64-bit range", base + start)
        end = pos + n + 1
        if end > len(bits):
            raise DecodeError("truncated Elias-omega code", base + start)
        n = int(bits[pos:end], 2)
        pos = end


@dataclass(frozen=True, eq=False)
class QuantizedPayload:
    n: int
    norm: float
    q: int
    bitstream: bytes = field(repr=False)
    encoded_bits: int


def _norm32(theta: np.ndarray) -> float:
    """Euclidean norm rounded *up* to binary32, so every |x|/norm stays <= 1."""
    norm = float(np.linalg.norm(theta))
    if norm > _F32_MAX:
        raise FloatingPointError("vector norm does not fit in binary32")
    n32 = np.float32(norm)
    if float(n32) < norm:
        n32 = np.nextafter(n32, np.float32(np.inf))
    return float(n32)


def stochastic_levels(magnitudes: np.ndarray, q: int, uniforms: np.ndarray) -> np.ndarray:
    """Round ``magnitudes`` in [0, 1] to a neighbouring level of ``2**q``.

    Rounds up with probability equal to the distance from the lower endpoint,
    which keeps ``E[level / 2**q] == magnitude``.  ``uniforms`` broadcasts
    against ``magnitudes`` so many draws can be made at once.
    """
    scaled = np.asarray(magnitudes, dtype=np.float64) * float(2**q)
    lower = np.floor(scaled)
    return (lower + (uniforms < scaled - lower)).astype(np.int64)


def _levels_and_signs(theta, q: int, rng: np.random.Generator):
    _check_q(q)
    theta = np.asarray(theta, dtype=np.float64).ravel()
    if not np.all(np.isfinite(theta)):
        raise FloatingPointError("cannot quantize non-finite values")
    norm = _norm32(theta)
    if norm == 0.0:
        return theta, 0.0, np.zeros(theta.size, np.int64), np.zeros(theta.size, np.uint8)
    mags = np.minimum(np.abs(theta) / norm, 1.0)
    levels = stochastic_levels(mags, q, rng.random(theta.size))
    if not levels.any():
        norm = 0.0
    signs = ((theta < 0) & (levels > 0)).astype(np.uint8)
    return theta, norm, levels, signs


def quantize(theta, q: int, rng: np.random.Generator) -> QuantizedPayload:
    """Quantize ``theta`` to ``q`` bits and encode it; draw ``i`` of ``rng`` rounds coordinate ``i``."""
    theta, norm, levels, signs = _levels_and_signs(theta, q, rng)
    data, nbits = _encode(levels, signs, norm, q)
    return QuantizedPayload(theta.size, norm, q, data, nbits)


def dequantize_levels(levels, signs, norm: float, q: int) -> np.ndarray:
    levels = np.asarray(levels, dtype=np.float64)
    values = norm * levels / float(2**q)
    return np.where(np.asarray(signs) == 1, -values, values)


def quantize_dequantize(theta, q: int, rng: np.random.Generator) -> np.ndarray:
    """Same result as ``dequantize(quantize(theta, q, rng))`` without building the bitstream."""
    _, norm, levels, signs = _levels_and_signs(theta, q, rng)
    return dequantize_levels(levels, signs, norm, q)


def dequantize(payload: QuantizedPayload) -> np.ndarray:
    levels, signs, norm, q, n = decode_bitstream(payload.bitstream)
    if n != payload.n or q != payload.q:
        raise DecodeError("header disagrees with payload metadata", 0)
    return dequantize_levels(levels, signs, norm, q)


def payload_bits(payload: QuantizedPayload) -> int:
    """Exact encoded size in bits, header included, padding excluded."""
    return payload.encoded_bits


def encode_bitstream(levels, signs, norm: float, q: int) -> bytes:
    return _encode(levels, signs, norm, q)[0]


def _encode(levels, signs, norm: float, q: int) -> tuple[bytes, int]:
    _check_q(q)
    levels = np.asarray(levels, dtype=np.int64).ravel()
    signs = np.asarray(signs).ravel()
    n = levels.size
    if signs.size != n:
        raise ValueError("levels and signs differ in length")
    top = 2**q
    if n and (levels.min() < 0 or levels.max() > top):
        raise ValueError(f"level out of range [0, {top}]")
    if n >= 2**32:
        raise ValueError("vector too long for a 32-bit element count")
    nonzero = np.flatnonzero(levels)
    norm32 = np.float32(norm)
    if not np.isfinite(norm32) or norm32 < 0:
        raise ValueError("norm must be a finite non-negative binary32 value")
    if (norm32 == 0) != (nonzero.size == 0):
        raise ValueError("norm is zero exactly when every level is zero")

    omega = elias_omega
    parts = []
    prev = -1
    for idx, lev, sgn in zip(
        nonzero.tolist(), levels[nonzero].tolist(), signs[nonzero].tolist()
    ):
        parts.append(omega(idx - prev))
        parts.append("1" if sgn else "0")
        parts.append(omega(lev))
        prev = idx
    if prev < n - 1:
        parts.append(omega(n - prev))
    body = "".join(parts)
    nbits = HEADER_BITS + len(body)
    pad = -len(body) % 8
    body_bytes = int(body + "0" * pad, 2).to_bytes((len(body) + pad) // 8, "big") if body else b""
    return HEADER.pack(n, norm32, q) + body_bytes, nbits


def decode_bitstream(data: bytes):
    """Inverse of :func:`encode_bitstream`: ``(levels, signs, norm, q, n)``."""
    if len(data) < HEADER.size:
        raise DecodeError("truncated header", len(data) * 8)
    n, norm, q = HEADER.unpack_from(data)
    if not 1 <= q <= MAX_Q:
        raise DecodeError(f"q={q} out of range", 64)
    norm = float(norm)
    if not np.isfinite(norm) or norm < 0:
        raise DecodeError("invalid norm", 32)
    body = data[HEADER.size :]
    bits = format(int.from_bytes(body, "big"), "b").zfill(len(body) * 8) if body else ""
    base = HEADER_BITS
    top = 2**q
    levels = np.zeros(n, np.int64)
    signs = np.zeros(n, np.uint8)
    idx, pos = 0, 0
    nonzeros = 0
    while idx < n:
        at = pos
        step, pos = elias_omega_decode(bits, pos, base)
        idx += step - 1
        if idx == n:
            break
        if idx > n:
            raise DecodeError("run length overruns element count", base + at)
        if pos >= len(bits):
            raise DecodeError("missing sign bit", base + pos)
        signs[idx] = bits[pos] == "1"
        at = pos + 1
        level, pos = elias_omega_decode(bits, pos + 1, base)
        if level > top:
            raise DecodeError(f"level {level} exceeds 2**{q}", base + at)
        levels[idx] = level
        nonzeros += 1
        idx += 1
    rest = bits[pos:]
    if len(rest) >= 8 or "1" in rest:
        raise DecodeError("trailing data after payload", base + pos)
    if (norm == 0.0) != (nonzeros == 0):
        raise DecodeError("norm inconsistent with level count", 32)
    return levels, signs, norm, q, n
