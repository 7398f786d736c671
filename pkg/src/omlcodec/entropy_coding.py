"""Lossless range coding of quantized latents under the factorized entropy model.

The coder is a byte-renormalizing range coder with a 48-bit range state and
16-bit integer frequencies. The encoder keeps `low` as an exact arbitrary
precision integer, so there is no carry handling; at flush it emits the
shortest byte string that pins a code point inside the final interval (at most
six trailing zero bytes are dropped, which bounds the zero padding a decoder
may legitimately consume).

Out-of-range symbols are coded as an escape slot followed by a raw 16-bit
signed literal.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .errors import TruncatedError

PRECISION = 16
TOTAL = 1 << PRECISION
STATE_BITS = 48
RENORM_THRESHOLD = 1 << (STATE_BITS - 8)
_RANGE_INIT = (1 << STATE_BITS) - 1
_INIT_BYTES = STATE_BITS // 8
_MAX_PADDING = _INIT_BYTES  # encoder never drops more trailing zero bytes
_LITERAL_BIAS = 1 << 15  # raw escape literals are int16


class RangeEncoder:
    """Single-use range encoder state machine."""

    def __init__(self):
        self.low = 0
        self.range = _RANGE_INIT
        self.nbits = STATE_BITS
        self._finished = False

    def encode(self, cum_lo: int, cum_hi: int, total: int = TOTAL) -> None:
        r = self.range // total
        self.low += r * cum_lo
        self.range = r * (cum_hi - cum_lo)
        while self.range < RENORM_THRESHOLD:
            self.range <<= 8
            self.low <<= 8
            self.nbits += 8

    def finish(self) -> bytes:
        if self._finished:
            raise RuntimeError("encoder already finished")
        self._finished = True
        hi = self.low + self.range - 1
        z = 0
        while (
            z + 8 <= self.nbits
            and z + 8 <= 8 * _MAX_PADDING
            and (hi >> (z + 8)) << (z + 8) >= self.low
        ):
            z += 8
        v = (hi >> z) << z
        nbytes = self.nbits // 8
        return v.to_bytes(nbytes, "big")[: nbytes - z // 8]


class RangeDecoder:
    """Single-use range decoder; mirrors RangeEncoder byte for byte."""

    def __init__(self, data: bytes):
        self._data = data
        self._limit = len(data) + _MAX_PADDING
        self._pos = 0
        self.range = _RANGE_INIT
        code = 0
        for _ in range(_INIT_BYTES):
            code = (code << 8) | self._next_byte()
        self.code = code

    def _next_byte(self) -> int:
        pos = self._pos
        if pos >= self._limit:
            raise TruncatedError("range-coded payload exhausted before all symbols were decoded")
        self._pos = pos + 1
        return self._data[pos] if pos < len(self._data) else 0

    def decode(self, cum: list[int], total: int = TOTAL) -> int:
        r = self.range // total
        dv = self.code // r
        if dv >= total:
            dv = total - 1
        slot = bisect_right(cum, dv) - 1
        self.code -= r * cum[slot]
        self.range = r * (cum[slot + 1] - cum[slot])
        while self.range < RENORM_THRESHOLD:
            self.range <<= 8
            self.code = (self.code << 8) | self._next_byte()
        return slot

    def decode_literal(self, total: int = TOTAL) -> int:
        r = self.range // total
        dv = self.code // r
        if dv >= total:
            dv = total - 1
        self.code -= r * dv
        self.range = r
        while self.range < RENORM_THRESHOLD:
            self.range <<= 8
            self.code = (self.code << 8) | self._next_byte()
        return dv


@dataclass
class CdfTable:
    """Integer cumulative frequencies for one latent channel.

    Slot i < n_symbols codes symbol ``symbol_min + i``; the final slot is the
    escape. ``cum`` has length n_slots + 1 with cum[0] = 0 and cum[-1] = 2^16.
    """

    symbol_min: int
    symbol_max: int
    cum: list[int]

    @property
    def n_symbols(self) -> int:
        return self.symbol_max - self.symbol_min + 1

    @property
    def escape_slot(self) -> int:
        return self.n_symbols

    def freq(self, slot: int) -> int:
        return self.cum[slot + 1] - self.cum[slot]


def quantize_pmf(p: np.ndarray, total: int = TOTAL) -> np.ndarray:
    """Largest-remainder quantization to integer frequencies, floor 1, exact total."""
    p = np.asarray(p, dtype=np.float64)
    scaled = p * total
    freqs = np.floor(scaled).astype(np.int64)
    rem = scaled - freqs
    freqs = np.maximum(freqs, 1)
    diff = total - int(freqs.sum())
    if diff > 0:
        order = np.lexsort((np.arange(len(p)), -rem))
        freqs[order[:diff]] += 1
    elif diff < 0:
        for _ in range(-diff):
            candidates = np.where(freqs > 1)[0]
            idx = candidates[np.argmax(freqs[candidates])]
            freqs[idx] -= 1
    return freqs


def _stable_sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _channel_pmf(scale: float, symbol_min: int, symbol_max: int) -> np.ndarray:
    v = np.arange(symbol_min, symbol_max + 1, dtype=np.float64)

    def cdf(t):
        return _stable_sigmoid(np.asarray(t, dtype=np.float64) / scale)

    pmf = cdf(v + 0.5) - cdf(v - 0.5)
    escape = cdf(np.array([symbol_min - 0.5]))[0] + (1.0 - cdf(np.array([symbol_max + 0.5]))[0])
    return np.concatenate([pmf, [escape]])


def build_cdf_table(em, symbol_min: int = -127, symbol_max: int = 127) -> list[CdfTable]:
    """One CdfTable per latent channel, rebuilt deterministically from the model."""
    if symbol_min >= symbol_max:
        raise ValueError("symbol_min must be < symbol_max")
    tables = []
    for scale in em.scales.detach().cpu().double().numpy():
        freqs = quantize_pmf(_channel_pmf(float(scale), symbol_min, symbol_max))
        cum = [0]
        acc = 0
        for f in freqs:
            acc += int(f)
            cum.append(acc)
        tables.append(CdfTable(symbol_min, symbol_max, cum))
    return tables


def _encode_into(enc: RangeEncoder, symbols, table: CdfTable) -> None:
    cum = table.cum
    smin, smax = table.symbol_min, table.symbol_max
    esc = table.escape_slot
    for v in symbols:
        if smin <= v <= smax:
            i = v - smin
            enc.encode(cum[i], cum[i + 1])
        else:
            if not -_LITERAL_BIAS <= v < _LITERAL_BIAS:
                raise ValueError(f"symbol {v} exceeds the 16-bit escape literal range")
            enc.encode(cum[esc], cum[esc + 1])
            u = v + _LITERAL_BIAS
            enc.encode(u, u + 1)


def _decode_from(dec: RangeDecoder, table: CdfTable, count: int) -> list[int]:
    cum = table.cum
    smin = table.symbol_min
    esc = table.escape_slot
    out = []
    for _ in range(count):
        slot = dec.decode(cum)
        if slot == esc:
            out.append(dec.decode_literal() - _LITERAL_BIAS)
        else:
            out.append(smin + slot)
    return out


def range_encode(symbols, table: CdfTable) -> bytes:
    """Encode an int sequence under one table; inverse of range_decode."""
    enc = RangeEncoder()
    _encode_into(enc, [int(v) for v in symbols], table)
    return enc.finish()


def range_decode(payload: bytes, table: CdfTable, count: int) -> list[int]:
    """Decode exactly `count` symbols from a payload produced by range_encode."""
    dec = RangeDecoder(payload)
    return _decode_from(dec, table, count)


def encode_channels(z: np.ndarray, tables: list[CdfTable]) -> bytes:
    """Encode a (C, h, w) integer latent into a single payload, one table per channel."""
    if z.ndim != 3 or z.shape[0] != len(tables):
        raise ValueError(f"latent shape {z.shape} does not match {len(tables)} tables")
    enc = RangeEncoder()
    for c in range(z.shape[0]):
        _encode_into(enc, z[c].ravel().tolist(), tables[c])
    return enc.finish()


def decode_channels(payload: bytes, tables: list[CdfTable], shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = shape
    if c != len(tables):
        raise ValueError(f"latent shape {shape} does not match {len(tables)} tables")
    dec = RangeDecoder(payload)
    out = np.empty(shape, dtype=np.int64)
    for ci in range(c):
        out[ci] = np.array(_decode_from(dec, tables[ci], h * w), dtype=np.int64).reshape(h, w)
    return out


def measured_bits(payload: bytes) -> int:
    return 8 * len(payload)


def table_rate_bits(symbols, table: CdfTable) -> float:
    """Information content under the quantized table (escapes cost 16 raw bits extra)."""
    bits = 0.0
    esc_freq = table.freq(table.escape_slot)
    for v in symbols:
        v = int(v)
        if table.symbol_min <= v <= table.symbol_max:
            bits += -math.log2(table.freq(v - table.symbol_min) / TOTAL)
        else:
            bits += -math.log2(esc_freq / TOTAL) + 16.0
    return bits
