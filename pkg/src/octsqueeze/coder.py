"""Byte-oriented range coder with 16-bit frequency tables.

State is a 64-bit ``low``/``range`` pair. Output bytes leave from the top of
``low``; a pending byte plus a run of 0xFF bytes is held back until it is known
whether a carry will ripple into them (the scheme LZMA uses, widened to 64
bits). The first byte of such a stream is always zero and is not stored.

At the end the encoder picks the value in ``[low, low + range)`` with the most
trailing zero bytes and drops those zeros; the decoder reads missing tail
bytes as zero, up to the 8 bytes the flush can remove.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import CorruptStreamError

PROB_BITS = 16
TOTAL = 1 << PROB_BITS
NSYM = 256
STATE_BITS = 64
TOP = 1 << (STATE_BITS - 8)
MASK = (1 << STATE_BITS) - 1
STATE_BYTES = STATE_BITS // 8
SHIFT = STATE_BITS - 8


def quantize_probs(p: np.ndarray) -> np.ndarray:
    """Cumulative frequency tables, shape ``(..., 257)``, total 2^16.

    Each symbol gets ``1 + floor(p * (2^16 - 256))``; the rounding deficit goes
    to the most probable symbol (lowest index on ties).
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    f = 1 + np.floor(p * (TOTAL - NSYM)).astype(np.int64)
    deficit = TOTAL - f.sum(axis=1)
    f[np.arange(len(f)), np.argmax(p, axis=1)] += deficit
    cum = np.zeros((len(f), NSYM + 1), dtype=np.int64)
    np.cumsum(f, axis=1, out=cum[:, 1:])
    return cum[0] if single else cum


def table_bits(cum: np.ndarray, symbols: np.ndarray) -> float:
    """Ideal code length ``sum(-log2(f / 2^16))`` of ``symbols`` under ``cum`` rows."""
    cum = np.atleast_2d(cum)
    s = np.asarray(symbols, dtype=np.int64)
    rows = np.arange(len(s))
    f = cum[rows, s + 1] - cum[rows, s]
    return float(np.sum(PROB_BITS - np.log2(f)))


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self.count = 0

    def _shift_low(self):
        low = self.low
        if low < (0xFF << SHIFT) or low > MASK:
            carry = low >> STATE_BITS
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (low >> SHIFT) & 0xFF
        self.cache_size += 1
        self.low = (low & (TOP - 1)) << 8

    def encode(self, cum_low: int, freq: int) -> None:
        r = self.range >> PROB_BITS
        self.low += r * cum_low
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()
        self.count += 1

    def encode_symbol(self, cum: Sequence[int], symbol: int) -> None:
        lo = int(cum[symbol])
        self.encode(lo, int(cum[symbol + 1]) - lo)

    def encode_rows(self, cum: np.ndarray, symbols) -> None:
        """Encode ``symbols[i]`` under table row ``cum[i]`` for every row."""
        s = np.asarray(symbols, dtype=np.int64)
        rows = np.arange(len(s))
        lo = cum[rows, s]
        freq = cum[rows, s + 1] - lo
        for a, f in zip(lo.tolist(), freq.tolist()):
            self.encode(a, f)

    def finish(self) -> bytes:
        low, high = self.low, self.low + self.range
        # value in [low, high) with the most trailing zero bits among the state bytes
        for nbytes in range(STATE_BYTES + 1):
            unit = 1 << (STATE_BITS - 8 * nbytes)
            v = -(-low // unit) * unit
            if v < high:
                break
        self.low = v
        for _ in range(STATE_BYTES + 1):
            self._shift_low()
        out = self.out
        if out[0] != 0:
            raise AssertionError("range coder lead byte must be zero")
        body = bytes(out[1:])
        tail = len(body)
        floor = max(0, tail - STATE_BYTES)
        while tail > floor and body[tail - 1] == 0:
            tail -= 1
        return body[:tail]


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0
        self.padded = 0
        self.range = MASK
        self.code = 0
        for _ in range(STATE_BYTES):
            self.code = (self.code << 8) | self._byte()
        self.count = 0

    def _byte(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
            self.pos += 1
            return b
        self.padded += 1
        if self.padded > STATE_BYTES:
            raise CorruptStreamError(f"range coder payload exhausted after {len(self.data)} bytes")
        return 0

    def decode_symbol(self, cum: Sequence[int]) -> int:
        r = self.range >> PROB_BITS
        value = self.code // r
        if value >= TOTAL:
            raise CorruptStreamError(f"range decoder out of interval at symbol {self.count}")
        s = bisect.bisect_right(cum, value) - 1
        lo = int(cum[s])
        self.code -= r * lo
        self.range = r * (int(cum[s + 1]) - lo)
        while self.range < TOP:
            self.range <<= 8
            self.code = (self.code << 8) | self._byte()
        self.count += 1
        return s

    def decode_rows(self, cum: np.ndarray) -> np.ndarray:
        """Decode one symbol per table row of ``cum``."""
        out = np.empty(len(cum), dtype=np.int64)
        search = np.searchsorted
        for i, row in enumerate(cum):
            r = self.range >> PROB_BITS
            value = self.code // r
            if value >= TOTAL:
                raise CorruptStreamError(f"range decoder out of interval at symbol {self.count}")
            s = int(search(row, value, side="right")) - 1
            lo = int(row[s])
            self.code -= r * lo
            self.range = r * (int(row[s + 1]) - lo)
            while self.range < TOP:
                self.range <<= 8
                self.code = (self.code << 8) | self._byte()
            self.count += 1
            out[i] = s
        return out

    def check_end(self) -> None:
        """Raise unless every payload byte was consumed."""
        if self.pos != len(self.data):
            raise CorruptStreamError(f"{len(self.data) - self.pos} unused payload bytes")


@dataclass
class CodedStream:
    data: bytes
    symbol_count: int

    def measure_bits(self) -> int:
        return 8 * len(self.data)


def measure_bits(stream: CodedStream) -> int:
    return stream.measure_bits()


TableSupplier = Callable[[int, list], Sequence[int]]


def _tables_fn(tables):
    if callable(tables):
        return tables
    rows = tables

    def fn(i, _decoded):
        return rows[i]

    return fn


def encode(symbols: Iterable[int], tables) -> CodedStream:
    """Encode ``symbols``; ``tables`` is a sequence of cumulative tables or a
    callable ``(i, previous_symbols) -> table``."""
    fn = _tables_fn(tables)
    enc = RangeEncoder()
    done: list[int] = []
    for i, s in enumerate(symbols):
        s = int(s)
        cum = fn(i, done)
        enc.encode_symbol(cum, s)
        done.append(s)
    return CodedStream(enc.finish(), len(done))


def decode(stream: CodedStream | bytes, tables, count: int | None = None) -> list[int]:
    if isinstance(stream, CodedStream):
        data, count = stream.data, stream.symbol_count if count is None else count
    else:
        data = stream
    if count is None:
        raise ValueError("symbol count required")
    fn = _tables_fn(tables)
    dec = RangeDecoder(data)
    out: list[int] = []
    for i in range(count):
        out.append(dec.decode_symbol(fn(i, out)))
    dec.check_end()
    return out
