"""Carry-less 32-bit range coder over 16-bit frequency tables.

Each symbol narrows ``[low, low + range)`` to the exact proportional
sub-interval ``[range*cum//total, range*(cum+freq)//total)``; the 48-bit
products avoid the precision loss of dividing the range first.

Renormalisation follows the Subbotin scheme: a byte is shifted out whenever
the top byte of ``low`` and ``low + range`` agree, and when the range
underflows without such agreement it is truncated so no carry can ever
propagate into bytes already written.

The final flush emits only as many bytes as are needed to pin a value inside
the last interval; the decoder reads zero bytes past the end of its input.
"""
from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from typing import Sequence

from .entropy import TABLE_TOTAL, CdfTable

TOP = 1 << 24
BOT = 1 << 16
MASK = 0xFFFFFFFF
ESCAPE_BITS = 16


class EncodingError(ValueError):
    pass


class DecodingError(ValueError):
    pass


@dataclass
class SymbolStream:
    """Values and, for each, the index of the table it is coded with."""

    values: list[int]
    table_ids: list[int]

    def __post_init__(self):
        if len(self.values) != len(self.table_ids):
            raise ValueError("values and table_ids differ in length")

    def __len__(self) -> int:
        return len(self.values)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK
        self.out = bytearray()

    def _normalize(self):
        low, rng = self.low, self.range
        while True:
            if (low ^ (low + rng)) < TOP:
                pass
            elif rng < BOT:
                rng = -low & (BOT - 1)
            else:
                break
            self.out.append(low >> 24)
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
        self.low, self.range = low, rng

    def encode(self, cum: int, freq: int, total: int = TABLE_TOTAL):
        rng = self.range
        lo = rng * cum // total
        self.low += lo
        self.range = rng * (cum + freq) // total - lo
        self._normalize()

    def finish(self) -> bytes:
        nbytes, v = _flush(self.low, self.range)
        for i in range(nbytes):
            self.out.append((v >> (24 - 8 * i)) & 0xFF)
        return bytes(self.out)


def _flush(low: int, rng: int) -> tuple[int, int]:
    """Fewest leading bytes of a value v with low <= v < low + rng (rest zero)."""
    if low == 0:
        return 0, 0
    high = low + rng - 1
    for nbytes in range(1, 4):
        unit = 1 << (32 - 8 * nbytes)
        v = -(-low // unit) * unit
        if v <= high:
            return nbytes, v
    return 4, low


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = MASK
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
        else:
            b = 0
            if self.pos >= len(self.data) + 4:
                raise DecodingError("read past end of payload: input truncated or corrupt")
        self.pos += 1
        return b

    def _normalize(self):
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass
            elif self.range < BOT:
                self.range = -self.low & (BOT - 1)
            else:
                break
            self.code = ((self.code << 8) | self._byte()) & MASK
            self.low = (self.low << 8) & MASK
            self.range = (self.range << 8) & MASK

    def target(self, total: int = TABLE_TOTAL) -> int:
        """Largest cumulative count c with floor(range * c / total) <= code - low."""
        self._total = total
        value = ((self.code - self.low + 1) * total - 1) // self.range
        if value >= total or value < 0:
            raise DecodingError("decoded value outside the frequency range: corrupt input")
        return value

    def consume(self, cum: int, freq: int):
        rng, total = self.range, self._total
        lo = rng * cum // total
        self.low += lo
        self.range = rng * (cum + freq) // total - lo
        self._normalize()


def _table_index(table: CdfTable, value: int) -> int | None:
    idx = value - table.offset
    if 0 <= idx < table.n_regular:
        return idx
    return None


def rc_encode(stream: SymbolStream, tables: Sequence[CdfTable]) -> bytes:
    enc = RangeEncoder()
    for value, tid in zip(stream.values, stream.table_ids):
        table = tables[tid]
        cdf = table.cdf
        total = int(cdf[-1])
        idx = _table_index(table, int(value))
        if idx is None:
            if not table.escape:
                raise EncodingError(f"value {value} outside alphabet of table {tid} and no escape")
            raw = int(value)
            if not -(1 << (ESCAPE_BITS - 1)) <= raw < (1 << (ESCAPE_BITS - 1)):
                raise EncodingError(f"escaped value {raw} does not fit in {ESCAPE_BITS} bits")
            esc = table.n_regular
            enc.encode(int(cdf[esc]), int(cdf[esc + 1] - cdf[esc]), total)
            enc.encode(raw & ((1 << ESCAPE_BITS) - 1), 1, 1 << ESCAPE_BITS)
        else:
            enc.encode(int(cdf[idx]), int(cdf[idx + 1] - cdf[idx]), total)
    return enc.finish()


def rc_decode(data: bytes, tables: Sequence[CdfTable], table_ids: Sequence[int]) -> list[int]:
    """Decode ``len(table_ids)`` values; the i-th uses ``tables[table_ids[i]]``."""
    if len(table_ids) == 0:
        return []
    dec = RangeDecoder(data)
    cdf_lists = {}
    out = []
    for tid in table_ids:
        table = tables[tid]
        cdf = cdf_lists.get(tid)
        if cdf is None:
            cdf = cdf_lists[tid] = [int(c) for c in table.cdf]
        total = cdf[-1]
        t = dec.target(total)
        idx = bisect_right(cdf, t) - 1
        dec.consume(cdf[idx], cdf[idx + 1] - cdf[idx])
        if table.escape and idx == table.n_regular:
            raw = dec.target(1 << ESCAPE_BITS)
            dec.consume(raw, 1)
            if raw >= 1 << (ESCAPE_BITS - 1):
                raw -= 1 << ESCAPE_BITS
            out.append(raw)
        else:
            out.append(idx + table.offset)
    # the decoder mirrors the encoder state, so it knows the exact payload length
    expected = dec.pos - 4 + _flush(dec.low, dec.range)[0]
    if expected != len(data):
        raise DecodingError(f"payload is {len(data)} bytes, symbol stream implies {expected}: "
                            "truncated or corrupt input")
    return out
