"""Binary arithmetic (range) coder over integer frequency tables.

32-bit state with carry/underflow propagation in the classic shift/underflow
formulation. Probabilities are supplied as cumulative integer frequency
tables whose total must not exceed 2**16 (16-bit precision), well under the
minimum working range of the coder. Bits are packed MSB-first within bytes.
"""

from __future__ import annotations

import numpy as np

STATE_BITS = 32
FULL_RANGE = 1 << STATE_BITS
STATE_MASK = FULL_RANGE - 1
HALF_RANGE = FULL_RANGE >> 1
QUARTER_RANGE = HALF_RANGE >> 1
MIN_RANGE = (FULL_RANGE >> 2) + 2
FREQ_BITS = 16
MAX_TOTAL = 1 << FREQ_BITS

_BIT_CUMUL = np.array([0, 1, 2], dtype=np.int64)


class BitWriter:
    """MSB-first bit packer."""

    def __init__(self):
        self._bytes = bytearray()
        self._acc = 0
        self._nbits = 0
        self.bit_length = 0

    def write_bit(self, bit: int) -> None:
        self._acc = (self._acc << 1) | (bit & 1)
        self._nbits += 1
        self.bit_length += 1
        if self._nbits == 8:
            self._bytes.append(self._acc)
            self._acc = 0
            self._nbits = 0

    def write_bits(self, value: int, count: int) -> None:
        for i in range(count - 1, -1, -1):
            self.write_bit((value >> i) & 1)

    def getvalue(self) -> bytes:
        out = bytearray(self._bytes)
        if self._nbits:
            out.append(self._acc << (8 - self._nbits))
        return bytes(out)


class BitReader:
    """MSB-first bit unpacker; reads past the end yield 0."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def read_bit(self) -> int:
        byte_idx = self._pos >> 3
        if byte_idx >= len(self._data):
            self._pos += 1
            return 0
        bit = (self._data[byte_idx] >> (7 - (self._pos & 7))) & 1
        self._pos += 1
        return bit

    def read_bits(self, count: int) -> int:
        value = 0
        for _ in range(count):
            value = (value << 1) | self.read_bit()
        return value


def _check_cumul(cumul) -> None:
    total = int(cumul[-1])
    if total <= 0 or total > MAX_TOTAL:
        raise ValueError(f"cumulative total {total} outside (0, {MAX_TOTAL}]")


class RangeEncoder:
    def __init__(self, writer: BitWriter | None = None):
        self.writer = writer if writer is not None else BitWriter()
        self._low = 0
        self._high = STATE_MASK
        self._underflow = 0
        self._finished = False

    def encode(self, cumul, symbol: int) -> None:
        """Encode ``symbol`` under the cumulative frequency table ``cumul``.

        ``cumul`` has length alphabet+1 with cumul[0] == 0; frequency of
        symbol s is cumul[s+1]-cumul[s] and must be positive.
        """
        _check_cumul(cumul)
        total = int(cumul[-1])
        sym_low = int(cumul[symbol])
        sym_high = int(cumul[symbol + 1])
        if sym_low == sym_high:
            raise ValueError(f"symbol {symbol} has zero frequency")
        span = self._high - self._low + 1
        self._high = self._low + sym_high * span // total - 1
        self._low = self._low + sym_low * span // total

        while ((self._low ^ self._high) & HALF_RANGE) == 0:
            bit = self._low >> (STATE_BITS - 1)
            self.writer.write_bit(bit)
            for _ in range(self._underflow):
                self.writer.write_bit(bit ^ 1)
            self._underflow = 0
            self._low = (self._low << 1) & STATE_MASK
            self._high = ((self._high << 1) & STATE_MASK) | 1

        while (self._low & ~self._high & QUARTER_RANGE) != 0:
            self._underflow += 1
            self._low = (self._low << 1) & (STATE_MASK >> 1)
            self._high = ((self._high << 1) & (STATE_MASK >> 1)) | HALF_RANGE | 1

    def encode_raw_bits(self, value: int, count: int) -> None:
        """Code ``count`` raw bits at probability 1/2 each."""
        for i in range(count - 1, -1, -1):
            self.encode(_BIT_CUMUL, (value >> i) & 1)

    def finish(self) -> None:
        if not self._finished:
            self.writer.write_bit(1)
            self._finished = True

    def getvalue(self) -> tuple[bytes, int]:
        self.finish()
        return self.writer.getvalue(), self.writer.bit_length


class RangeDecoder:
    def __init__(self, data: bytes):
        self.reader = BitReader(data)
        self._low = 0
        self._high = STATE_MASK
        self._code = self.reader.read_bits(STATE_BITS)

    def decode(self, cumul) -> int:
        _check_cumul(cumul)
        total = int(cumul[-1])
        span = self._high - self._low + 1
        offset = self._code - self._low
        value = ((offset + 1) * total - 1) // span
        symbol = int(np.searchsorted(cumul, value, side="right")) - 1

        sym_low = int(cumul[symbol])
        sym_high = int(cumul[symbol + 1])
        self._high = self._low + sym_high * span // total - 1
        self._low = self._low + sym_low * span // total

        while ((self._low ^ self._high) & HALF_RANGE) == 0:
            self._code = ((self._code << 1) & STATE_MASK) | self.reader.read_bit()
            self._low = (self._low << 1) & STATE_MASK
            self._high = ((self._high << 1) & STATE_MASK) | 1

        while (self._low & ~self._high & QUARTER_RANGE) != 0:
            self._code = (
                (self._code & HALF_RANGE)
                | ((self._code << 1) & (STATE_MASK >> 1))
                | self.reader.read_bit()
            )
            self._low = (self._low << 1) & (STATE_MASK >> 1)
            self._high = ((self._high << 1) & (STATE_MASK >> 1)) | HALF_RANGE | 1

        return symbol

    def decode_raw_bits(self, count: int) -> int:
        value = 0
        for _ in range(count):
            value = (value << 1) | self.decode(_BIT_CUMUL)
        return value


def quantize_probabilities(probs: np.ndarray) -> np.ndarray:
    """Integer frequencies summing to exactly 2**16, every entry >= 1.

    Largest-remainder rounding; deterministic. The implied per-bin
    probability floor is 2**-16.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise ValueError("probability table must be a non-empty vector")
    if not np.isfinite(probs).all() or (probs < 0).any():
        raise ValueError("probabilities must be finite and non-negative")
    if probs.size > MAX_TOTAL:
        raise ValueError("alphabet larger than the frequency precision")
    total = probs.sum()
    if total <= 0:
        raise ValueError("probability table sums to zero")
    scaled = probs * (MAX_TOTAL / total)
    freqs = np.maximum(np.floor(scaled).astype(np.int64), 1)
    excess = int(freqs.sum()) - MAX_TOTAL
    if excess > 0:
        # shave from the largest bins, never below 1
        order = np.argsort(-freqs, kind="stable")
        i = 0
        while excess > 0:
            j = order[i % freqs.size]
            take = min(excess, int(freqs[j]) - 1)
            if take > 0:
                freqs[j] -= take
                excess -= take
            i += 1
    elif excess < 0:
        remainders = scaled - np.floor(scaled)
        order = np.argsort(-remainders, kind="stable")
        for k in range(-excess):
            freqs[order[k % freqs.size]] += 1
        # any leftover beyond one pass
        short = MAX_TOTAL - int(freqs.sum())
        if short:
            freqs[order[0]] += short
    return freqs


def cumulative(freqs: np.ndarray) -> np.ndarray:
    out = np.zeros(len(freqs) + 1, dtype=np.int64)
    np.cumsum(freqs, out=out[1:])
    return out
