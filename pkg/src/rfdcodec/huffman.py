"""Canonical Huffman coder for reference-index streams.

The frequency table is static per model release (Laplace +1 smoothed
training counts) and is never transmitted; encoder and decoder construct
the identical canonical code from it. A single-symbol alphabet is coded at
one bit per symbol by convention so the code stays complete.
"""

from __future__ import annotations

import heapq

from .coder import BitReader, BitWriter


def code_lengths_from_counts(counts) -> list[int]:
    """Huffman code lengths via the standard pairing heap.

    ``counts`` must be positive for every symbol (apply Laplace smoothing
    first). Ties break on first-created order, which makes the lengths
    deterministic.
    """
    counts = [int(c) for c in counts]
    if len(counts) == 0:
        raise ValueError("empty alphabet")
    if any(c <= 0 for c in counts):
        raise ValueError("all symbol counts must be positive")
    if len(counts) == 1:
        return [1]

    heap = [(c, i, (i,)) for i, c in enumerate(counts)]
    heapq.heapify(heap)
    tick = len(counts)
    lengths = [0] * len(counts)
    while len(heap) > 1:
        c1, _, s1 = heapq.heappop(heap)
        c2, _, s2 = heapq.heappop(heap)
        for s in s1 + s2:
            lengths[s] += 1
        heapq.heappush(heap, (c1 + c2, tick, s1 + s2))
        tick += 1
    return lengths


class CanonicalHuffman:
    """Complete canonical prefix code over symbols 0..K-1."""

    def __init__(self, lengths):
        self.lengths = [int(l) for l in lengths]
        if any(l <= 0 for l in self.lengths):
            raise ValueError("code lengths must be positive")
        order = sorted(range(len(self.lengths)), key=lambda s: (self.lengths[s], s))
        self.codes = [0] * len(self.lengths)
        code = 0
        prev_len = self.lengths[order[0]]
        for rank, sym in enumerate(order):
            if rank:
                code = (code + 1) << (self.lengths[sym] - prev_len)
            self.codes[sym] = code
            prev_len = self.lengths[sym]
        # decode table: (length, first_code, symbols in canonical order)
        self._order = order

    @classmethod
    def from_counts(cls, counts, laplace: bool = True) -> "CanonicalHuffman":
        counts = [int(c) for c in counts]
        if laplace:
            counts = [c + 1 for c in counts]
        return cls(code_lengths_from_counts(counts))

    @property
    def num_symbols(self) -> int:
        return len(self.lengths)

    def kraft_sum_num_den(self) -> tuple[int, int]:
        """Kraft sum as an exact fraction (num, den); complete codes give 1."""
        l_max = max(self.lengths)
        num = sum(1 << (l_max - l) for l in self.lengths)
        return num, 1 << l_max

    def encode(self, indices) -> tuple[bytes, int]:
        writer = BitWriter()
        k = self.num_symbols
        for idx in indices:
            idx = int(idx)
            if not 0 <= idx < k:
                raise ValueError(f"index {idx} outside alphabet of size {k}")
            writer.write_bits(self.codes[idx], self.lengths[idx])
        return writer.getvalue(), writer.bit_length

    def decode(self, data: bytes, count: int) -> list[int]:
        reader = BitReader(data)
        by_length: dict[int, dict[int, int]] = {}
        for sym in self._order:
            by_length.setdefault(self.lengths[sym], {})[self.codes[sym]] = sym
        max_len = max(self.lengths)
        out = []
        for _ in range(count):
            code = 0
            length = 0
            while True:
                code = (code << 1) | reader.read_bit()
                length += 1
                table = by_length.get(length)
                if table is not None and code in table:
                    out.append(table[code])
                    break
                if length > max_len:
                    raise ValueError("invalid Huffman stream")
        return out

    def encoded_length_bits(self, indices) -> int:
        return sum(self.lengths[int(i)] for i in indices)
