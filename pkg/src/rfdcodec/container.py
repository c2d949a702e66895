"""Container format and exact bit accounting.

Layout (little-endian): header (magic, version, dims, padding, lambda,
ablation flags), priors block (ambient floats + 8-bit transmission grid at
the scale-4 resolution), a Huffman stream of reference indices, the range-
coded hyper stream, latent stream, per-scale dependency-map streams, and a
CRC32 trailer.

Every byte of the file is charged to exactly one of the three reported
terms: latent and hyper payload to bits_z, the index payload to
bits_index, and everything else (header, priors, dependency maps, length
fields, checksum) to bits_W. The three terms therefore sum to the file
length in bits exactly.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .entropy import GmmParams, arith_decode, arith_encode
from .errors import ContainerCorruptionError, ContainerVersionError
from .huffman import CanonicalHuffman
from .rfd import SymbolPack

MAGIC = b"RFDC"
VERSION = 1

LAMBDA_LADDER = (32, 64, 128, 256, 512)


@dataclass
class BitBreakdown:
    bits_z: int
    bits_w: int
    bits_index: int
    height: int
    width: int

    @property
    def total_bits(self) -> int:
        return self.bits_z + self.bits_w + self.bits_index

    def bpp(self) -> float:
        return compute_bpp(self.bits_z, self.bits_w, self.bits_index, self.height, self.width)

    def as_dict(self) -> dict:
        return {
            "bits_z": self.bits_z,
            "bits_W": self.bits_w,
            "bits_index": self.bits_index,
            "bpp": self.bpp(),
            "dims": [self.height, self.width],
        }


def compute_bpp(bits_z: int, bits_w: int, bits_index: int, height: int, width: int) -> float:
    if height <= 0 or width <= 0:
        raise ValueError("image area must be positive")
    return (bits_z + bits_w + bits_index) / float(height * width)


def _index_tables(model, dictionary) -> dict:
    tables = {}
    for s in model.cfg.scales:
        k = dictionary.entries[s].shape[0]
        counts = model.index_counts.get(s)
        if counts is None or len(counts) != k:
            counts = np.zeros(k, dtype=np.int64)
        tables[s] = CanonicalHuffman.from_counts(counts, laplace=True)
    return tables


def _channel_params(side_params: list, spatial: int) -> GmmParams:
    mu = np.concatenate([np.full(spatial, float(p.means[0, 0])) for p in side_params])
    sg = np.concatenate([np.full(spatial, float(p.scales[0, 0])) for p in side_params])
    return GmmParams(
        weights=np.ones((mu.size, 1)), means=mu[:, None], scales=sg[:, None]
    )


def pack(model, dictionary, symbols: SymbolPack, lam: float = 0.0) -> bytes:
    """Serialize a symbol pack to container bytes."""
    cfg = model.cfg
    scales_mask = sum(1 << s for s in symbols.scales)
    flags = (1 if cfg.usnb else 0) | ((1 if cfg.rfvm else 0) << 1)
    t4 = symbols.t4_codes
    header = bytearray()
    header += MAGIC
    header += struct.pack("<B", VERSION)
    header += struct.pack("<II", symbols.height, symbols.width)
    header += struct.pack("<4H", *symbols.pad)
    header += struct.pack("<f", lam)
    header += struct.pack("<BBB", scales_mask, flags, cfg.w_bits)
    header += symbols.a_vec.astype("<f4").tobytes()
    header += struct.pack("<HH", t4.shape[1], t4.shape[2])
    header += t4.astype(np.uint8).tobytes()
    header += struct.pack("<HH", symbols.z.shape[1], symbols.z.shape[2])
    header += struct.pack("<HH", symbols.hz.shape[1], symbols.hz.shape[2])

    tables = _index_tables(model, dictionary)
    from .coder import BitWriter

    writer = BitWriter()
    for s in symbols.scales:
        code_bytes, _ = tables[s].encode([symbols.indices[s]])
        # streams are concatenated bit-exactly, then byte-padded once
        for byte in code_bytes[:-1]:
            writer.write_bits(byte, 8)
        rem = tables[s].lengths[symbols.indices[s]] % 8 or 8
        if len(code_bytes) == 1:
            rem = tables[s].lengths[symbols.indices[s]]
        writer.write_bits(code_bytes[-1] >> (8 - rem), rem)
    index_stream = writer.getvalue()

    hz_params = _channel_params(
        model.hyper_side_params(), symbols.hz.shape[1] * symbols.hz.shape[2]
    )
    hz_stream, _ = arith_encode(symbols.hz.reshape(-1), hz_params)

    z_params = model.z_mixture_params(symbols.hz, symbols.z.shape[1:])
    z_stream, _ = arith_encode(symbols.z.reshape(-1), z_params)

    w_streams = []
    for s in symbols.scales:
        if not cfg.rfvm:
            continue
        codes = symbols.w_codes[s]
        params = _channel_params(model.w_side_params(s), codes.shape[1] * codes.shape[2])
        stream, _ = arith_encode(
            codes.reshape(-1), params, support=(0, 2 ** cfg.w_bits - 1)
        )
        w_streams.append(stream)

    body = bytearray(header)
    body += struct.pack("<I", len(index_stream))
    body += index_stream
    body += struct.pack("<I", len(hz_stream))
    body += hz_stream
    body += struct.pack("<I", len(z_stream))
    body += z_stream
    body += struct.pack("<B", len(w_streams))
    for stream in w_streams:
        body += struct.pack("<I", len(stream))
        body += stream
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    return bytes(body)


def _parse_layout(data: bytes) -> dict:
    """Parse structure without entropy decoding; validates magic, version,
    checksum."""
    if len(data) < 5 or data[:4] != MAGIC:
        raise ContainerCorruptionError("bad container magic")
    if data[4] != VERSION:
        raise ContainerVersionError(f"unknown container version {data[4]}")
    if len(data) < 9:
        raise ContainerCorruptionError("truncated container")
    (crc_stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc_stored:
        raise ContainerCorruptionError("container checksum mismatch")

    out: dict = {}
    pos = 5
    out["height"], out["width"] = struct.unpack_from("<II", data, pos)
    pos += 8
    out["pad"] = struct.unpack_from("<4H", data, pos)
    pos += 8
    (out["lambda"],) = struct.unpack_from("<f", data, pos)
    pos += 4
    scales_mask, flags, w_bits = struct.unpack_from("<BBB", data, pos)
    pos += 3
    out["scales"] = tuple(s for s in (2, 3, 4) if scales_mask & (1 << s))
    out["usnb"] = bool(flags & 1)
    out["rfvm"] = bool(flags & 2)
    out["w_bits"] = w_bits
    out["a_vec"] = np.frombuffer(data, dtype="<f4", count=3, offset=pos).copy()
    pos += 12
    h4, w4 = struct.unpack_from("<HH", data, pos)
    pos += 4
    n_t4 = 3 * h4 * w4
    out["t4_codes"] = (
        np.frombuffer(data, dtype=np.uint8, count=n_t4, offset=pos)
        .reshape(3, h4, w4)
        .copy()
    )
    pos += n_t4
    out["z_hw"] = struct.unpack_from("<HH", data, pos)
    pos += 4
    out["hz_hw"] = struct.unpack_from("<HH", data, pos)
    pos += 4

    try:
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        out["index_stream"] = data[pos : pos + n]
        pos += n
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        out["hz_stream"] = data[pos : pos + n]
        pos += n
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        out["z_stream"] = data[pos : pos + n]
        pos += n
        (n_w,) = struct.unpack_from("<B", data, pos)
        pos += 1
        out["w_streams"] = []
        for _ in range(n_w):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            out["w_streams"].append(data[pos : pos + n])
            pos += n
    except struct.error as exc:
        raise ContainerCorruptionError(f"truncated container: {exc}") from exc
    if pos + 4 != len(data):
        raise ContainerCorruptionError("container has trailing or missing bytes")

    out["bits_index"] = 8 * len(out["index_stream"])
    out["bits_z"] = 8 * (len(out["hz_stream"]) + len(out["z_stream"]))
    out["bits_w"] = 8 * len(data) - out["bits_index"] - out["bits_z"]
    return out


def inspect(data: bytes) -> BitBreakdown:
    """Bit breakdown without entropy decode; the three terms sum to the
    file size in bits."""
    layout = _parse_layout(data)
    return BitBreakdown(
        bits_z=layout["bits_z"],
        bits_w=layout["bits_w"],
        bits_index=layout["bits_index"],
        height=layout["height"],
        width=layout["width"],
    )


def unpack(data: bytes, model, dictionary) -> tuple[SymbolPack, BitBreakdown]:
    layout = _parse_layout(data)
    cfg = model.cfg
    if layout["scales"] != cfg.scales or layout["rfvm"] != cfg.rfvm or layout["usnb"] != cfg.usnb:
        raise ValueError(
            "container ablation settings do not match the decoding model"
        )

    from .coder import BitReader

    tables = _index_tables(model, dictionary)
    reader = BitReader(layout["index_stream"])
    indices = {}
    for s in layout["scales"]:
        table = tables[s]
        code, length = 0, 0
        lookup = {(table.lengths[sym], table.codes[sym]): sym for sym in range(table.num_symbols)}
        while True:
            code = (code << 1) | reader.read_bit()
            length += 1
            if (length, code) in lookup:
                indices[s] = lookup[(length, code)]
                break
            if length > max(table.lengths):
                raise ContainerCorruptionError("invalid index stream")

    hz_h, hz_w = layout["hz_hw"]
    hz_params = _channel_params(model.hyper_side_params(), hz_h * hz_w)
    hz = arith_decode(layout["hz_stream"], hz_params, cfg.hyper_width * hz_h * hz_w)
    hz = hz.reshape(cfg.hyper_width, hz_h, hz_w)

    z_h, z_w = layout["z_hw"]
    z_params = model.z_mixture_params(hz, (z_h, z_w))
    z = arith_decode(layout["z_stream"], z_params, cfg.bottleneck * z_h * z_w)
    z = z.reshape(cfg.bottleneck, z_h, z_w)

    w_codes = {}
    if cfg.rfvm:
        for s, stream in zip(layout["scales"], layout["w_streams"]):
            hs = z_h * 2 ** (4 - s)
            ws = z_w * 2 ** (4 - s)
            params = _channel_params(model.w_side_params(s), hs * ws)
            codes = arith_decode(
                stream, params, cfg.w_groups * hs * ws, support=(0, 2 ** cfg.w_bits - 1)
            )
            w_codes[s] = codes.reshape(cfg.w_groups, hs, ws)

    pack_out = SymbolPack(
        height=layout["height"],
        width=layout["width"],
        pad=tuple(layout["pad"]),
        scales=layout["scales"],
        a_vec=layout["a_vec"],
        t4_codes=layout["t4_codes"],
        indices=indices,
        w_codes=w_codes,
        z=z,
        hz=hz,
    )
    breakdown = BitBreakdown(
        bits_z=layout["bits_z"],
        bits_w=layout["bits_w"],
        bits_index=layout["bits_index"],
        height=layout["height"],
        width=layout["width"],
    )
    return pack_out, breakdown
