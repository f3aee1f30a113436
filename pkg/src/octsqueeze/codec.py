"""Cloud <-> container bytes: quantize, octree, per-level probabilities, range coding.

Container layout (little endian)::

    "OCSQ" | version u8 | mode u8 | depth u8 | model kind u8 | model hash u32
    | origin 3 x f64 | cell f64 | point count u32 | symbol count u32
    | payload length u64 | payload | leaf bit count u32 | leaf bits (byte padded)
    | crc32 u32 over everything before it

Model kinds: 0 uniform, 1 adaptive histogram, 2 adaptive parent-conditioned
histogram, 3 deep model (hash = checkpoint checksum; 0 for the others).
"""
from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coder import RangeDecoder, RangeEncoder, quantize_probs, table_bits
from .entropy import DeepEntropyModel, HistogramModel, UniformModel, load_checkpoint
from .errors import CorruptStreamError, ModelMismatchError
from .octree import LevelReader, Mode, Octree, build_octree, reconstruct_points, serialize_bfs
from .pointcloud import QuantizedCloud, QuantParams, as_cloud, dequantize, fit_quant_params, quantize

MAGIC = b"OCSQ"
VERSION = 1
_HEAD = struct.Struct("<4sBBBBI3ddIIQ")
_CRC = struct.Struct("<I")


class ChecksumError(CorruptStreamError):
    code = "E_CRC"


class TruncatedError(CorruptStreamError):
    code = "E_TRUNCATED"


class WrongModelError(ModelMismatchError):
    code = "E_MODEL_HASH"


BUILTIN_MODELS = {
    "uniform": UniformModel,
    "histogram": lambda: HistogramModel("none", adaptive=True),
    "parent-histogram": lambda: HistogramModel("parent_occupancy", adaptive=True),
}


def resolve_model(spec):
    """A model object from a builtin name, a checkpoint path or a model."""
    if not isinstance(spec, (str, Path)):
        return spec
    if str(spec) in BUILTIN_MODELS:
        return BUILTIN_MODELS[str(spec)]()
    return load_checkpoint(spec)


def model_hash(model) -> int:
    return model.model_hash if isinstance(model, DeepEntropyModel) else 0


def model_for_kind(kind: int, deep: DeepEntropyModel | None = None):
    if kind == 0:
        return UniformModel()
    if kind in (1, 2):
        return BUILTIN_MODELS["histogram" if kind == 1 else "parent-histogram"]()
    if kind == 3:
        if deep is None:
            raise ModelMismatchError("stream needs a deep model checkpoint")
        return deep
    raise CorruptStreamError(f"unknown model kind {kind}")


@dataclass
class Header:
    mode: Mode
    depth_k: int
    model_kind: int
    model_hash: int
    params: QuantParams
    point_count: int
    symbol_count: int


@dataclass
class EncodeStats:
    points: int
    unique_points: int
    symbols: int
    payload_bytes: int
    leaf_bits: int
    total_bytes: int
    model_bits: float  # sum of -log2 of the quantized table probabilities
    seconds: float

    @property
    def bpp(self) -> float:
        return 8 * self.total_bytes / self.points

    @property
    def payload_bpp(self) -> float:
        return (8 * self.payload_bytes + self.leaf_bits) / self.points

    def line(self) -> str:
        return (f"bpp={self.bpp:.6f} symbols={self.symbols} bytes={self.total_bytes} "
                f"payload_bpp={self.payload_bpp:.6f} seconds={self.seconds:.3f}")


def encode_tree(tree: Octree, model) -> tuple[bytes, float]:
    """Range-code the tree's symbols; returns ``(payload, ideal bits)``."""
    if isinstance(model, DeepEntropyModel) and tree.depth_k > model.k_max:
        raise ValueError(f"depth {tree.depth_k} exceeds the model's k_max {model.k_max}")
    pred = model.predictor()
    enc = RangeEncoder()
    ideal = 0.0
    for L, lv in enumerate(tree.levels):
        cum = quantize_probs(pred.predict(tree.level_context(L)))
        ideal += table_bits(cum, lv.symbols)
        enc.encode_rows(cum, lv.symbols)
        pred.update(lv.symbols)
    return enc.finish(), ideal


def decode_tree(payload: bytes, leaf_bits: np.ndarray, depth_k: int, mode, model, symbol_count=None,
                params=None) -> Octree:
    reader = LevelReader(depth_k, mode)
    pred = model.predictor()
    dec = RangeDecoder(payload)
    bit_pos = 0
    while not reader.done:
        cum = quantize_probs(pred.predict(reader.context()))
        if symbol_count is not None and reader.node_offset + len(cum) > symbol_count:
            raise CorruptStreamError(
                f"tree needs more than the {symbol_count} symbols in the header "
                f"(missing node index {symbol_count})")
        symbols = dec.decode_rows(cum).astype(np.uint8)
        nbits = reader.leaf_bits_needed(symbols)
        if bit_pos + nbits > len(leaf_bits):
            raise CorruptStreamError(f"leaf bits exhausted at level {len(reader.levels)}")
        reader.push(symbols, leaf_bits[bit_pos:bit_pos + nbits])
        bit_pos += nbits
        pred.update(symbols)
    if symbol_count is not None and reader.node_offset != symbol_count:
        raise CorruptStreamError(f"decoded {reader.node_offset} symbols, header says {symbol_count}")
    dec.check_end()
    return reader.tree(params)


def pack_container(header: Header, payload: bytes, leaf_bits: np.ndarray) -> bytes:
    head = _HEAD.pack(MAGIC, VERSION, int(header.mode), header.depth_k, header.model_kind,
                      header.model_hash, *header.params.origin, header.params.cell,
                      header.point_count, header.symbol_count, len(payload))
    bits = np.asarray(leaf_bits, dtype=np.uint8)
    body = head + payload + struct.pack("<I", len(bits)) + np.packbits(bits).tobytes()
    return body + _CRC.pack(zlib.crc32(body))


def unpack_container(data: bytes):
    if len(data) < 4 or data[:4] != MAGIC:
        raise CorruptStreamError("not an octsqueeze container (bad magic)")
    if len(data) < _HEAD.size + 8:
        raise TruncatedError(f"container truncated: {len(data)} bytes")
    (_, version, mode, depth, kind, mhash, ox, oy, oz, cell, npts, nsym, plen) = _HEAD.unpack_from(data)
    pos = _HEAD.size
    if pos + plen + 8 > len(data):
        raise TruncatedError(f"container truncated inside the payload ({len(data)} bytes)")
    payload = data[pos:pos + plen]
    pos += plen
    (nbits,) = struct.unpack_from("<I", data, pos)
    pos += 4
    nbytes = (nbits + 7) // 8
    if pos + nbytes + 4 > len(data):
        raise TruncatedError("container truncated inside the leaf bits")
    leaf_bits = np.unpackbits(np.frombuffer(data[pos:pos + nbytes], dtype=np.uint8))[:nbits]
    pos += nbytes
    if pos + 4 != len(data):
        raise CorruptStreamError(f"{len(data) - pos - 4} trailing bytes in container")
    if zlib.crc32(data[:pos]) != _CRC.unpack_from(data, pos)[0]:
        raise ChecksumError("container checksum mismatch")
    if version != VERSION:
        raise CorruptStreamError(f"unsupported container version {version}")
    try:
        params = QuantParams((ox, oy, oz), cell, depth)
        header = Header(Mode(mode), depth, kind, mhash, params, npts, nsym)
    except ValueError as e:
        raise CorruptStreamError(f"invalid header field: {e}") from None
    return header, payload, leaf_bits


def encode_tree_container(tree: Octree, model, n_points: int) -> tuple[bytes, EncodeStats]:
    """Container bytes for an already built tree (its ``params`` must be set)."""
    t0 = time.perf_counter()
    if n_points <= 0:
        raise ValueError("point count must be positive")
    model = resolve_model(model)
    payload, ideal = encode_tree(tree, model)
    leaf_bits = serialize_bfs(tree).leaf_bits
    header = Header(tree.mode, tree.depth_k, model.kind, model_hash(model), tree.params, n_points,
                    tree.node_count)
    data = pack_container(header, payload, leaf_bits)
    stats = EncodeStats(n_points, -1, tree.node_count, len(payload), len(leaf_bits), len(data),
                        ideal, time.perf_counter() - t0)
    return data, stats


def encode_cloud(points, model, depth: int, mode=Mode.FULL) -> tuple[bytes, EncodeStats]:
    t0 = time.perf_counter()
    pts = as_cloud(points)
    if len(pts) == 0:
        raise ValueError("cannot encode an empty cloud")
    qc = quantize(pts, fit_quant_params(pts, depth))
    data, stats = encode_tree_container(build_octree(qc, mode), model, len(pts))
    stats.unique_points = len(qc)
    stats.seconds = time.perf_counter() - t0
    return data, stats


def decode_container(data: bytes, model=None) -> tuple[QuantizedCloud, Header]:
    """Decode to the integer lattice. ``model`` is required for deep streams."""
    header, payload, leaf_bits = unpack_container(data)
    deep = resolve_model(model) if model is not None else None
    if header.model_kind == 3:
        if not isinstance(deep, DeepEntropyModel):
            raise ModelMismatchError("stream was coded with a deep model; supply its checkpoint")
        if model_hash(deep) != header.model_hash:
            raise WrongModelError(
                f"checkpoint hash {model_hash(deep):08x} does not match stream {header.model_hash:08x}")
    tree = decode_tree(payload, leaf_bits, header.depth_k, header.mode, model_for_kind(header.model_kind, deep),
                       header.symbol_count, header.params)
    qc = reconstruct_points(tree, header.params)
    qc.n_input = header.point_count
    return qc, header


def decode_cloud(data: bytes, model=None) -> np.ndarray:
    qc, _ = decode_container(data, model)
    return dequantize(qc)


def roundtrip_reference(points, depth: int) -> np.ndarray:
    """What a lossless decode must return: cell centers of the quantized cloud."""
    pts = as_cloud(points)
    return dequantize(quantize(pts, fit_quant_params(pts, depth)))
