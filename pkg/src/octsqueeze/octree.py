"""Occupancy octrees over a quantized lattice.

Bit conventions (they define bitstream compatibility):

* coordinates are read MSB first; the child octant of a point at level ``i``
  is ``(x_bit << 2) | (y_bit << 1) | z_bit`` with bit ``k - 1 - i`` of each axis;
* bit ``b`` of a node's occupancy byte is set iff child octant ``b`` is occupied;
* nodes are ordered breadth first, children of a level listed in parent order
  and then by ascending octant.

Nodes are kept level by level as Morton prefixes, which makes that order the
plain ascending order of the prefixes.

In ``EARLY`` mode a node above the last level whose cell holds exactly one point
stops subdividing: it emits occupancy 0 (impossible for a real internal node)
and stores the point's remaining ``3 * (k - level)`` coordinate bits raw, one
``x, y, z`` triple per remaining level, coarse to fine.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator

import numpy as np

from .context import LevelContext, root_context
from .errors import CorruptStreamError
from .pointcloud import QuantizedCloud, QuantParams


class Mode(IntEnum):
    FULL = 0
    EARLY = 1

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, str):
            return {"full": cls.FULL, "full_subdivision": cls.FULL, "0": cls.FULL,
                    "early": cls.EARLY, "early_termination": cls.EARLY, "1": cls.EARLY}[value]
        return cls(int(value))


def morton_encode(coords: np.ndarray, depth: int) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    m = np.zeros(len(c), dtype=np.int64)
    for b in range(depth):
        m |= ((c[:, 0] >> b) & 1) << (3 * b + 2)
        m |= ((c[:, 1] >> b) & 1) << (3 * b + 1)
        m |= ((c[:, 2] >> b) & 1) << (3 * b)
    return m


def morton_decode(codes: np.ndarray, depth: int) -> np.ndarray:
    m = np.asarray(codes, dtype=np.int64)
    out = np.zeros((len(m), 3), dtype=np.int64)
    for b in range(depth):
        out[:, 0] |= ((m >> (3 * b + 2)) & 1) << b
        out[:, 1] |= ((m >> (3 * b + 1)) & 1) << b
        out[:, 2] |= ((m >> (3 * b)) & 1) << b
    return out


def expand_children(prefix: np.ndarray, symbols: np.ndarray):
    """Child prefixes and parent indices of a level, in BFS order."""
    bits = np.unpackbits(np.asarray(symbols, dtype=np.uint8)[:, None], axis=1, bitorder="little")
    rows, octants = np.nonzero(bits)
    return (prefix[rows] << 3) | octants, rows.astype(np.int64)


@dataclass(eq=False)
class Level:
    prefix: np.ndarray  # (n,) Morton prefix of each cell, 3*level bits
    symbols: np.ndarray  # (n,) uint8 occupancy; 0 marks an early leaf
    parent: np.ndarray  # (n,) index into the previous level, -1 at the root
    payload: np.ndarray | None = None  # (n,) early-leaf remaining bits, EARLY mode only

    def __len__(self):
        return len(self.prefix)


@dataclass(frozen=True)
class OctreeNode:
    level: int
    index: int
    occupancy: int
    cell_coords: tuple[int, int, int]
    octant: int | None
    parent: int | None
    parent_occupancy: int
    leaf_payload: tuple[int, ...] | None = None


@dataclass(eq=False)
class Octree:
    depth_k: int
    mode: Mode
    levels: list[Level]
    params: QuantParams | None = field(default=None)

    @property
    def node_count(self) -> int:
        return sum(len(lv) for lv in self.levels)

    @property
    def symbols(self) -> np.ndarray:
        return np.concatenate([lv.symbols for lv in self.levels])

    def level_context(self, level: int) -> LevelContext:
        if level == 0:
            return root_context()
        lv, up = self.levels[level], self.levels[level - 1]
        return make_level_context(level, lv.prefix, lv.parent, up.symbols)

    def leaf_bit_count(self) -> int:
        if self.mode != Mode.EARLY:
            return 0
        return sum(3 * (self.depth_k - L) * int(np.count_nonzero(lv.symbols == 0))
                   for L, lv in enumerate(self.levels))

    def nodes(self) -> Iterator[OctreeNode]:
        for L, lv in enumerate(self.levels):
            ctx = self.level_context(L)
            for i in range(len(lv)):
                payload = None
                if self.mode == Mode.EARLY and lv.symbols[i] == 0:
                    nbits = 3 * (self.depth_k - L)
                    payload = tuple((int(lv.payload[i]) >> (nbits - 1 - j)) & 1 for j in range(nbits))
                octant = int(ctx.octant[i])
                yield OctreeNode(
                    level=L,
                    index=i,
                    occupancy=int(lv.symbols[i]),
                    cell_coords=tuple(int(c) for c in ctx.coords[i]),
                    octant=None if octant < 0 else octant,
                    parent=None if L == 0 else int(lv.parent[i]),
                    parent_occupancy=int(ctx.parent_occupancy[i]),
                    leaf_payload=payload,
                )

    def __eq__(self, other):
        if not isinstance(other, Octree):
            return NotImplemented
        if (self.depth_k, self.mode, len(self.levels)) != (other.depth_k, other.mode, len(other.levels)):
            return False
        for a, b in zip(self.levels, other.levels):
            if not (np.array_equal(a.prefix, b.prefix) and np.array_equal(a.symbols, b.symbols)
                    and np.array_equal(a.parent, b.parent)):
                return False
            if (a.payload is None) != (b.payload is None):
                return False
            if a.payload is not None and not np.array_equal(a.payload, b.payload):
                return False
        return True


def make_level_context(level: int, prefix, parent, parent_symbols) -> LevelContext:
    return LevelContext(
        level=level,
        parent_occupancy=np.asarray(parent_symbols, dtype=np.uint8)[parent],
        octant=prefix & 7,
        coords=morton_decode(prefix, level),
        parent=parent,
    )


@dataclass
class SymbolStream:
    symbols: np.ndarray  # uint8, BFS order
    contexts: list[LevelContext]
    leaf_bits: np.ndarray  # uint8 of 0/1, early-leaf payloads in BFS order
    level_sizes: list[int]


def build_octree(qc: QuantizedCloud, mode=Mode.FULL) -> Octree:
    mode = Mode.parse(mode)
    k = qc.params.depth_k
    if len(qc) == 0:
        raise ValueError("cannot build an octree from an empty cloud")
    active = np.unique(morton_encode(qc.coords, k))
    prefix = np.zeros(1, dtype=np.int64)
    parent = np.full(1, -1, dtype=np.int64)
    levels = []
    for L in range(k):
        shift = 3 * (k - L)
        owner = np.searchsorted(prefix, active >> shift)
        n = len(prefix)
        payload = None
        if mode == Mode.EARLY:
            payload = np.zeros(n, dtype=np.int64)
            if L < k - 1:
                lone = (np.bincount(owner, minlength=n) == 1)[owner]
                payload[owner[lone]] = active[lone] & ((1 << shift) - 1)
                active, owner = active[~lone], owner[~lone]
        child, first = np.unique(active >> (shift - 3), return_index=True)
        child_parent = owner[first]
        symbols = np.zeros(n, dtype=np.uint8)
        np.bitwise_or.at(symbols, child_parent, (1 << (child & 7)).astype(np.uint8))
        levels.append(Level(prefix, symbols, parent, payload))
        prefix, parent = child, child_parent.astype(np.int64)
    return Octree(k, mode, levels, qc.params)


def _bits_to_ints(bits: np.ndarray, width: int) -> np.ndarray:
    weights = np.left_shift(np.int64(1), np.arange(width - 1, -1, -1, dtype=np.int64))
    return bits.reshape(-1, width).astype(np.int64) @ weights


def _ints_to_bits(values: np.ndarray, width: int) -> np.ndarray:
    shifts = np.arange(width - 1, -1, -1, dtype=np.int64)
    return ((np.asarray(values, dtype=np.int64)[:, None] >> shifts) & 1).astype(np.uint8).ravel()


def serialize_bfs(tree: Octree) -> SymbolStream:
    contexts = [tree.level_context(L) for L in range(len(tree.levels))]
    bits = [np.zeros(0, dtype=np.uint8)]
    if tree.mode == Mode.EARLY:
        for L, lv in enumerate(tree.levels):
            leaf = lv.symbols == 0
            if leaf.any():
                bits.append(_ints_to_bits(lv.payload[leaf], 3 * (tree.depth_k - L)))
    return SymbolStream(
        symbols=tree.symbols,
        contexts=contexts,
        leaf_bits=np.concatenate(bits),
        level_sizes=[len(lv) for lv in tree.levels],
    )


class LevelReader:
    """Incremental level-by-level tree reconstruction, shared with the decoder.

    ``next_nodes`` gives the prefixes/parents of the level about to be read;
    ``push`` consumes that level's symbols (and leaf bits, in EARLY mode).
    """

    def __init__(self, depth_k: int, mode):
        self.depth_k = depth_k
        self.mode = Mode.parse(mode)
        self.levels: list[Level] = []
        self.prefix = np.zeros(1, dtype=np.int64)
        self.parent = np.full(1, -1, dtype=np.int64)
        self.node_offset = 0

    @property
    def done(self) -> bool:
        return len(self.levels) == self.depth_k

    def context(self) -> LevelContext:
        L = len(self.levels)
        if L == 0:
            return root_context()
        return make_level_context(L, self.prefix, self.parent, self.levels[-1].symbols)

    def leaf_bits_needed(self, symbols) -> int:
        if self.mode != Mode.EARLY:
            return 0
        return 3 * (self.depth_k - len(self.levels)) * int(np.count_nonzero(np.asarray(symbols) == 0))

    def push(self, symbols, leaf_bits=None) -> None:
        L = len(self.levels)
        symbols = np.asarray(symbols, dtype=np.uint8)
        zero = np.flatnonzero(symbols == 0)
        if len(zero) and (self.mode == Mode.FULL or L == self.depth_k - 1):
            raise CorruptStreamError(f"occupancy 0 at node index {self.node_offset + int(zero[0])}")
        payload = None
        if self.mode == Mode.EARLY:
            payload = np.zeros(len(symbols), dtype=np.int64)
            if len(zero):
                width = 3 * (self.depth_k - L)
                payload[zero] = _bits_to_ints(np.asarray(leaf_bits, dtype=np.uint8), width)
        self.levels.append(Level(self.prefix, symbols, self.parent, payload))
        self.node_offset += len(symbols)
        self.prefix, self.parent = expand_children(self.prefix, symbols)

    def tree(self, params: QuantParams | None = None) -> Octree:
        return Octree(self.depth_k, self.mode, self.levels, params)


def deserialize_bfs(symbols, leaf_bits, depth_k: int, mode=Mode.FULL, params=None) -> Octree:
    symbols = np.asarray(symbols, dtype=np.uint8)
    leaf_bits = np.asarray(leaf_bits, dtype=np.uint8)
    reader = LevelReader(depth_k, mode)
    pos = bit_pos = 0
    while not reader.done:
        n = len(reader.prefix)
        if pos + n > len(symbols):
            raise CorruptStreamError(f"symbol stream truncated: missing node index {len(symbols)}")
        chunk = symbols[pos:pos + n]
        nbits = reader.leaf_bits_needed(chunk)
        if bit_pos + nbits > len(leaf_bits):
            raise CorruptStreamError(f"leaf bits truncated at level {len(reader.levels)}")
        reader.push(chunk, leaf_bits[bit_pos:bit_pos + nbits])
        pos += n
        bit_pos += nbits
    if pos != len(symbols):
        raise CorruptStreamError(f"{len(symbols) - pos} trailing symbols after the last level")
    return reader.tree(params)


def leaf_codes(tree: Octree) -> np.ndarray:
    """Full-depth Morton codes of every point the tree stores, ascending."""
    k = tree.depth_k
    out = []
    for L, lv in enumerate(tree.levels):
        if tree.mode == Mode.EARLY:
            leaf = lv.symbols == 0
            if leaf.any():
                out.append((lv.prefix[leaf] << (3 * (k - L))) | lv.payload[leaf])
    last = tree.levels[-1]
    out.append(expand_children(last.prefix, last.symbols)[0])
    return np.sort(np.concatenate(out))


def reconstruct_points(tree: Octree, params: QuantParams | None = None) -> QuantizedCloud:
    """Integer lattice points stored in ``tree``, in Morton order."""
    params = params or tree.params
    if params is None:
        params = QuantParams((0.0, 0.0, 0.0), 1.0, tree.depth_k)
    coords = morton_decode(leaf_codes(tree), tree.depth_k)
    return QuantizedCloud(coords, params)


def truncate(tree: Octree, depth_d: int) -> Octree:
    """Keep the first ``depth_d`` levels; the result is a valid depth-d tree.

    Early-leaf payloads lose their finest ``depth_k - depth_d`` triples; a leaf
    left on the new last level turns back into a one-child node.
    """
    k = tree.depth_k
    if not 1 <= depth_d <= k:
        raise ValueError(f"truncation depth {depth_d} outside [1, {k}]")
    drop = 3 * (k - depth_d)
    levels = []
    for L, lv in enumerate(tree.levels[:depth_d]):
        symbols, payload = lv.symbols.copy(), None
        if tree.mode == Mode.EARLY:
            payload = lv.payload >> drop
            if L == depth_d - 1:
                leaf = symbols == 0
                symbols[leaf] = (1 << payload[leaf]).astype(np.uint8)
                payload = np.zeros_like(payload)
        levels.append(Level(lv.prefix, symbols, lv.parent, payload))
    params = tree.params.coarsen(depth_d) if tree.params is not None else None
    return Octree(depth_d, tree.mode, levels, params)
