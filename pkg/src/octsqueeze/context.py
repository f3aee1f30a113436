"""Per-node side information known to the decoder before the node's symbol.

Feature layout (20 dims, all entries in [0, 1])::

    [0]      level / k_max
    [1:9]    parent occupancy bits, bit 0 first (all zero at the root)
    [9:17]   octant one-hot (all zero at the root)
    [17:20]  cell center normalized to the unit cube
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

FEATURE_DIM = 20
SLOTS = {
    "level": slice(0, 1),
    "parent": slice(1, 9),
    "octant": slice(9, 17),
    "location": slice(17, 20),
}
ALL_FEATURES = frozenset(SLOTS)
# short names used by the ablation grid
FEATURE_ALIASES = {"L": "level", "P": "parent", "O": "octant", "LL": "location"}


@dataclass(frozen=True)
class NodeContext:
    level: int
    parent_occupancy: int
    octant: int | None
    location: tuple[float, float, float]


@dataclass
class LevelContext:
    """Contexts of every node of one tree level, in BFS order."""

    level: int
    parent_occupancy: np.ndarray  # (n,) uint8
    octant: np.ndarray  # (n,) int64, -1 at the root
    coords: np.ndarray  # (n, 3) int64 cell coordinates at this level
    parent: np.ndarray  # (n,) int64 index into the previous level, -1 at the root

    def __len__(self):
        return len(self.octant)

    @property
    def location(self) -> np.ndarray:
        return (self.coords + 0.5) / 2.0**self.level

    def node(self, i: int) -> NodeContext:
        octant = int(self.octant[i])
        return NodeContext(
            level=self.level,
            parent_occupancy=int(self.parent_occupancy[i]),
            octant=None if octant < 0 else octant,
            location=tuple(float(v) for v in self.location[i]),
        )


def root_context() -> LevelContext:
    return LevelContext(
        level=0,
        parent_occupancy=np.zeros(1, dtype=np.uint8),
        octant=np.full(1, -1, dtype=np.int64),
        coords=np.zeros((1, 3), dtype=np.int64),
        parent=np.full(1, -1, dtype=np.int64),
    )


def node_context(node, params=None) -> NodeContext:
    """Context of a single :class:`~octsqueeze.octree.OctreeNode`.

    ``params`` is accepted for interface symmetry; the location is expressed in
    tree geometry, so metric quantization parameters do not enter it.
    """
    loc = tuple((c + 0.5) / 2.0**node.level for c in node.cell_coords)
    return NodeContext(node.level, node.parent_occupancy, node.octant, loc)


def _as_arrays(ctx):
    if isinstance(ctx, NodeContext):
        octant = -1 if ctx.octant is None else ctx.octant
        return (
            np.array([ctx.level], dtype=np.float64),
            np.array([ctx.parent_occupancy], dtype=np.uint8),
            np.array([octant], dtype=np.int64),
            np.array([ctx.location], dtype=np.float64),
        )
    n = len(ctx)
    return (
        np.full(n, ctx.level, dtype=np.float64),
        np.asarray(ctx.parent_occupancy, dtype=np.uint8),
        np.asarray(ctx.octant, dtype=np.int64),
        ctx.location,
    )


def featurize(ctx, k_max: int) -> np.ndarray:
    """Feature rows for a :class:`NodeContext` (1 row) or :class:`LevelContext`."""
    level, parent, octant, location = _as_arrays(ctx)
    if len(level) and level.max() + 1 > k_max:
        raise ValueError(f"level {int(level.max())} needs k_max >= {int(level.max()) + 1}, got {k_max}")
    n = len(level)
    out = np.zeros((n, FEATURE_DIM), dtype=np.float64)
    out[:, 0] = level / k_max
    out[:, 1:9] = np.unpackbits(parent[:, None], axis=1, bitorder="little")
    has = octant >= 0
    out[np.flatnonzero(has), 9 + octant[has]] = 1.0
    out[:, 17:20] = location
    return out


def normalize_features(features: Iterable[str]) -> frozenset[str]:
    names = frozenset(FEATURE_ALIASES.get(f, f) for f in features)
    unknown = names - ALL_FEATURES
    if unknown:
        raise ValueError(f"unknown context features: {sorted(unknown)}")
    if not names:
        raise ValueError("feature set must not be empty")
    return names


def mask_vector(features: Iterable[str]) -> np.ndarray:
    keep = np.zeros(FEATURE_DIM)
    for name in normalize_features(features):
        keep[SLOTS[name]] = 1.0
    return keep


def feature_mask(features: Iterable[str]) -> Callable[[np.ndarray], np.ndarray]:
    """Return a transform zeroing the slots of features not in ``features``."""
    keep = mask_vector(features)
    return lambda x: np.asarray(x) * keep
