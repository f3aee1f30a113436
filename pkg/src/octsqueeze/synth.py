"""Deterministic LiDAR-like synthetic scenes.

A scene is a noisy ground plane plus axis-aligned boxes resting on it, seen by
a sensor at the origin. Candidate points are thinned radially by
``(1 + r / radial_scale) ** -radial_exponent`` so density falls off with range
as in a spinning LiDAR.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    ground_extent: float = 25.0  # half side of the ground square, m
    ground_noise: float = 0.02  # sigma, m
    box_count: int = 6
    box_size_min: tuple[float, float, float] = (1.5, 1.5, 1.0)
    box_size_max: tuple[float, float, float] = (5.0, 3.0, 3.0)
    box_range: float = 18.0  # box centers within this half side, m
    box_fraction: float = 0.35
    points: int = 1500
    radial_exponent: float = 2.0
    radial_scale: float = 5.0  # m

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        fields = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**fields)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


def _boxes(spec: SceneSpec, rng) -> list[tuple[np.ndarray, np.ndarray]]:
    lo_size, hi_size = np.array(spec.box_size_min), np.array(spec.box_size_max)
    out = []
    for _ in range(spec.box_count):
        size = rng.uniform(lo_size, hi_size)
        center = rng.uniform(-spec.box_range, spec.box_range, size=2)
        lo = np.array([center[0] - size[0] / 2, center[1] - size[1] / 2, 0.0])
        out.append((lo, lo + size))
    return out


def _sample_box_surface(lo, hi, n, rng) -> np.ndarray:
    size = hi - lo
    # four sides and the top; the bottom sits on the ground
    areas = np.array([size[1] * size[2]] * 2 + [size[0] * size[2]] * 2 + [size[0] * size[1]])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    pts = lo + rng.random((n, 3)) * size
    pts[face == 0, 0] = lo[0]
    pts[face == 1, 0] = hi[0]
    pts[face == 2, 1] = lo[1]
    pts[face == 3, 1] = hi[1]
    pts[face == 4, 2] = hi[2]
    return pts


def _candidates(spec: SceneSpec, boxes, n, rng):
    n_box = rng.binomial(n, spec.box_fraction) if boxes else 0
    ground = np.empty((n - n_box, 3))
    ground[:, :2] = rng.uniform(-spec.ground_extent, spec.ground_extent, size=(n - n_box, 2))
    ground[:, 2] = rng.normal(0.0, spec.ground_noise, size=n - n_box)
    parts = [ground]
    if n_box:
        which = rng.integers(0, len(boxes), size=n_box)
        for b, (lo, hi) in enumerate(boxes):
            m = int(np.count_nonzero(which == b))
            if m:
                parts.append(_sample_box_surface(lo, hi, m, rng))
    labels = np.concatenate([np.zeros(n - n_box, dtype=np.int8), np.ones(n_box, dtype=np.int8)])
    return np.concatenate(parts), labels


def generate_scene(spec: SceneSpec, with_labels=False):
    """Sample ``spec.points`` points; same spec gives the same cloud bit for bit.

    With ``with_labels`` also returns an int8 array, 0 for ground points and 1
    for box points.
    """
    rng = np.random.default_rng(spec.seed)
    boxes = _boxes(spec, rng)
    kept, kept_labels = [], []
    have = 0
    while have < spec.points:
        cand, labels = _candidates(spec, boxes, max(4 * (spec.points - have), 256), rng)
        r = np.hypot(cand[:, 0], cand[:, 1])
        accept = rng.random(len(cand)) < (1.0 + r / spec.radial_scale) ** -spec.radial_exponent
        kept.append(cand[accept])
        kept_labels.append(labels[accept])
        have += int(accept.sum())
    pts = np.concatenate(kept)[: spec.points]
    labels = np.concatenate(kept_labels)[: spec.points]
    return (pts, labels) if with_labels else pts


def scene_specs(base: SceneSpec, count: int) -> list[SceneSpec]:
    """``count`` specs with consecutive seeds starting at ``base.seed``."""
    return [replace(base, seed=base.seed + i) for i in range(count)]
