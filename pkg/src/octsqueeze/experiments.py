"""Shared set-up for the training experiments and the acceptance suite.

A corpus is a seed-fixed list of synthetic scenes turned into octrees; the
last ``val_fraction`` of them is held out. Trained cells are memoized per
study so that a configuration used by several comparisons is trained once.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import entropy as E
from .context import ALL_FEATURES
from .octree import Mode, Octree, build_octree
from .pointcloud import fit_quant_params, quantize
from .synth import SceneSpec, generate_scene, scene_specs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorpusConfig:
    scenes: int = 64
    points: int = 800
    depth: int = 10
    seed: int = 1000
    val_fraction: float = 0.2
    mode: Mode = Mode.FULL


@dataclass
class Corpus:
    config: CorpusConfig
    clouds: list
    train: list[Octree]
    val: list[Octree]


def synthetic_corpus(cfg: CorpusConfig = CorpusConfig()) -> Corpus:
    clouds = [generate_scene(s) for s in scene_specs(SceneSpec(seed=cfg.seed, points=cfg.points), cfg.scenes)]
    trees = []
    for pts in clouds:
        params = fit_quant_params(pts, cfg.depth)
        tree = build_octree(quantize(pts, params), cfg.mode)
        tree.params = params
        trees.append(tree)
    train, val = E.split_corpus(trees, cfg.val_fraction)
    return Corpus(cfg, clouds, train, val)


def symbol_bps(model, trees) -> float:
    bits = sum(E.model_cross_entropy(model, t).symbol_bits for t in trees)
    return bits / sum(t.node_count for t in trees)


def val_bpp(model, corpus: Corpus) -> float:
    """Validation bits per input point, leaf bits included (no container header)."""
    n_train = len(corpus.train)
    clouds = corpus.clouds[n_train:]
    bits = sum(E.model_cross_entropy(model, t, len(c)).bits for t, c in zip(corpus.val, clouds))
    return bits / sum(len(c) for c in clouds)


def baseline_models(corpus: Corpus) -> dict:
    return {
        "uniform": E.UniformModel(),
        "histogram": E.fit_histogram(corpus.train, "none"),
        "parent-histogram": E.fit_histogram(corpus.train, "parent_occupancy"),
    }


def baseline_bps(corpus: Corpus) -> dict[str, float]:
    """Validation bits/symbol of count-based models fitted on the training split."""
    return {
        "uniform": 8.0,
        "histogram": symbol_bps(E.fit_histogram(corpus.train, "none"), corpus.val),
        "parent-histogram": symbol_bps(E.fit_histogram(corpus.train, "parent_occupancy"), corpus.val),
    }


def base_config(steps: int, **kw) -> E.TrainConfig:
    """Training set-up of the desk-scale study: batch 2, lr 1e-4, K=4, all features."""
    return E.TrainConfig(steps=steps, batch=2, lr=1e-4, seed=0, K=4, features=ALL_FEATURES, k_max=12,
                         eval_every=max(steps // 4, 1), **kw)


def cell_key(cfg: E.TrainConfig):
    return (cfg.steps, cfg.batch, cfg.lr, cfg.seed, cfg.K, tuple(sorted(cfg.features)), cfg.k_max, cfg.aggregation,
            cfg.compute_dtype)


@dataclass
class CellResult:
    name: str
    config: E.TrainConfig
    result: E.TrainResult
    val_bps: float
    seconds: float


@dataclass
class Study:
    corpus: Corpus
    cells: dict = field(default_factory=dict)

    def run(self, name: str, cfg: E.TrainConfig) -> CellResult:
        key = cell_key(cfg)
        if key not in self.cells:
            t0 = time.perf_counter()
            res = E.train(cfg, self.corpus.train, self.corpus.val)
            bps = symbol_bps(res.model, self.corpus.val)
            self.cells[key] = CellResult(name, cfg, res, bps, time.perf_counter() - t0)
            log.info("%s: %.4f bits/symbol (%.0f s)", name, bps, self.cells[key].seconds)
        return self.cells[key]

    def feature_sweep(self, base: E.TrainConfig, K: int = 0) -> list[CellResult]:
        return [self.run(c.name, c.config) for c in E.feature_grid(base, K)]

    def k_sweep(self, base: E.TrainConfig, ks=(0, 2, 4)) -> list[CellResult]:
        return [self.run(c.name, c.config) for c in E.aggregation_grid(base, ks)]

    def self_control(self, base: E.TrainConfig, K: int = 4) -> CellResult:
        return self.run(f"self K={K}", replace(base, K=K, features=ALL_FEATURES, aggregation="self"))


def non_increasing_within(values, band: float) -> bool:
    """Each value is at most ``(1 + band)`` times its predecessor."""
    v = np.asarray(values, dtype=float)
    return bool(np.all(v[1:] <= v[:-1] * (1 + band)))
