"""Entropy models over octree occupancy symbols.

Every model hands out a *level predictor*: ``predict(ctx)`` returns a
``(n, 256)`` distribution for the nodes of one level, and ``update(symbols)``
reveals that level's symbols before the next level is asked for. The encoder
and the decoder drive predictors through exactly the same calls, so the
distributions they see are identical.

The deep model embeds each node's context with a 5-layer MLP and then runs
``K`` aggregation stages; stage ``k`` feeds ``[own stage k-1, parent stage k-1]``
through a 3-layer MLP and adds the node's own stage ``k-1`` back (the skip
path). A linear head and softmax give the 256-way distribution. The root's
parent features are zeros.
"""
from __future__ import annotations

import csv
import logging
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from . import nn
from .context import ALL_FEATURES, FEATURE_DIM, LevelContext, featurize, mask_vector, normalize_features
from .errors import CorruptStreamError
from .octree import Octree

log = logging.getLogger(__name__)

NSYM = 256
HIDDEN = 128
MLP0_LAYERS = 5
AGG_LAYERS = 3
MAX_K = 5

CHECKPOINT_MAGIC = b"OCSQM"
CHECKPOINT_VERSION = 1
_FEATURE_BITS = {"level": 1, "parent": 2, "octant": 4, "location": 8}


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# baselines


class UniformModel:
    kind = 0

    def predictor(self):
        return _UniformPredictor()


class _UniformPredictor:
    def predict(self, ctx: LevelContext) -> np.ndarray:
        return np.full((len(ctx), NSYM), 1.0 / NSYM)

    def update(self, symbols) -> None:
        pass


@dataclass
class HistogramModel:
    """Add-one smoothed symbol counts, optionally per parent occupancy.

    With ``adaptive`` the predictor keeps counting while it codes, one level at
    a time, starting from ``counts``.
    """

    conditioning: str = "none"  # or "parent_occupancy"
    counts: np.ndarray = None
    adaptive: bool = False
    smoothing: float = 1.0

    def __post_init__(self):
        if self.conditioning not in ("none", "parent_occupancy"):
            raise ValueError(f"unknown conditioning {self.conditioning!r}")
        if self.counts is None:
            self.counts = np.zeros((self.n_classes, NSYM), dtype=np.int64)

    @property
    def kind(self) -> int:
        return 1 if self.conditioning == "none" else 2

    @property
    def n_classes(self) -> int:
        return 1 if self.conditioning == "none" else NSYM

    def classes(self, ctx: LevelContext) -> np.ndarray:
        if self.conditioning == "none":
            return np.zeros(len(ctx), dtype=np.int64)
        return np.asarray(ctx.parent_occupancy, dtype=np.int64)

    def probs(self, ctx: LevelContext, counts=None) -> np.ndarray:
        c = (self.counts if counts is None else counts)[self.classes(ctx)].astype(np.float64)
        c += self.smoothing
        return c / c.sum(axis=1, keepdims=True)

    def observe(self, ctx: LevelContext, symbols, counts=None) -> None:
        target = self.counts if counts is None else counts
        np.add.at(target, (self.classes(ctx), np.asarray(symbols, dtype=np.int64)), 1)

    def predictor(self):
        return _HistogramPredictor(self)


class _HistogramPredictor:
    def __init__(self, model: HistogramModel):
        self.model = model
        self.counts = model.counts.copy()
        self.ctx = None

    def predict(self, ctx):
        self.ctx = ctx
        return self.model.probs(ctx, self.counts)

    def update(self, symbols):
        if self.model.adaptive:
            self.model.observe(self.ctx, symbols, self.counts)


def fit_histogram(trees: Iterable[Octree], conditioning="none") -> HistogramModel:
    model = HistogramModel(conditioning)
    for tree in trees:
        for L, lv in enumerate(tree.levels):
            model.observe(tree.level_context(L), lv.symbols)
    return model


def predict_histogram(model: HistogramModel, ctx) -> np.ndarray:
    """Distribution for a :class:`LevelContext` (rows) or a single node context."""
    if not isinstance(ctx, LevelContext):
        cls = 0 if model.conditioning == "none" else int(ctx.parent_occupancy)
        c = model.counts[cls].astype(np.float64) + model.smoothing
        return c / c.sum()
    return model.probs(ctx)


# --------------------------------------------------------------------------
# deep model


@dataclass(eq=False)
class DeepEntropyModel:
    mlp0: nn.MlpStack
    agg: list[nn.MlpStack]
    head: nn.MlpStack
    features: frozenset = ALL_FEATURES
    k_max: int = 12
    aggregation: str = "parent"  # "self" feeds a node its own features instead
    kind = 3

    def __post_init__(self):
        self.features = normalize_features(self.features)
        self._mask = mask_vector(self.features)
        if self.aggregation not in ("parent", "self"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")

    @property
    def K(self) -> int:
        return len(self.agg)

    @property
    def stacks(self) -> list[nn.MlpStack]:
        return [self.mlp0, *self.agg, self.head]

    def params(self) -> list[np.ndarray]:
        return [p for s in self.stacks for p in s.params()]

    def touch(self):
        for s in self.stacks:
            s.touch()

    def featurize(self, ctx: LevelContext) -> np.ndarray:
        return featurize(ctx, self.k_max) * self._mask

    def predictor(self):
        return _DeepPredictor(self)

    def to_bytes(self) -> bytes:
        return save_checkpoint_bytes(self)

    @property
    def model_hash(self) -> int:
        return checkpoint_hash(self.to_bytes())


def init_model(K=4, features=ALL_FEATURES, k_max=12, seed=0, aggregation="parent", hidden=HIDDEN):
    if not 0 <= K <= MAX_K:
        raise ValueError(f"K must be in [0, {MAX_K}]")
    rng = np.random.default_rng(seed)
    mlp0 = nn.init_params([FEATURE_DIM] + [hidden] * MLP0_LAYERS, rng=rng)
    agg = [nn.init_params([2 * hidden] + [hidden] * AGG_LAYERS, residual=True, rng=rng) for _ in range(K)]
    head = nn.init_params([hidden, NSYM], final_relu=False, rng=rng)
    return DeepEntropyModel(mlp0, agg, head, frozenset(normalize_features(features)), k_max, aggregation)


def _partner(model, h, parent, parent_h):
    if model.aggregation == "self":
        return h
    if parent_h is None:
        return np.zeros_like(h)
    return parent_h[parent]


def predict_level(model: DeepEntropyModel, features, parent, parent_hidden):
    """Distributions for one level plus the stage features its children need.

    ``parent_hidden`` lists stages ``0..K-1`` of the previous level (``None`` at
    the root). Returns ``(probs, hidden)`` with ``hidden`` shaped the same way
    for this level.
    """
    parent = np.asarray(parent, dtype=np.int64)
    is_root = bool(np.all(parent < 0))
    if model.K and model.aggregation == "parent" and parent_hidden is None and not is_root:
        raise ValueError("missing parent stage cache for a non-root level")
    h, _ = nn.forward(model.mlp0, features, keep_cache=False)
    hidden = []
    for k, stack in enumerate(model.agg):
        hidden.append(h)
        ph = None if is_root or parent_hidden is None else parent_hidden[k]
        x = np.concatenate([h, _partner(model, h, parent, ph)], axis=1)
        h, _ = nn.forward(stack, x, keep_cache=False)
    logits, _ = nn.forward(model.head, h, keep_cache=False)
    return nn.softmax(logits), hidden


class _DeepPredictor:
    def __init__(self, model: DeepEntropyModel):
        self.model = model
        self.cache = None

    def predict(self, ctx: LevelContext) -> np.ndarray:
        probs, self.cache = predict_level(self.model, self.model.featurize(ctx), ctx.parent, self.cache)
        return probs

    def update(self, symbols) -> None:
        pass


# --------------------------------------------------------------------------
# checkpoints


def _descriptor(model: DeepEntropyModel) -> bytes:
    fbits = sum(_FEATURE_BITS[f] for f in model.features)
    return struct.pack(
        "<BBBBHBB",
        model.K,
        0 if model.aggregation == "parent" else 1,
        model.k_max,
        fbits,
        model.head.in_dim,
        len(model.mlp0.layers),
        len(model.agg[0].layers) if model.agg else AGG_LAYERS,
    )


def save_checkpoint_bytes(model: DeepEntropyModel) -> bytes:
    body = CHECKPOINT_MAGIC + bytes([CHECKPOINT_VERSION]) + _descriptor(model)
    body += b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params())
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_hash(data: bytes) -> int:
    return struct.unpack("<I", data[-4:])[0]


def load_checkpoint_bytes(data: bytes) -> DeepEntropyModel:
    if data[:5] != CHECKPOINT_MAGIC:
        raise CorruptStreamError("not a model checkpoint (bad magic)")
    if len(data) < 19 or zlib.crc32(data[:-4]) != checkpoint_hash(data):
        raise CorruptStreamError("checkpoint checksum mismatch")
    if data[5] != CHECKPOINT_VERSION:
        raise CorruptStreamError(f"unsupported checkpoint version {data[5]}")
    K, agg_kind, k_max, fbits, hidden, n0, na = struct.unpack_from("<BBBBHBB", data, 6)
    features = [f for f, b in _FEATURE_BITS.items() if fbits & b]
    model = init_model(K, features, k_max, seed=0, aggregation="parent" if agg_kind == 0 else "self",
                       hidden=hidden)
    if len(model.mlp0.layers) != n0 or (K and len(model.agg[0].layers) != na):
        raise CorruptStreamError("checkpoint architecture not supported")
    offset = 6 + struct.calcsize("<BBBBHBB")
    for p in model.params():
        n = p.size
        chunk = data[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise CorruptStreamError("checkpoint truncated")
        p[...] = np.frombuffer(chunk, dtype="<f8").reshape(p.shape)
        offset += 8 * n
    if offset != len(data) - 4:
        raise CorruptStreamError("trailing bytes in checkpoint")
    model.touch()
    return model


def save_checkpoint(model: DeepEntropyModel, path) -> int:
    from .pointcloud import _atomic_write
    data = save_checkpoint_bytes(model)
    _atomic_write(Path(path), data)
    return checkpoint_hash(data)


def load_checkpoint(path) -> DeepEntropyModel:
    return load_checkpoint_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# evaluation


@dataclass
class CrossEntropy:
    bits: float  # model bits over the symbols plus raw leaf bits
    symbol_bits: float
    symbols: int
    points: int

    @property
    def bps(self) -> float:
        return self.symbol_bits / max(self.symbols, 1)

    @property
    def bpp(self) -> float:
        return self.bits / max(self.points, 1)


def level_distributions(model, tree: Octree):
    """Yield ``(ctx, probs, symbols)`` per level exactly as the coder sees them."""
    pred = model.predictor()
    for L, lv in enumerate(tree.levels):
        ctx = tree.level_context(L)
        probs = pred.predict(ctx)
        yield ctx, probs, lv.symbols
        pred.update(lv.symbols)


def model_cross_entropy(model, tree: Octree, n_points: int | None = None) -> CrossEntropy:
    total = 0.0
    for _, probs, symbols in level_distributions(model, tree):
        total -= float(np.log2(probs[np.arange(len(symbols)), symbols]).sum())
    if n_points is None:
        from .octree import leaf_codes
        n_points = len(leaf_codes(tree))
    return CrossEntropy(total + tree.leaf_bit_count(), total, tree.node_count, n_points)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 2
    lr: float = 1e-4
    seed: int = 0
    K: int = 4
    features: frozenset = ALL_FEATURES
    k_max: int = 12
    aggregation: str = "parent"
    val_fraction: float = 0.2
    eval_every: int = 100
    compute_dtype: str = "float32"  # forward/backward precision; weights and Adam stay float64

    def __post_init__(self):
        self.features = normalize_features(self.features)
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError(f"compute_dtype must be float32 or float64, not {self.compute_dtype!r}")
        if self.steps < 0 or self.batch < 1 or self.eval_every < 1 or not self.lr > 0:
            raise ValueError("steps, batch, eval_every and lr must be positive")


@dataclass
class _TreeData:
    features: np.ndarray  # (n, 20) unmasked
    parent: np.ndarray  # (n,) global parent row, -1 at the root
    symbols: np.ndarray


def tree_arrays(tree: Octree, k_max: int) -> _TreeData:
    feats, parents = [], []
    offset = prev_offset = 0
    for L, lv in enumerate(tree.levels):
        ctx = tree.level_context(L)
        feats.append(featurize(ctx, k_max))
        parents.append(np.where(ctx.parent >= 0, ctx.parent + prev_offset, -1))
        prev_offset, offset = offset, offset + len(lv)
    return _TreeData(np.concatenate(feats), np.concatenate(parents), tree.symbols.astype(np.int64))


def _stack_batch(items: Sequence[_TreeData]):
    feats, parents, symbols = [], [], []
    offset = 0
    for d in items:
        feats.append(d.features)
        parents.append(np.where(d.parent >= 0, d.parent + offset, -1))
        symbols.append(d.symbols)
        offset += len(d.symbols)
    parent = np.concatenate(parents)
    n = offset
    child = np.flatnonzero(parent >= 0)
    # scatter matrix: row p sums the gradients of p's children
    scatter = sp.csr_matrix((np.ones(len(child)), (parent[child], child)), shape=(n, n))
    return np.concatenate(feats), parent, np.concatenate(symbols), scatter


def _tree_forward(model: DeepEntropyModel, feats, parent):
    x = feats * model._mask
    h, c0 = nn.forward(model.mlp0, x)
    caches = []
    for stack in model.agg:
        if model.aggregation == "self":
            partner = h
        else:
            padded = np.vstack([h, np.zeros((1, h.shape[1]), dtype=h.dtype)])
            partner = padded[parent]  # -1 picks the zero row
        h, c = nn.forward(stack, np.concatenate([h, partner], axis=1))
        caches.append(c)
    logits, ch = nn.forward(model.head, h)
    return logits, (c0, caches, ch)


def tree_loss_and_grads(model: DeepEntropyModel, feats, parent, symbols, scatter):
    """Mean cross-entropy (nats) over all nodes and gradients for every parameter."""
    logits, (c0, caches, ch) = _tree_forward(model, feats, parent)
    loss, _, g = nn.softmax_xent(logits, symbols)
    g, head_grads = nn.backward(model.head, ch, g)
    agg_grads = [None] * model.K
    width = model.head.in_dim
    for k in range(model.K - 1, -1, -1):
        gin, agg_grads[k] = nn.backward(model.agg[k], caches[k], g)
        g = gin[:, :width]
        if model.aggregation == "self":
            g = g + gin[:, width:]
        else:
            g = g + (scatter @ gin[:, width:]).astype(g.dtype, copy=False)
    _, g0 = nn.backward(model.mlp0, c0, g, need_input_grad=False)
    grads = list(g0)
    for ga in agg_grads:
        grads += ga
    return loss, grads + head_grads


def cast_model(model: DeepEntropyModel, dtype) -> DeepEntropyModel:
    """A working copy for lower precision compute; gradients map 1:1 onto ``model.params()``."""
    return DeepEntropyModel(nn.cast_stack(model.mlp0, dtype), [nn.cast_stack(s, dtype) for s in model.agg],
                            nn.cast_stack(model.head, dtype), model.features, model.k_max, model.aggregation)


def tree_bits(model: DeepEntropyModel, data: _TreeData) -> float:
    logits, _ = _tree_forward(model, data.features, data.parent)
    lp = nn.log_softmax(logits)
    return float(-lp[np.arange(len(data.symbols)), data.symbols].sum() / nn.LN2)


@dataclass
class TrainResult:
    model: DeepEntropyModel
    history: list = field(default_factory=list)  # (step, train_nats, val_bits_per_symbol or nan)

    @property
    def final_val_bps(self) -> float:
        vals = [v for _, _, v in self.history if np.isfinite(v)]
        return vals[-1] if vals else float("nan")


def split_corpus(trees: Sequence, val_fraction: float):
    n_val = int(round(len(trees) * val_fraction))
    if len(trees) >= 2:
        n_val = min(max(n_val, 1), len(trees) - 1)
    else:
        n_val = 0
    return list(trees[: len(trees) - n_val]), list(trees[len(trees) - n_val:])


def validation_bps(model: DeepEntropyModel, val: Sequence[_TreeData]) -> float:
    bits = sum(tree_bits(model, d) for d in val)
    return bits / sum(len(d.symbols) for d in val)


def train(config: TrainConfig, trees: Sequence[Octree], val_trees: Sequence[Octree] | None = None,
          callback=None) -> TrainResult:
    """Adam on whole-tree minibatches; deterministic for a fixed seed."""
    if not trees:
        raise ValueError("training corpus is empty")
    if val_trees is None:
        trees, val_trees = split_corpus(trees, config.val_fraction)
    for t in list(trees) + list(val_trees):
        if t.depth_k > config.k_max:
            raise ValueError(f"tree depth {t.depth_k} exceeds k_max {config.k_max}")
    train_data = [tree_arrays(t, config.k_max) for t in trees]
    val_data = [tree_arrays(t, config.k_max) for t in val_trees]
    model = init_model(config.K, config.features, config.k_max, config.seed, config.aggregation)
    state = nn.AdamState(lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)
    params = model.params()
    result = TrainResult(model)
    order = np.zeros(0, dtype=np.int64)
    for step in range(1, config.steps + 1):
        if len(order) < config.batch:
            order = np.concatenate([order, rng.permutation(len(train_data))])
        pick, order = order[: config.batch], order[config.batch:]
        work = model if config.compute_dtype == "float64" else cast_model(model, np.float32)
        loss, grads = tree_loss_and_grads(work, *_stack_batch([train_data[i] for i in pick]))
        grads = [g.astype(np.float64, copy=False) for g in grads]
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDiverged(f"non-finite loss or gradient at step {step} (loss={loss})")
        nn.adam_step(state, params, grads)
        model.touch()
        val = float("nan")
        if val_data and (step % config.eval_every == 0 or step == config.steps):
            val = validation_bps(model, val_data)
            log.info("step %d train %.4f nats val %.4f bits/symbol", step, loss, val)
        result.history.append((step, loss, val))
        if callback is not None:
            callback(step, loss, val)
    return result


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "train_nats", "val_bits_per_symbol"])
        for step, loss, val in history:
            w.writerow([step, repr(loss), "" if not np.isfinite(val) else repr(val)])


# --------------------------------------------------------------------------
# ablation


@dataclass
class AblationCell:
    name: str
    config: TrainConfig


def feature_grid(base: TrainConfig, K: int = 0) -> list[AblationCell]:
    sets = [("L",), ("L", "P"), ("L", "P", "O"), ("L", "P", "O", "LL")]
    return [AblationCell("+".join(s), replace(base, K=K, features=frozenset(s))) for s in sets]


def aggregation_grid(base: TrainConfig, ks=(0, 2, 4)) -> list[AblationCell]:
    return [AblationCell(f"K={k}", replace(base, K=k, features=ALL_FEATURES)) for k in ks]


def ablate(cells: Sequence[AblationCell], trees, val_trees=None, out_csv=None, n_points=None):
    """Train one model per cell on the same corpus; returns rows of the CSV."""
    if val_trees is None:
        trees, val_trees = split_corpus(trees, cells[0].config.val_fraction)
    rows = []
    for cell in cells:
        res = train(cell.config, trees, val_trees)
        bits = symbol_bits = symbols = points = 0.0
        for i, t in enumerate(val_trees):
            ce = model_cross_entropy(res.model, t, None if n_points is None else n_points[i])
            bits += ce.bits
            symbol_bits += ce.symbol_bits
            symbols += ce.symbols
            points += ce.points
        depth = max(t.depth_k for t in val_trees)
        rows.append({"cell": cell.name, "depth": depth, "bits_per_symbol": symbol_bits / symbols,
                     "bpp": bits / points})
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["cell", "depth", "bits_per_symbol", "bpp"])
            w.writeheader()
            w.writerows(rows)
    return rows
