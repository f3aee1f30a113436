import csv

import numpy as np
import pytest

import oracles
from octsqueeze import entropy as E
from octsqueeze.context import root_context
from octsqueeze.errors import CorruptStreamError
from octsqueeze.octree import Mode, build_octree, deserialize_bfs
from octsqueeze.pointcloud import QuantizedCloud, QuantParams


def lattice_tree(coords, k, mode=Mode.FULL):
    return build_octree(QuantizedCloud(np.asarray(coords), QuantParams((0.0, 0.0, 0.0), 1.0, k)), mode)


def random_tree(rng, k=5, n=40):
    return lattice_tree(np.unique(rng.integers(0, 2**k, size=(n, 3)), axis=0), k)


def iid_tree(rng, k, symbols, probs):
    """A tree whose symbols are drawn i.i.d., independent of every context."""
    out, width = [], 1
    for _ in range(k):
        level = rng.choice(symbols, size=width, p=probs).astype(np.uint8)
        out.append(level)
        width = int(sum(bin(s).count("1") for s in level))
    return deserialize_bfs(np.concatenate(out), [], k)


# -- deep model structure ----------------------------------------------------


def test_k0_equal_contexts_equal_distributions(rng):
    model = E.init_model(K=0, k_max=6, seed=1)
    t = random_tree(rng, 5, 80)
    ctx = t.level_context(3)
    f = model.featurize(ctx)
    f = np.vstack([f, f[:1]])
    probs, _ = E.predict_level(model, f, np.append(ctx.parent, ctx.parent[0]), None)
    np.testing.assert_array_equal(probs[-1], probs[0])


def test_k0_ignores_parent_features():
    model = E.init_model(K=0, k_max=4, seed=2)
    f = model.featurize(root_context())
    a, _ = E.predict_level(model, f, np.array([-1]), None)
    b, _ = E.predict_level(model, f, np.array([0]), [np.ones((1, 128))])
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("aggregation", ["parent", "self"])
def test_k2_matches_recursive_oracle(rng, aggregation):
    model = E.init_model(K=2, k_max=7, seed=4, aggregation=aggregation, features={"L", "P", "LL"})
    t = random_tree(rng, 6, 30)
    data = E.tree_arrays(t, model.k_max)
    expect = oracles.recursive_distributions(model, data.features, data.parent)
    # level-by-level predictor used by the coder
    got = np.concatenate([p for _, p, _ in E.level_distributions(model, t)])
    np.testing.assert_allclose(got, expect, rtol=0, atol=1e-10)
    # whole-tree training forward
    logits, _ = E._tree_forward(model, data.features, data.parent)
    np.testing.assert_allclose(oracles.log_softmax_rows(logits), np.log(expect), rtol=0, atol=1e-10)


def test_missing_parent_cache_raises(rng):
    model = E.init_model(K=1, k_max=5, seed=0)
    t = random_tree(rng, 4, 10)
    ctx = t.level_context(2)
    with pytest.raises(ValueError):
        E.predict_level(model, model.featurize(ctx), ctx.parent, None)


def test_distributions_causal(rng):
    """Level-L distributions depend only on levels above L."""
    model = E.init_model(K=3, k_max=6, seed=5)
    base = np.unique(rng.integers(0, 32, size=(40, 3)), axis=0)
    t1 = lattice_tree(base, 5)
    # move points inside their level-3 cells: levels 0..3 keep their symbols
    moved = (base & ~1) | (1 - (base & 1))
    t2 = lattice_tree(np.unique(moved, axis=0), 5)
    for L in range(4):
        np.testing.assert_array_equal(t1.levels[L].symbols, t2.levels[L].symbols)
    d1 = list(E.level_distributions(model, t1))
    d2 = list(E.level_distributions(model, t2))
    for L in range(5):
        np.testing.assert_array_equal(d1[L][1], d2[L][1])


# -- cross-entropy -------------------------------------------------------------


def _empirical_conditional_entropy(classes, symbols):
    bits = 0.0
    for c in np.unique(classes):
        s = symbols[classes == c]
        p = np.bincount(s, minlength=256) / len(s)
        p = p[p > 0]
        bits -= len(s) * float(np.sum(p * np.log2(p)))
    return bits


def test_uniform_is_eight_bits(rng):
    ce = E.model_cross_entropy(E.UniformModel(), random_tree(rng))
    assert ce.bps == 8.0


def test_gibbs_lower_bound(rng):
    train = [random_tree(rng, 6, 60) for _ in range(5)]
    t = random_tree(rng, 6, 60)
    parent_cls = np.concatenate([t.level_context(L).parent_occupancy for L in range(t.depth_k)]).astype(int)
    one_cls = np.zeros_like(parent_cls)
    deep = E.init_model(K=1, k_max=8, seed=0)
    cases = [
        (E.UniformModel(), one_cls),
        (E.fit_histogram(train, "none"), one_cls),
        (E.fit_histogram(train, "parent_occupancy"), parent_cls),
        (E.fit_histogram([t], "parent_occupancy"), parent_cls),
        (E.HistogramModel("parent_occupancy", adaptive=True), parent_cls),
        (deep, np.arange(t.node_count)),  # every context is distinct
    ]
    for model, cls in cases:
        ce = E.model_cross_entropy(model, t)
        assert ce.symbol_bits >= _empirical_conditional_entropy(cls, t.symbols.astype(int)) - 1e-9


# -- histograms ----------------------------------------------------------------


def test_empty_histogram_is_uniform(rng):
    for cond in ("none", "parent_occupancy"):
        model = E.fit_histogram([], cond)
        np.testing.assert_allclose(model.probs(random_tree(rng).level_context(2)), 1 / 256)


def test_histogram_smoothing_arithmetic():
    model = E.HistogramModel("parent_occupancy")
    model.counts[255, 255] = 25600
    ctx = root_context()
    ctx.parent_occupancy[:] = 255
    p = E.predict_histogram(model, ctx)[0]
    assert p[255] == pytest.approx(25601 / (25600 + 256)) and p[255] > 0.99
    assert E.predict_histogram(model, ctx.node(0))[255] == p[255]


def test_histogram_fit_beats_uniform(rng):
    trees = [random_tree(rng, 6, 50) for _ in range(4)]
    for cond in ("none", "parent_occupancy"):
        model = E.fit_histogram(trees, cond)
        for t in trees:
            assert E.model_cross_entropy(model, t).bps <= 8.0


def test_adaptive_histogram_counts_per_level(rng):
    t = random_tree(rng, 5, 30)
    model = E.HistogramModel("none", adaptive=True)
    pred = model.predictor()
    seen = np.zeros(256)
    for L, lv in enumerate(t.levels):
        p = pred.predict(t.level_context(L))
        np.testing.assert_allclose(p[0], (seen + 1) / (seen + 1).sum())
        pred.update(lv.symbols)
        np.add.at(seen, lv.symbols.astype(int), 1)
    assert not model.counts.any()  # the model itself is untouched


def test_histogram_rejects_unknown_conditioning():
    with pytest.raises(ValueError):
        E.HistogramModel("sibling")


# -- checkpoints ---------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, rng):
    model = E.init_model(K=2, features={"L", "O"}, k_max=9, seed=3, aggregation="self")
    h = E.save_checkpoint(model, tmp_path / "m.ckpt")
    back = E.load_checkpoint(tmp_path / "m.ckpt")
    assert h == model.model_hash == back.model_hash
    assert back.to_bytes() == model.to_bytes()
    assert (back.K, back.features, back.k_max, back.aggregation) == (2, frozenset({"level", "octant"}), 9, "self")
    t = random_tree(rng, 5, 20)
    for (_, a, _), (_, b, _) in zip(E.level_distributions(model, t), E.level_distributions(back, t)):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_corruption():
    data = bytearray(E.init_model(K=1, seed=0).to_bytes())
    with pytest.raises(CorruptStreamError):
        E.load_checkpoint_bytes(bytes(data[:-10]))
    data[100] ^= 4
    with pytest.raises(CorruptStreamError, match="checksum"):
        E.load_checkpoint_bytes(bytes(data))
    with pytest.raises(CorruptStreamError, match="magic"):
        E.load_checkpoint_bytes(b"XXXXX" + bytes(data[5:]))


# -- training ------------------------------------------------------------------


def test_gradients_float32_close_to_float64(rng):
    model = E.init_model(K=2, k_max=6, seed=0)
    batch = E._stack_batch([E.tree_arrays(random_tree(rng, 5, 30), 6)])
    l64, g64 = E.tree_loss_and_grads(model, *batch)
    l32, g32 = E.tree_loss_and_grads(E.cast_model(model, np.float32), *batch)
    assert l32 == pytest.approx(l64, rel=1e-5)
    for a, b in zip(g64, g32):
        assert np.linalg.norm(a - b) <= 1e-3 * np.linalg.norm(a) + 1e-7


def test_memorization():
    # identical single-path trees: every symbol is one bit of the same point
    trees = [lattice_tree([[5, 9, 3]], 5) for _ in range(4)]
    cfg = E.TrainConfig(steps=500, batch=2, K=1, k_max=5, eval_every=100, lr=1e-3)
    res = E.train(cfg, trees[:3], trees[3:])
    assert res.final_val_bps < 0.05


def test_iid_symbols_plateau_at_marginal_entropy():
    rng = np.random.default_rng(8)
    symbols, probs = [1, 6, 16, 255], [0.5, 0.25, 0.125, 0.125]
    trees = [iid_tree(rng, 4, symbols, probs) for _ in range(240)]
    cfg = E.TrainConfig(steps=600, batch=8, K=0, k_max=4, eval_every=200, lr=1e-3, seed=1)
    res = E.train(cfg, trees[:200], trees[200:])
    val = E.split_corpus(trees, 1 / 6)[1]
    counts = np.bincount(np.concatenate([t.symbols for t in trees[200:]]), minlength=256)
    p = counts[counts > 0] / counts.sum()
    h_val = float(-(p * np.log2(p)).sum())
    assert len(val) == 40
    assert abs(res.final_val_bps - h_val) < 0.15


def test_training_is_deterministic(rng):
    trees = [random_tree(rng, 4, 20) for _ in range(4)]
    cfg = E.TrainConfig(steps=5, batch=2, K=1, k_max=4, eval_every=5)
    a = E.train(cfg, trees).model.to_bytes()
    b = E.train(cfg, trees).model.to_bytes()
    c = E.train(E.TrainConfig(steps=5, batch=2, K=1, k_max=4, eval_every=5, seed=9), trees).model.to_bytes()
    assert a == b and a != c


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
def test_divergence_guard(rng):
    trees = [random_tree(rng, 4, 20) for _ in range(3)]
    with pytest.raises(E.TrainingDiverged):
        E.train(E.TrainConfig(steps=50, K=0, k_max=4, lr=1e300, compute_dtype="float64"), trees)


def test_train_rejects_deep_trees(rng):
    with pytest.raises(ValueError):
        E.train(E.TrainConfig(steps=1, k_max=3), [random_tree(rng, 5, 10)] * 2)


def test_history_csv(tmp_path, rng):
    trees = [random_tree(rng, 4, 20) for _ in range(3)]
    res = E.train(E.TrainConfig(steps=4, K=0, k_max=4, eval_every=2), trees)
    path = tmp_path / "loss.csv"
    E.write_history_csv(res.history, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["step", "train_nats", "val_bits_per_symbol"]
    assert len(rows) == 5 and rows[1][2] == "" and float(rows[2][2]) == res.history[1][2]

    # a briefly trained model is already better than the uniform 8 bits
    short = E.train(E.TrainConfig(steps=40, K=0, k_max=4, eval_every=40, lr=1e-3), trees)
    assert short.final_val_bps <= 8.0


def test_ablate_rows(tmp_path, rng):
    trees = [random_tree(rng, 4, 20) for _ in range(4)]
    base = E.TrainConfig(steps=2, k_max=4, eval_every=2)
    cells = E.feature_grid(base) + E.aggregation_grid(base, ks=(0, 1))
    assert [c.name for c in cells] == ["L", "L+P", "L+P+O", "L+P+O+LL", "K=0", "K=1"]
    rows = E.ablate(cells, trees, out_csv=tmp_path / "ab.csv")
    assert [r["cell"] for r in rows] == [c.name for c in cells]
    assert all(np.isfinite(r["bits_per_symbol"]) and r["bits_per_symbol"] > 0 for r in rows)
    assert len(list(csv.reader(open(tmp_path / "ab.csv")))) == 7


def test_split_corpus():
    tr, va = E.split_corpus(list(range(64)), 0.2)
    assert tr == list(range(51)) and va == list(range(51, 64))
    tr, va = E.split_corpus([1, 2], 0.01)
    assert len(tr) == 1 and len(va) == 1
