"""A small fixed-topology dense network engine (float64 unless the weights say otherwise).

Only what the entropy model needs: Linear+ReLU stacks with an optional skip
connection, softmax cross-entropy, explicit backward passes and Adam.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

LN2 = np.log(2.0)

_versions = itertools.count(1)


class StaleCacheError(RuntimeError):
    pass


@dataclass(eq=False)
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def shape(self):
        return self.weights.shape


@dataclass(eq=False)
class MlpStack:
    """Linear layers, each followed by ReLU unless ``final_relu`` is off for the last.

    With ``residual`` the first ``out`` columns of the input are added to the
    output, so the input may be wider than the output (a concatenation whose
    first operand is the skip path).
    """

    layers: list[DenseLayer]
    residual: bool = False
    final_relu: bool = True
    version: int = field(default_factory=lambda: next(_versions))

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if b.shape[1] != a.shape[0]:
                raise ValueError(f"layer widths do not chain: {a.shape} -> {b.shape}")
        if self.residual and self.in_dim < self.out_dim:
            raise ValueError("residual stack needs input at least as wide as its output")

    @property
    def in_dim(self) -> int:
        return self.layers[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def touch(self) -> None:
        """Mark parameters as modified; invalidates outstanding caches."""
        self.version = next(_versions)


@dataclass
class ForwardCache:
    stack_id: int
    version: int
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]


def init_params(widths, seed=0, residual=False, final_relu=True, rng=None) -> MlpStack:
    """He-uniform weights, zero biases. ``widths`` lists layer sizes input first."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        layers.append(DenseLayer(rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return MlpStack(layers, residual=residual, final_relu=final_relu)


def cast_stack(stack: MlpStack, dtype) -> MlpStack:
    """Copy of ``stack`` with parameters in ``dtype``."""
    layers = [DenseLayer(l.weights.astype(dtype), l.bias.astype(dtype)) for l in stack.layers]
    return MlpStack(layers, residual=stack.residual, final_relu=stack.final_relu)


def forward(stack: MlpStack, x: np.ndarray, keep_cache=True):
    x = np.asarray(x, dtype=stack.layers[0].weights.dtype)
    if x.ndim != 2 or x.shape[1] != stack.in_dim:
        raise ValueError(f"expected input of width {stack.in_dim}, got shape {x.shape}")
    inputs, outputs = [], []
    h = x
    last = len(stack.layers) - 1
    for i, layer in enumerate(stack.layers):
        inputs.append(h)
        h = h @ layer.weights.T
        h += layer.bias
        if i < last or stack.final_relu:
            np.maximum(h, 0.0, out=h)
        outputs.append(h)
    if stack.residual:
        h = h + x[:, : stack.out_dim]
    cache = ForwardCache(id(stack), stack.version, inputs, outputs) if keep_cache else None
    return h, cache


def backward(stack: MlpStack, cache: ForwardCache, grad_out: np.ndarray, need_input_grad=True):
    """Return ``(grad wrt input, [dW0, db0, dW1, db1, ...])``."""
    if cache is None or cache.stack_id != id(stack) or cache.version != stack.version:
        raise StaleCacheError("forward cache does not belong to the current parameters")
    grad_out = np.asarray(grad_out, dtype=cache.inputs[0].dtype)
    g = grad_out
    last = len(stack.layers) - 1
    per_layer = [None] * len(stack.layers)
    for i in range(last, -1, -1):
        layer = stack.layers[i]
        if i < last or stack.final_relu:
            g = g * (cache.outputs[i] > 0)
        per_layer[i] = (g.T @ cache.inputs[i], g.sum(axis=0))
        if i > 0 or need_input_grad:
            g = g @ layer.weights
    grads = [t for pair in per_layer for t in pair]
    if not need_input_grad:
        return None, grads
    if stack.residual:
        g[:, : stack.out_dim] += grad_out
    return g, grads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over rows.

    Returns ``(loss_nats, loss_bits, grad)`` with ``grad`` the derivative of
    the mean loss with respect to ``logits``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    n = len(targets)
    lp = log_softmax(logits)
    nll = -lp[np.arange(n), targets]
    loss = float(nll.mean())
    grad = np.exp(lp)
    grad[np.arange(n), targets] -= 1.0
    grad /= n
    return loss, loss / LN2, grad


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter/gradient count mismatch")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
