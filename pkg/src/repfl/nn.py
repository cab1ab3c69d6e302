"""Feedforward encoder and classifier heads with hand-written backprop.

Parameters are immutable value objects: every update produces a new
``EncoderParams``/``HeadParams``. Weight matrices are stored ``(fan_in,
fan_out)`` so a layer computes ``x @ W + b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, DataError, NumericError, ShapeError
from .numerics import as_matrix, init_params

HEAD_KINDS = ("logistic", "linear-svm", "mlp")
ACTIVATIONS = ("relu", "none")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LayerStack:
    weights: tuple
    biases: tuple
    activations: tuple

    def __post_init__(self):
        ws = tuple(_frozen(as_matrix(w)) for w in self.weights)
        bs = tuple(_frozen(np.ravel(b)) for b in self.biases)
        acts = tuple(self.activations)
        if not ws:
            raise ShapeError("a layer stack needs at least one layer")
        if not (len(ws) == len(bs) == len(acts)):
            raise ShapeError("weights, biases and activations differ in length")
        for k, (w, b, act) in enumerate(zip(ws, bs, acts)):
            if act not in ACTIVATIONS:
                raise ShapeError(f"layer {k}: unknown activation {act!r}")
            if b.shape != (w.shape[1],):
                raise ShapeError(f"layer {k}: bias {b.shape} does not match weight {w.shape}")
            if k and ws[k - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {k}: input dim {w.shape[0]} != previous output {ws[k - 1].shape[1]}")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "activations", acts)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dims(self) -> tuple:
        return (self.in_dim,) + tuple(w.shape[1] for w in self.weights)

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def shapes(self) -> list:
        return [a.shape for a in self.arrays()]

    def with_arrays(self, arrays):
        arrays = list(arrays)
        if [np.shape(a) for a in arrays] != self.shapes():
            raise ShapeError("replacement arrays do not match parameter shapes")
        return replace(self, weights=tuple(arrays[0::2]), biases=tuple(arrays[1::2]))

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        sizes = [int(np.prod(s)) for s in self.shapes()]
        if vector.shape != (sum(sizes),):
            raise ShapeError(f"flat vector has shape {vector.shape}, expected ({sum(sizes)},)")
        parts, start = [], 0
        for shape, size in zip(self.shapes(), sizes):
            parts.append(vector[start:start + size].reshape(shape))
            start += size
        return self.with_arrays(parts)

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())


@dataclass(frozen=True)
class EncoderParams(LayerStack):
    """Representation model: ReLU hidden layers and a linear output of width g."""

    @property
    def g(self) -> int:
        return self.out_dim


@dataclass(frozen=True)
class HeadParams(LayerStack):
    kind: str = "logistic"

    def __post_init__(self):
        super().__post_init__()
        if self.kind not in HEAD_KINDS:
            raise ShapeError(f"unknown head kind {self.kind!r}")
        if self.kind != "mlp" and len(self.weights) != 1:
            raise ShapeError(f"{self.kind} head must be a single linear layer")


def _init_stack(dims, rng):
    gen = rng.generator() if hasattr(rng, "generator") else rng
    weights = [init_params((a, b), gen) for a, b in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(b) for b in dims[1:]]
    return weights, biases


def init_encoder(dims, rng) -> EncoderParams:
    """Build an MLP encoder ``dims[0] -> ... -> dims[-1]``.

    The output width must be strictly below the input width.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) <= 0:
        raise ShapeError(f"invalid encoder dims {dims}")
    if dims[-1] >= dims[0]:
        raise ShapeError(f"encoder output dim {dims[-1]} must be below input dim {dims[0]}")
    weights, biases = _init_stack(dims, rng)
    acts = ["relu"] * (len(dims) - 2) + ["none"]
    return EncoderParams(tuple(weights), tuple(biases), tuple(acts))


def init_head(kind: str, g: int, num_classes: int, rng, hidden: int = 64) -> HeadParams:
    if kind not in HEAD_KINDS:
        raise ShapeError(f"unknown head kind {kind!r}")
    dims = [g, hidden, num_classes] if kind == "mlp" else [g, num_classes]
    weights, biases = _init_stack(dims, rng)
    acts = ["relu", "none"] if kind == "mlp" else ["none"]
    return HeadParams(tuple(weights), tuple(biases), tuple(acts), kind=kind)


@dataclass
class ForwardCache:
    params: LayerStack
    inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)
    output_shape: tuple = ()


def stack_forward(params: LayerStack, x):
    x = as_matrix(x)
    if x.shape[1] != params.in_dim:
        raise ShapeError(f"input has {x.shape[1]} columns, expected {params.in_dim}")
    cache = ForwardCache(params)
    h = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        cache.inputs.append(h)
        pre = h @ w + b
        cache.preacts.append(pre)
        h = np.maximum(pre, 0.0) if act == "relu" else pre
    cache.output_shape = h.shape
    return h, cache


def stack_backward(cache: ForwardCache, grad_out):
    """Backpropagate ``grad_out`` through a cached forward pass.

    Returns ``(grads, grad_input)`` where ``grads`` follows
    ``params.arrays()`` order.
    """
    grad_out = as_matrix(grad_out)
    if not cache.inputs:
        raise ContractError("backward called with an empty cache")
    if grad_out.shape != cache.output_shape:
        raise ContractError(
            f"upstream gradient {grad_out.shape} does not match cached output {cache.output_shape}")
    params = cache.params
    grads = [None] * (2 * len(params.weights))
    g = grad_out
    for k in reversed(range(len(params.weights))):
        if params.activations[k] == "relu":
            g = g * (cache.preacts[k] > 0)
        grads[2 * k] = cache.inputs[k].T @ g
        grads[2 * k + 1] = g.sum(axis=0)
        g = g @ params.weights[k].T
    return grads, g


def encoder_forward(phi: EncoderParams, batch):
    return stack_forward(phi, batch)


def encoder_backward(cache: ForwardCache, grad_r):
    return stack_backward(cache, grad_r)


def _check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DataError("labels must be one-dimensional")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes})")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def multiclass_hinge(scores, labels, margin: float = 1.0):
    """Crammer-Singer hinge ``max(0, margin + max_{k!=y} s_k - s_y)``, averaged."""
    n = scores.shape[0]
    rows = np.arange(n)
    others = scores.copy()
    others[rows, labels] = -np.inf
    rival = others.argmax(axis=1)
    slack = margin + others[rows, rival] - scores[rows, labels]
    active = slack > 0
    grad = np.zeros_like(scores)
    grad[rows[active], rival[active]] = 1.0
    grad[rows[active], labels[active]] = -1.0
    return float(np.where(active, slack, 0.0).mean()), grad / n


def head_logits(theta: HeadParams, r):
    out, _ = stack_forward(theta, r)
    return out


def head_forward_loss(theta: HeadParams, r, labels, input_grad: bool = False):
    """Classification loss of a head on features ``r``.

    Returns ``(loss, grads, grad_r)``; ``grad_r`` is None unless requested.
    """
    labels = _check_labels(labels, theta.out_dim)
    scores, cache = stack_forward(theta, r)
    if scores.shape[0] != labels.shape[0]:
        raise DataError("features and labels differ in length")
    if theta.kind == "linear-svm":
        loss, grad_scores = multiclass_hinge(scores, labels)
    else:
        loss, grad_scores = softmax_cross_entropy(scores, labels)
    grads, grad_r = stack_backward(cache, grad_scores)
    return loss, grads, (grad_r if input_grad else None)


def predict(theta: HeadParams, r) -> np.ndarray:
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return head_logits(theta, r).argmax(axis=1)


@dataclass
class OptimizerState:
    """Mutable optimizer state owned by a single training task."""

    kind: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = None
    v: list = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(state: OptimizerState, params, grads, client=None):
    """Apply one update and return the new parameter arrays.

    SGD folds weight decay into the gradient; Adam applies it decoupled from
    the moment estimates.
    """
    params = [np.asarray(p, dtype=np.float64) for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if [p.shape for p in params] != [g.shape for g in grads]:
        raise ShapeError("gradient shapes do not match parameter shapes")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericError(f"non-finite gradient (client {client})", client=client)
    lr, wd = state.lr, state.weight_decay
    state.step += 1
    if state.kind == "sgd":
        return [p - lr * (g + wd * p) for p, g in zip(params, grads)]
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        out.append(p - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + wd * p))
    return out
