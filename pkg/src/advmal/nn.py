"""Dense feedforward classifiers in plain numpy.

Everything here works on float64 row batches: ``X`` has shape ``(n, d)``
and layer ``i`` computes ``act(X @ W_i + b_i)``.  The final layer's
pre-activation is divided by the network temperature before the head
activation is applied.

Besides forward inference and Adam training this module provides exact
input derivatives (class-probability Jacobians and cross-entropy loss
gradients), which is what every attack in :mod:`advmal.attacks` consumes.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, TrainingError

ACTIVATIONS = ("relu", "softmax", "sigmoid", "linear")
LOSSES = ("cross_entropy", "soft_cross_entropy", "binary_cross_entropy")
CHECKPOINT_VERSION = 1
PROB_FLOOR = 1e-12

VICTIM_HIDDEN = (300, 250, 200, 128)


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "relu"
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError(f"layer dims must be positive, got {self.input_dim}->{self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


def dense_specs(
    n_in: int,
    hidden: Sequence[int],
    n_out: int = 2,
    head: str = "softmax",
    dropout: float = 0.0,
) -> list[LayerSpec]:
    """ReLU hidden stack ``n_in -> hidden... -> n_out`` with the given head."""
    sizes = [n_in, *hidden]
    specs = [LayerSpec(a, b, "relu", dropout) for a, b in zip(sizes[:-1], sizes[1:])]
    specs.append(LayerSpec(sizes[-1], n_out, head))
    return specs


def victim_specs(n_in: int) -> list[LayerSpec]:
    """The 300/250/200/128 ReLU victim with a two-way softmax head."""
    return dense_specs(n_in, VICTIM_HIDDEN)


@dataclass
class Network:
    specs: tuple[LayerSpec, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    temperature: float = 1.0

    def __post_init__(self):
        self.specs = tuple(self.specs)
        _check_chain(self.specs)
        if len(self.weights) != len(self.specs) or len(self.biases) != len(self.specs):
            raise ValueError("one weight matrix and bias vector per layer required")
        for s, w, b in zip(self.specs, self.weights, self.biases):
            if w.shape != (s.input_dim, s.output_dim) or b.shape != (s.output_dim,):
                raise ValueError(
                    f"parameter shapes {w.shape}/{b.shape} do not match layer {s.input_dim}->{s.output_dim}"
                )
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    @property
    def n_features(self) -> int:
        return self.specs[0].input_dim

    @property
    def n_outputs(self) -> int:
        return self.specs[-1].output_dim

    @property
    def head(self) -> str:
        return self.specs[-1].activation

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def with_temperature(self, temperature: float) -> "Network":
        out = self.copy()
        out.temperature = float(temperature)
        return out

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
        h.update(repr(self.temperature).encode())
        return h.hexdigest()

    # Predictor interface shared with the defense wrappers.
    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return forward(self, np.atleast_2d(X))

    def jacobian(self, X: np.ndarray) -> np.ndarray:
        return input_jacobian(self, np.atleast_2d(X))

    def loss_gradient(self, X: np.ndarray, y) -> np.ndarray:
        X = np.atleast_2d(X)
        return input_loss_gradient(self, X, np.broadcast_to(y, (X.shape[0],)))


def _check_chain(specs: Sequence[LayerSpec]) -> None:
    if not specs:
        raise ValueError("a network needs at least one layer")
    for i, (a, b) in enumerate(zip(specs[:-1], specs[1:])):
        if a.output_dim != b.input_dim:
            raise ValueError(f"layer {i} outputs {a.output_dim} but layer {i + 1} expects {b.input_dim}")
    for s in specs[:-1]:
        if s.activation == "softmax":
            raise ValueError("softmax is only permitted on the final layer")


def init_network(specs: Sequence[LayerSpec], seed: int, temperature: float = 1.0) -> Network:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    specs = tuple(specs)
    _check_chain(specs)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for s in specs:
        limit = np.sqrt(6.0 / (s.input_dim + s.output_dim))
        weights.append(rng.uniform(-limit, limit, size=(s.input_dim, s.output_dim)))
        biases.append(np.zeros(s.output_dim))
    return Network(specs, weights, biases, temperature)


# --------------------------------------------------------------------------- activations

def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "softmax":
        return softmax(z)
    return z


def _activation_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # Elementwise derivative for hidden layers; softmax never appears here.
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    """Inverted-dropout mask: kept units are scaled by ``1 / (1 - rate)``."""
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


# --------------------------------------------------------------------------- forward / backward

@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)   # input to each layer, post-dropout
    preacts: list[np.ndarray] = field(default_factory=list)
    acts: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)
    temperature: float = 1.0

    @property
    def output(self) -> np.ndarray:
        return self.acts[-1]


def _as_batch(net: Network, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.n_features:
        raise DataError(f"expected input of width {net.n_features}, got shape {X.shape}")
    return X


def forward_cached(
    net: Network,
    X: np.ndarray,
    temperature: float | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> ForwardCache:
    """Forward pass keeping every intermediate; dropout only if a generator is given."""
    T = net.temperature if temperature is None else float(temperature)
    cache = ForwardCache(temperature=T)
    a = _as_batch(net, X)
    last = len(net.specs) - 1
    for i, (s, W, b) in enumerate(zip(net.specs, net.weights, net.biases)):
        cache.inputs.append(a)
        z = a @ W + b
        if i == last:
            out = _activate(s.activation, z / T)
        else:
            out = _activate(s.activation, z)
        cache.preacts.append(z)
        cache.acts.append(out)
        mask = None
        if i != last and dropout_rng is not None and s.dropout_rate > 0:
            mask = dropout_mask(dropout_rng, out.shape, s.dropout_rate)
            out = out * mask
        cache.masks.append(mask)
        a = out
    return cache


def backward(
    net: Network,
    cache: ForwardCache,
    grad_logits: np.ndarray,
    need_params: bool = True,
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Backpropagate a gradient w.r.t. the final pre-activation (before temperature).

    Returns ``(weight_grads, bias_grads, input_grad)``; parameter lists are
    empty when ``need_params`` is false.
    """
    g = grad_logits
    gW: list[np.ndarray] = []
    gb: list[np.ndarray] = []
    for i in range(len(net.specs) - 1, -1, -1):
        if need_params:
            gW.append(cache.inputs[i].T @ g)
            gb.append(g.sum(axis=0))
        g = g @ net.weights[i].T
        if i > 0:
            if cache.masks[i - 1] is not None:
                g = g * cache.masks[i - 1]
            prev = net.specs[i - 1].activation
            g = g * _activation_grad(prev, cache.preacts[i - 1], cache.acts[i - 1])
    gW.reverse()
    gb.reverse()
    return gW, gb, g


def head_grad_to_logits(net: Network, cache: ForwardCache, grad_out: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. head outputs back to the raw final pre-activation."""
    p = cache.output
    T = cache.temperature
    head = net.head
    if head == "softmax":
        dz = p * (grad_out - np.sum(grad_out * p, axis=1, keepdims=True))
    elif head == "sigmoid":
        dz = grad_out * p * (1.0 - p)
    elif head == "relu":
        dz = grad_out * (cache.preacts[-1] > 0)
    else:
        dz = grad_out
    return dz / T


def forward(net: Network, x, temperature: float | None = None) -> np.ndarray:
    """Inference-mode output: probability vector(s) for softmax/sigmoid heads.

    A 1-D ``x`` yields a 1-D result, a 2-D batch yields one row per input.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = forward_cached(net, np.atleast_2d(x), temperature).output
    return out[0] if single else out


def logits(net: Network, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return forward_cached(net, X).preacts[-1]


def input_jacobian(net: Network, x, temperature: float | None = None) -> np.ndarray:
    """d(output_c)/d(x_j).  Shape ``(C, d)`` for one sample, ``(n, C, d)`` for a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    cache = forward_cached(net, X, temperature)
    C = net.n_outputs
    J = np.empty((X.shape[0], C, X.shape[1]))
    for c in range(C):
        seed = np.zeros((X.shape[0], C))
        seed[:, c] = 1.0
        dz = head_grad_to_logits(net, cache, seed)
        J[:, c, :] = backward(net, cache, dz, need_params=False)[2]
    return J[0] if single else J


def _targets(net: Network, y, n: int) -> np.ndarray:
    """Label vector or probability matrix -> target matrix matching the head."""
    y = np.asarray(y)
    C = net.n_outputs
    if y.ndim == 2:
        if y.shape != (n, C):
            raise DataError(f"soft labels must have shape {(n, C)}, got {y.shape}")
        return y.astype(np.float64)
    if y.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {y.shape}")
    if net.head == "sigmoid" and C == 1:
        if np.any((y < 0) | (y > 1)):
            raise DataError("binary targets must lie in [0, 1]")
        return y.astype(np.float64).reshape(n, 1)
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(y != np.round(y)):
            raise DataError("class labels must be integers")
        y = y.astype(np.int64)
    if np.any((y < 0) | (y >= C)):
        raise DataError(f"label out of range for {C} classes")
    return np.eye(C)[y]


def loss_and_grad(net: Network, cache: ForwardCache, Y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. the raw final pre-activation."""
    p = cache.output
    n = p.shape[0]
    T = cache.temperature
    if net.head == "softmax":
        loss = -np.sum(Y * np.log(np.clip(p, PROB_FLOOR, 1.0))) / n
        return float(loss), (p - Y) / (T * n)
    if net.head == "sigmoid":
        pc = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
        loss = -np.sum(Y * np.log(pc) + (1 - Y) * np.log(1 - pc)) / n
        return float(loss), (p - Y) / (T * n)
    raise TrainingError(f"no loss defined for a {net.head} head")


def loss(net: Network, X, y, temperature: float | None = None) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    cache = forward_cached(net, X, temperature)
    return loss_and_grad(net, cache, _targets(net, y, X.shape[0]))[0]


def per_sample_loss(net: Network, X, y) -> np.ndarray:
    """Cross-entropy of each row separately (no averaging)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    p = forward_cached(net, X).output
    Y = _targets(net, y, X.shape[0])
    if net.head == "sigmoid":
        pc = np.clip(p, PROB_FLOOR, 1 - PROB_FLOOR)
        return -np.sum(Y * np.log(pc) + (1 - Y) * np.log(1 - pc), axis=1)
    return -np.sum(Y * np.log(np.clip(p, PROB_FLOOR, 1.0)), axis=1)


def input_loss_gradient(net: Network, x, y, temperature: float | None = None) -> np.ndarray:
    """Gradient of the per-sample cross-entropy at ``(x, y)`` w.r.t. ``x``.

    For a batch each row gets the gradient of its own loss (not of the mean).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    y = np.atleast_1d(np.asarray(y))
    cache = forward_cached(net, X, temperature)
    _, dz = loss_and_grad(net, cache, _targets(net, y, X.shape[0]))
    g = backward(net, cache, dz * X.shape[0], need_params=False)[2]
    return g[0] if single else g


def parameter_gradients(net: Network, X, y) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients of the mean batch loss w.r.t. every weight and bias (inference mode)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    cache = forward_cached(net, X)
    _, dz = loss_and_grad(net, cache, _targets(net, y, X.shape[0]))
    gW, gb, _ = backward(net, cache, dz)
    return gW, gb


# --------------------------------------------------------------------------- optimisation

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    loss: str = "cross_entropy"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.learning_rate > 0):
            raise ValueError("require 0 < beta1, beta2 < 1 and learning_rate > 0")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)


BatchTransform = Callable[[Network, np.ndarray, np.ndarray, np.random.Generator], np.ndarray]


def train(
    net: Network,
    X,
    y,
    cfg: TrainConfig,
    batch_transform: BatchTransform | None = None,
    history: list[float] | None = None,
) -> Network:
    """Mini-batch Adam on a copy of ``net``; the input network is left untouched.

    ``y`` is a label vector or, for ``soft_cross_entropy``, a probability
    matrix.  ``batch_transform(net, Xb, yb, rng)`` may rewrite each batch
    against the current parameters (adversarial training, feature masking);
    it draws from its own random stream so the shuffle order and dropout
    masks do not depend on whether a transform is present.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise DataError("cannot train on an empty dataset")
    X = _as_batch(net, X)
    if cfg.loss == "soft_cross_entropy" and np.asarray(y).ndim != 2:
        raise DataError("soft_cross_entropy needs a probability matrix")
    if cfg.loss == "binary_cross_entropy" and net.head != "sigmoid":
        raise TrainingError("binary_cross_entropy needs a sigmoid head")
    Y = _targets(net, y, n)
    labels = np.asarray(y)

    out = net.copy()
    params = out.parameters()
    state = AdamState.zeros_like(params)
    shuffle_ss, dropout_ss, transform_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)
    transform_rng = np.random.default_rng(transform_ss)
    uses_dropout = any(s.dropout_rate > 0 for s in out.specs[:-1])

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            Xb = X[idx]
            if batch_transform is not None:
                Xb = batch_transform(out, Xb, labels[idx], transform_rng)
            cache = forward_cached(out, Xb, dropout_rng=dropout_rng if uses_dropout else None)
            batch_loss, dz = loss_and_grad(out, cache, Y[idx])
            gW, gb, _ = backward(out, cache, dz)
            grads = [g for pair in zip(gW, gb) for g in pair]
            adam_step(params, grads, state, cfg)
            total += batch_loss * len(idx)
        mean_loss = total / n
        if not np.isfinite(mean_loss):
            raise TrainingError(f"training loss became non-finite in epoch {epoch}")
        if history is not None:
            history.append(mean_loss)
    for p in params:
        if not np.all(np.isfinite(p)):
            raise TrainingError("training produced non-finite parameters")
    return out


# --------------------------------------------------------------------------- checkpoints

def network_to_dict(net: Network) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "layer_specs": [
            {
                "input_dim": s.input_dim,
                "output_dim": s.output_dim,
                "activation": s.activation,
                "dropout_rate": s.dropout_rate,
            }
            for s in net.specs
        ],
        "weights": [w.ravel().tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "temperature": net.temperature,
    }


def network_from_dict(doc: dict) -> Network:
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {doc.get('version')!r}")
    specs = tuple(LayerSpec(**s) for s in doc["layer_specs"])
    weights = [
        np.asarray(w, dtype=np.float64).reshape(s.input_dim, s.output_dim)
        for s, w in zip(specs, doc["weights"])
    ]
    biases = [np.asarray(b, dtype=np.float64) for b in doc["biases"]]
    return Network(specs, weights, biases, float(doc["temperature"]))


def save_network(net: Network, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(network_to_dict(net)))
    return path


def load_network(path) -> Network:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return network_from_dict(doc)
