"""Dense ReLU networks with hand-written backprop and stochastic optimizers.

Inputs may be a single vector of shape ``(n,)`` or a batch of shape ``(B, n)``.
For batches, parameter gradients are summed over the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

CHECKPOINT_VERSION = 1


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class MlpNet:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int | None = None

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError(f"bad layer sizes {self.layer_sizes}")
        if len(self.weights) != len(self.layer_sizes) - 1:
            raise ValueError("one weight matrix per layer transition expected")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[k + 1], self.layer_sizes[k])
            if W.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"layer {k}: expected W{shape}, got W{W.shape} b{b.shape}")

    @classmethod
    def create(cls, layer_sizes, seed=0) -> MlpNet:
        """Glorot-uniform weights, zero biases, from a seeded generator."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            lim = np.sqrt(6.0 / (n_in + n_out))
            weights.append(rng.uniform(-lim, lim, size=(n_out, n_in)))
            biases.append(np.zeros(n_out))
        return cls(list(layer_sizes), weights, biases, seed)

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        """Parameter arrays interleaved as [W0, b0, W1, b1, ...]."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> MlpNet:
        return MlpNet(
            list(self.layer_sizes),
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.seed,
        )

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} values, got {flat.size}")
        i = 0
        for p in self.params():
            p[...] = flat[i : i + p.size].reshape(p.shape)
            i += p.size

    def __call__(self, x):
        return forward(self, x)


class Grads(NamedTuple):
    weights: list
    biases: list

    def flat(self) -> np.ndarray:
        parts = []
        for dW, db in zip(self.weights, self.biases):
            parts += [dW.ravel(), db.ravel()]
        return np.concatenate(parts)

    def scaled(self, s) -> Grads:
        return Grads([s * g for g in self.weights], [s * g for g in self.biases])

    def __add__(self, other):
        return Grads(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )


def zero_grads(net: MlpNet) -> Grads:
    return Grads([np.zeros_like(W) for W in net.weights], [np.zeros_like(b) for b in net.biases])


def _check_input(net, x):
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[-1] != net.n_in:
        raise ValueError(f"input of shape {x.shape} does not match network input size {net.n_in}")
    return x


def _forward_trace(net, x):
    """Returns the list of layer inputs (post-activation) and the output."""
    acts = [x]
    a = x
    last = len(net.weights) - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = W @ a + b if a.ndim == 1 else a @ W.T + b
        a = z if k == last else np.maximum(z, 0.0)
        acts.append(a)
    return acts


def forward(net: MlpNet, x) -> np.ndarray:
    x = _check_input(net, x)
    return _forward_trace(net, x)[-1]


def backward(net: MlpNet, x, out_grad) -> tuple[Grads, np.ndarray]:
    """Vector-Jacobian product of the network at ``x`` with ``out_grad``.

    Returns the parameter gradients (summed over a batch) and the gradient
    with respect to the input.
    """
    x = _check_input(net, x)
    g = np.asarray(out_grad, dtype=float)
    if g.shape != x.shape[:-1] + (net.n_out,):
        raise ValueError(f"out_grad of shape {g.shape} does not match output size {net.n_out}")
    acts = _forward_trace(net, x)
    n_layers = len(net.weights)
    dWs, dbs = [None] * n_layers, [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        a_in = acts[k]
        if k < n_layers - 1:
            # ReLU subgradient at zero taken as 0
            g = g * (acts[k + 1] > 0.0)
        if g.ndim == 1:
            dWs[k] = np.outer(g, a_in)
            dbs[k] = g.copy()
            g = net.weights[k].T @ g
        else:
            dWs[k] = g.T @ a_in
            dbs[k] = g.sum(axis=0)
            g = g @ net.weights[k]
    return Grads(dWs, dbs), g


@dataclass
class PenultimateFeatures:
    """Last hidden activations and the output layer viewed as a weight vector.

    ``head`` is the output weight matrix flattened row-major, so that the
    network output is ``head.reshape(n_out, -1) @ features + bias``.
    """

    features: np.ndarray
    head: np.ndarray
    bias: np.ndarray

    @property
    def n_out(self) -> int:
        return self.bias.size

    def recombine(self, head=None) -> np.ndarray:
        head = self.head if head is None else head
        return head.reshape(self.n_out, self.features.size) @ self.features + self.bias

    def regressor(self) -> np.ndarray:
        """Matrix Xi with Xi @ head == output - bias."""
        return np.kron(np.eye(self.n_out), self.features)


def features_and_head(net: MlpNet, x) -> PenultimateFeatures:
    if len(net.weights) < 2:
        raise ValueError("network has no hidden layer")
    x = _check_input(net, x)
    if x.ndim != 1:
        raise ValueError("features_and_head expects a single input vector")
    acts = _forward_trace(net, x)
    return PenultimateFeatures(acts[-2], net.weights[-1].ravel().copy(), net.biases[-1].copy())


@dataclass
class OptimState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    alpha: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("adam", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def for_net(cls, net: MlpNet, kind="adam", learning_rate=1e-3, **kw) -> OptimState:
        st = cls(kind=kind, learning_rate=learning_rate, **kw)
        st.m = [np.zeros_like(p) for p in net.params()]
        st.v = [np.zeros_like(p) for p in net.params()]
        return st


def opt_step(net: MlpNet, opt: OptimState, grads: Grads) -> None:
    """Apply one optimizer update to ``net`` in place."""
    flat_grads = []
    for k, (dW, db) in enumerate(zip(grads.weights, grads.biases)):
        if not (np.all(np.isfinite(dW)) and np.all(np.isfinite(db))):
            raise NonFiniteGradientError(f"non-finite gradient in layer {k}")
        flat_grads += [dW, db]
    params = net.params()
    if len(flat_grads) != len(params) or any(g.shape != p.shape for g, p in zip(flat_grads, params)):
        raise ValueError("gradient structure does not match network parameters")
    if not opt.m:
        opt.m = [np.zeros_like(p) for p in params]
        opt.v = [np.zeros_like(p) for p in params]
    opt.step += 1
    lr = opt.learning_rate
    if opt.kind == "adam":
        c1 = 1.0 - opt.beta1**opt.step
        c2 = 1.0 - opt.beta2**opt.step
        for p, g, m, v in zip(params, flat_grads, opt.m, opt.v):
            m *= opt.beta1
            m += (1.0 - opt.beta1) * g
            v *= opt.beta2
            v += (1.0 - opt.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    else:
        for p, g, v in zip(params, flat_grads, opt.v):
            v *= opt.alpha
            v += (1.0 - opt.alpha) * g * g
            p -= lr * g / (np.sqrt(v) + opt.eps)


# checkpoints ------------------------------------------------------------


def net_to_dict(net: MlpNet) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "layer_sizes": list(net.layer_sizes),
        "seed": net.seed,
        "weights": [W.ravel().tolist() for W in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def net_from_dict(d: dict) -> MlpNet:
    if d.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('format_version')!r}")
    sizes = [int(s) for s in d["layer_sizes"]]
    weights = [
        np.array(w, dtype=float).reshape(n_out, n_in)
        for w, n_in, n_out in zip(d["weights"], sizes[:-1], sizes[1:])
    ]
    biases = [np.array(b, dtype=float) for b in d["biases"]]
    return MlpNet(sizes, weights, biases, d.get("seed"))


def save_net(net: MlpNet, path) -> None:
    with open(path, "w") as fh:
        json.dump(net_to_dict(net), fh, indent=1)


def load_net(path) -> MlpNet:
    with open(path) as fh:
        return net_from_dict(json.load(fh))
