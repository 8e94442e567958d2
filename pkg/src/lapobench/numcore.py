"""Small dense numeric core: feed-forward networks with reverse-mode
gradients, Adam, and categorical-distribution helpers.

Everything is float64. Networks store weights as ``(fan_in, fan_out)`` so a
layer computes ``act(x @ W + b)`` on row-major batches.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax as _log_softmax, softmax as _softmax

log = logging.getLogger(__name__)

ACTIVATIONS = ("sigmoid", "tanh", "identity")
SIMPLEX_TOL = 1e-9


def _activate(tag: str, z: np.ndarray) -> np.ndarray:
    if tag == "sigmoid":
        return expit(z)
    if tag == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(tag: str, y: np.ndarray) -> np.ndarray | float:
    # derivative expressed through the activation output
    if tag == "sigmoid":
        return y * (1.0 - y)
    if tag == "tanh":
        return 1.0 - y * y
    return 1.0


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "tanh"
    frozen: bool = False

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(f"bad layer shapes W{self.weight.shape} b{self.bias.shape}")


@dataclass
class Gradient:
    """Loss gradient for every layer of a network, plus the input gradient."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray | None = None

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def __add__(self, other: Gradient) -> Gradient:
        return Gradient(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )


class Network:
    """Feed-forward network ``act_L(... act_1(x W_1 + b_1) ... W_L + b_L)``.

    ``forward`` records the activations it needs; ``backward`` consumes the
    most recent record and returns the exact gradient of ``sum(upstream *
    output)`` with respect to every parameter and to the input.
    """

    def __init__(self, layers: list[Layer], seed: int | None = None):
        if not layers:
            raise ValueError("a network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ValueError(
                    f"layer dimensions do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )
        self.layers = layers
        self.seed = seed
        self._tape: list[np.ndarray] | None = None
        self._squeeze = False

    @classmethod
    def init(cls, dims: list[int], activations: list[str], seed: int) -> Network:
        """Glorot-uniform initialisation, deterministic in ``seed``."""
        if len(activations) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        rng = np.random.default_rng(seed)
        layers = []
        for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append(Layer(rng.uniform(-limit, limit, (fan_in, fan_out)), np.zeros(fan_out), act))
        return cls(layers, seed=seed)

    @classmethod
    def mlp(cls, n_in: int, hidden: list[int], n_out: int, seed: int,
            hidden_act: str = "tanh", out_act: str = "identity") -> Network:
        dims = [n_in, *hidden, n_out]
        return cls.init(dims, [hidden_act] * len(hidden) + [out_act], seed)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [layer.weight.shape[1] for layer in self.layers]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> Network:
        layers = [Layer(l.weight.copy(), l.bias.copy(), l.activation, l.frozen) for l in self.layers]
        return Network(layers, seed=self.seed)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._squeeze = x.ndim == 1
        h = x[None, :] if self._squeeze else x
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ValueError(f"expected input of width {self.input_dim}, got shape {x.shape}")
        tape = [h]
        for layer in self.layers:
            h = _activate(layer.activation, h @ layer.weight + layer.bias)
            tape.append(h)
        self._tape = tape
        return h[0] if self._squeeze else h

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass that leaves the recorded tape untouched."""
        tape, squeeze = self._tape, self._squeeze
        try:
            return self.forward(x)
        finally:
            self._tape, self._squeeze = tape, squeeze

    def backward(self, upstream: np.ndarray) -> Gradient:
        if self._tape is None:
            raise RuntimeError("backward called before any forward pass was recorded")
        g = np.asarray(upstream, dtype=np.float64)
        if self._squeeze:
            g = g[None, :]
        if g.shape != self._tape[-1].shape:
            raise ValueError(f"upstream shape {g.shape} does not match output {self._tape[-1].shape}")
        dws: list[np.ndarray] = []
        dbs: list[np.ndarray] = []
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            g = g * _activation_grad(layer.activation, self._tape[i + 1])
            if layer.frozen:
                dws.append(np.zeros_like(layer.weight))
                dbs.append(np.zeros_like(layer.bias))
            else:
                dws.append(self._tape[i].T @ g)
                dbs.append(g.sum(axis=0))
            g = g @ layer.weight.T
        dws.reverse()
        dbs.reverse()
        return Gradient(dws, dbs, g[0] if self._squeeze else g)


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def backward(net: Network, upstream: np.ndarray) -> Gradient:
    return net.backward(upstream)


def finite_difference_gradient(net: Network, loss_fn, h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of ``loss_fn(net)`` for every parameter.

    ``loss_fn`` must only use ``net.predict`` / ``net.forward`` and return a
    scalar. Used as the independent oracle for ``Network.backward``.
    """
    grads = []
    for p in net.parameters():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss_fn(net)
            flat[j] = orig - h
            down = loss_fn(net)
            flat[j] = orig
            gflat[j] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(net: Network, x: np.ndarray, seed: int, h: float = 1e-5) -> float:
    """Worst per-parameter relative error of ``backward`` against central differences.

    The scalar probed is ``sum(w * net(x))`` with a random weighting ``w``.
    """
    w = np.random.default_rng(seed).normal(size=(np.atleast_2d(x).shape[0], net.output_dim))
    net.forward(x)
    grad = net.backward(w if np.ndim(x) == 2 else w[0])
    numeric = finite_difference_gradient(net, lambda n: float((n.predict(x) * w).sum()), h)
    return max(float(relative_error(a, b).max()) for a, b in zip(grad.arrays(), numeric))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    rejected: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, net: Network, **kw) -> AdamState:
        params = net.parameters()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(net: Network, grad: Gradient, state: AdamState, lr: float) -> AdamState:
    """Apply one bias-corrected Adam update in place.

    A gradient with any non-finite entry is refused: parameters and moments
    are left untouched and ``state.rejected`` is incremented.
    """
    if not grad.is_finite():
        state.rejected += 1
        log.warning("non-finite gradient; Adam step %d rejected", state.t + 1)
        return state
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    frozen = [l.frozen for l in net.layers for _ in range(2)]
    for p, g, m, v, fz in zip(net.parameters(), grad.arrays(), state.m, state.v, frozen):
        if fz:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# -- categorical utilities ---------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    return _softmax(np.asarray(logits, dtype=np.float64), axis=-1)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    return _log_softmax(np.asarray(logits, dtype=np.float64), axis=-1)


def is_simplex(p: np.ndarray, tol: float = SIMPLEX_TOL) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return bool(np.all(p >= 0) and np.all(np.abs(p.sum(axis=-1) - 1.0) <= tol))


def categorical_entropy(probs: np.ndarray) -> float | np.ndarray:
    """Shannon entropy in nats with ``0 log 0 = 0``; works row-wise on 2-D input."""
    p = np.asarray(probs, dtype=np.float64)
    if not is_simplex(p):
        raise ValueError("categorical_entropy expects nonnegative entries summing to 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = np.maximum(-terms.sum(axis=-1), 0.0)
    return float(h) if h.ndim == 0 else h


def entropy_from_logits(logits: np.ndarray) -> np.ndarray:
    logp = log_softmax(logits)
    return -(np.exp(logp) * logp).sum(axis=-1)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def gumbel_noise(shape, seed) -> np.ndarray:
    u = _rng(seed).uniform(size=shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    return -np.log(-np.log(u))


def relaxed_categorical_sample(logits: np.ndarray, temperature: float, seed) -> np.ndarray:
    """Gumbel-softmax sample ``softmax((logits + G) / temperature)``.

    ``seed`` may be an int or a ``numpy.random.Generator``. Batched logits are
    sampled row-wise. The gradient with respect to the logits is that of a
    softmax at the perturbed, tempered logits.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    return softmax((logits + gumbel_noise(logits.shape, seed)) / temperature)


def softmax_backward(probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of a row-wise softmax."""
    return probs * (upstream - (probs * upstream).sum(axis=-1, keepdims=True))


def one_hot(indices: np.ndarray, k: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros(indices.shape + (k,))
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return out


def argmax_smallest(p: np.ndarray) -> np.ndarray:
    """Row-wise argmax; exact ties resolve to the smallest index."""
    return np.argmax(np.asarray(p), axis=-1)
