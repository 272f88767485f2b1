"""Minimal dense-network kernel with handwritten backward passes.

Tensors are plain C-contiguous numpy arrays (float32 in production paths;
the same code runs in float64 for finite-difference checks). Public
operations never mutate their inputs; `adam_step` returns fresh arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEAKY_RELU = "leaky_relu"
SIGMOID = "sigmoid"
IDENTITY = "identity"

LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    pass


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, x, x * np.asarray(LEAKY_SLOPE, dtype=x.dtype))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(name: str, pre: np.ndarray) -> np.ndarray:
    if name == LEAKY_RELU:
        return leaky_relu(pre)
    if name == SIGMOID:
        return sigmoid(pre)
    if name == IDENTITY:
        return pre
    raise ValueError(f"unknown activation {name!r}")


def _activate_grad(name: str, pre: np.ndarray, out: np.ndarray) -> np.ndarray:
    if name == LEAKY_RELU:
        return np.where(pre >= 0, np.asarray(1.0, pre.dtype), np.asarray(LEAKY_SLOPE, pre.dtype))
    if name == SIGMOID:
        return out * (1.0 - out)
    if name == IDENTITY:
        return np.ones_like(pre)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class DenseLayer:
    """y = act(x @ W.T + b) with W of shape (out, in)."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = LEAKY_RELU

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"inconsistent layer shapes {self.weight.shape} / {self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


def init_dense(rng, in_dim: int, out_dim: int, activation: str, scale: float = 1.0) -> DenseLayer:
    """He-style init scaled for the leaky slope; bias zero."""
    gain = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2)) if activation == LEAKY_RELU else 1.0
    std = scale * gain / np.sqrt(in_dim)
    w = (rng.normal(size=out_dim * in_dim) * std).reshape(out_dim, in_dim).astype(np.float32)
    return DenseLayer(w, np.zeros(out_dim, dtype=np.float32), activation)


class Mlp:
    """A stack of dense layers with cached-forward / exact-backward."""

    def __init__(self, layers: list[DenseLayer]):
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer chain mismatch: {a.out_dim} -> {b.in_dim}")
        self.layers = layers

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        if x.ndim != 2 or x.shape[1] != self.layers[0].in_dim:
            raise ShapeError(
                f"input shape {x.shape} does not match first layer ({self.layers[0].in_dim})"
            )
        cache = []
        out = x
        for layer in self.layers:
            pre = out @ layer.weight.T + layer.bias
            post = _activate(layer.activation, pre)
            cache.append((out, pre, post))
            out = post
        return out, cache

    def backward(self, cache: list, d_out: np.ndarray):
        """Return ([(dW, db) per layer], d_input) for the cached forward."""
        if len(cache) != len(self.layers):
            raise ValueError("cache does not match this network; call forward_cached first")
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)
        d = d_out
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            x_in, pre, post = cache[i]
            d_pre = d * _activate_grad(layer.activation, pre, post)
            grads[i] = (d_pre.T @ x_in, d_pre.sum(axis=0))
            d = d_pre @ layer.weight
        return grads, d

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def set_parameters(self, params: list[np.ndarray]) -> None:
        if len(params) != 2 * len(self.layers):
            raise ShapeError("parameter count mismatch")
        for i, layer in enumerate(self.layers):
            layer.weight, layer.bias = params[2 * i], params[2 * i + 1]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    """Gradient through softmax given dL/dprobs."""
    inner = (d_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (d_probs - inner)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE over the batch; returns (loss, dlogits)."""
    probs = softmax(logits.astype(np.float64))
    n = logits.shape[0]
    picked = probs[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked, 1e-30)).mean())
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return loss, (d / n).astype(logits.dtype)


def kl_divergence(p: np.ndarray, q: np.ndarray, eps: float = 1e-7) -> tuple[float, np.ndarray]:
    """Mean KL(p || q) over the batch with probability clamping.

    Returns (loss, dloss/dq); p is treated as constant.
    """
    pc = np.clip(p.astype(np.float64), eps, 1.0)
    qc = np.clip(q.astype(np.float64), eps, 1.0)
    n = p.shape[0]
    loss = float((pc * (np.log(pc) - np.log(qc))).sum() / n)
    dq = np.where((q >= eps) & (q <= 1.0), -pc / qc, 0.0) / n
    return loss, dq.astype(q.dtype)


@dataclass
class AdamState:
    """Standard Adam with bias correction; moments shaped like the params."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @staticmethod
    def for_params(params: list[np.ndarray], learning_rate: float) -> "AdamState":
        return AdamState(
            learning_rate=learning_rate,
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
        )


def adam_step(
    params: list[np.ndarray], grads: list[np.ndarray], state: AdamState
) -> tuple[list[np.ndarray], AdamState]:
    """One Adam update; inputs untouched, fresh arrays returned."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("params/grads/state length mismatch")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape}")
        m2 = b1 * m + (1.0 - b1) * g
        v2 = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m2 / np.asarray(c1, dtype=p.dtype)
        v_hat = v2 / np.asarray(c2, dtype=p.dtype)
        new_params.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
        new_m.append(m2)
        new_v.append(v2)
    return new_params, AdamState(
        learning_rate=state.learning_rate,
        beta1=b1,
        beta2=b2,
        epsilon=state.epsilon,
        step=t,
        first_moment=new_m,
        second_moment=new_v,
    )
