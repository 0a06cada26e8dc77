"""Small MLP feature encoder with unit-norm outputs and exact manual gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import NORM_EPS, l2_normalize_rows, l2_normalize_rows_backward

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda pre, post: 1.0 - post**2),
    "relu": (lambda x: np.maximum(x, 0.0), lambda pre, post: (pre > 0).astype(np.float64)),
}


@dataclass
class ForwardCache:
    inputs: list  # input to each layer
    pre: list  # pre-activation of each layer
    post: list  # activation output of each hidden layer
    raw: np.ndarray  # final layer output before normalization


class MLPEncoder:
    """``p -> hidden ... -> d`` MLP; hidden layers use ``activation``, the last is linear.

    Parameters are stored as ``W0, b0, W1, b1, ...`` with ``W_i`` of shape
    (fan_out, fan_in).
    """

    def __init__(self, layer_dims, activation: str = "tanh", output_normalize: bool = True,
                 rng: np.random.Generator | None = None, params: dict | None = None):
        if len(layer_dims) < 2:
            raise ValueError("need at least input and output dims")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_dims = [int(x) for x in layer_dims]
        self.activation = activation
        self.output_normalize = output_normalize
        if params is None:
            if rng is None:
                raise ValueError("rng required for random initialization")
            params = {}
            for i, (fan_in, fan_out) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
                params[f"W{i}"] = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
                params[f"b{i}"] = np.zeros(fan_out)
        self.set_params(params)

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i in range(self.n_layers):
            out[f"W{i}"] = self.weights[i]
            out[f"b{i}"] = self.biases[i]
        return out

    def set_params(self, params: dict) -> None:
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
            w = np.array(params[f"W{i}"], dtype=np.float64)
            b = np.array(params[f"b{i}"], dtype=np.float64)
            if w.shape != (fan_out, fan_in) or b.shape != (fan_out,):
                raise ValueError(f"layer {i} parameter shape mismatch")
            weights.append(w)
            biases.append(b)
        self.weights, self.biases = weights, biases

    def copy(self) -> "MLPEncoder":
        return MLPEncoder(self.layer_dims, self.activation, self.output_normalize, params=self.params())

    def forward(self, x: np.ndarray, return_cache: bool = False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected N x {self.input_dim} inputs, got {x.shape}")
        act, _ = _ACTIVATIONS[self.activation]
        cache = ForwardCache([], [], [], None)
        h = x
        for i in range(self.n_layers):
            cache.inputs.append(h)
            pre = h @ self.weights[i].T + self.biases[i]
            cache.pre.append(pre)
            if i < self.n_layers - 1:
                h = act(pre)
                cache.post.append(h)
            else:
                h = pre
        cache.raw = h
        out = l2_normalize_rows(h, NORM_EPS) if self.output_normalize else h
        return (out, cache) if return_cache else out

    __call__ = forward

    def backward(self, cache: ForwardCache, upstream: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given dLoss/dOutput for the cached batch."""
        _, dact = _ACTIVATIONS[self.activation]
        g = np.asarray(upstream, dtype=np.float64)
        if self.output_normalize:
            g = l2_normalize_rows_backward(cache.raw, g, NORM_EPS)
        grads = {}
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * dact(cache.pre[i], cache.post[i])
            grads[f"W{i}"] = g.T @ cache.inputs[i]
            grads[f"b{i}"] = g.sum(axis=0)
            if i > 0:
                g = g @ self.weights[i]
        return {k: grads[k] for k in self.params()}


def wise_interpolate(theta_a: dict, theta_b: dict, alpha: float) -> dict[str, np.ndarray]:
    """Weight-space interpolation ``(1 - alpha) * theta_a + alpha * theta_b``.

    The endpoints return exact copies so alpha 0 and 1 reproduce the inputs
    bit for bit (including signed zeros).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if set(theta_a) != set(theta_b):
        raise ValueError("parameter sets differ")
    out = {}
    for name, a in theta_a.items():
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(theta_b[name], dtype=np.float64)
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch for {name}: {a.shape} vs {b.shape}")
        if alpha == 0.0:
            out[name] = a.copy()
        elif alpha == 1.0:
            out[name] = b.copy()
        else:
            out[name] = (1.0 - alpha) * a + alpha * b
    return out
