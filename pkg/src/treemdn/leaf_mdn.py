"""Plain MLPs with manual backprop, and the single-Gaussian leaf head built on them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_SIGMA_MIN = -7.0
LOG_SIGMA_MAX = 7.0
HIDDEN_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class MlpConfig:
    """``depth`` counts weight layers, output layer included (so depth 2 = one hidden layer)."""

    depth: int
    width: int
    in_dim: int
    out_dim: int
    hidden_activation: str = "relu"

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("formula domain: MLP depth must be >= 2")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        sizes = [self.in_dim] + [self.width] * (self.depth - 1) + [self.out_dim]
        return list(zip(sizes[:-1], sizes[1:]))


@dataclass
class Layer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)


@dataclass
class MlpParams:
    layers: list[Layer]
    activation: str = "relu"

    @property
    def in_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weights.shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams(
            [Layer(l.weights.copy(), l.biases.copy()) for l in self.layers], self.activation
        )


@dataclass(frozen=True)
class GaussianParams:
    mu: float
    log_sigma_raw: float
    sigma: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "sigma", float(np.exp(clamp_log_sigma(self.log_sigma_raw))))


def clamp_log_sigma(raw):
    return np.clip(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)


def clamp_mask(raw):
    """Derivative of the clamp: 1 strictly inside the range, 0 outside."""
    return ((raw > LOG_SIGMA_MIN) & (raw < LOG_SIGMA_MAX)).astype(np.float64)


def init_mlp(config: MlpConfig, rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    layers = []
    for fan_in, fan_out in config.layer_dims:
        s = math.sqrt(6.0 / (fan_in + fan_out))
        layers.append(Layer(rng.uniform(-s, s, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return MlpParams(layers, config.hidden_activation)


def _act(name: str, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(name: str, z, a):
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def forward_with_cache(params: MlpParams, x: np.ndarray):
    if x.shape[-1] != params.in_dim:
        raise ValueError(f"dimension mismatch: MLP expects {params.in_dim} inputs, got {x.shape[-1]}")
    acts, pre = [x], []
    h = x
    last = len(params.layers) - 1
    for k, layer in enumerate(params.layers):
        z = h @ layer.weights.T + layer.biases
        pre.append(z)
        h = z if k == last else _act(params.activation, z)
        acts.append(h)
    return h, (acts, pre)


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Affine layers with the hidden activation between them; the last layer is linear."""
    out, _ = forward_with_cache(params, np.asarray(x, dtype=np.float64))
    return out


def mlp_backward(params: MlpParams, x, upstream, cache=None):
    """Gradients of ``sum(upstream * mlp_forward(x))``.

    Returns ``(layer_grads, grad_x)`` where ``layer_grads`` is a list of
    :class:`Layer` holding weight and bias gradients. With a batched ``x``
    parameter gradients are summed over rows.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if cache is None:
        out, cache = forward_with_cache(params, x)
    else:
        out = cache[0][-1]
    if upstream.shape != out.shape:
        raise ValueError(f"shape mismatch: upstream {upstream.shape} vs output {out.shape}")
    acts, pre = cache
    grads: list[Layer] = [None] * len(params.layers)  # type: ignore[list-item]
    delta = upstream
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        if k != len(params.layers) - 1:
            delta = delta * _act_grad(params.activation, pre[k], acts[k + 1])
        h = acts[k]
        if h.ndim == 1:
            gw = np.outer(delta, h)
            gb = delta.copy()
        else:
            gw = delta.T @ h
            gb = delta.sum(axis=0)
        grads[k] = Layer(gw, gb)
        delta = delta @ layer.weights
    return grads, delta


def leaf_forward(params: MlpParams, x_invariant) -> GaussianParams:
    """One Gaussian from the time-invariant feature segment."""
    out = mlp_forward(params, x_invariant)
    if out.shape != (2,):
        raise ValueError("leaf module must emit exactly 2 raw outputs for a single input")
    return GaussianParams(mu=float(out[0]), log_sigma_raw=float(out[1]))


def mlp_param_count(config: MlpConfig) -> int:
    """Weight count ``W(in + out) + W^2 (L - 2)``; biases are not counted."""
    w = config.width
    return w * (config.in_dim + config.out_dim) + w * w * (config.depth - 2)
