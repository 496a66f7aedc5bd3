"""Differentiable soft decision tree used as the mixture gate.

Each internal node ``i`` holds a filter ``w_i`` and bias ``b_i`` and computes
a gate ``g_i = sigmoid(softmax(w_i) . x + b_i)``: the share of its inbound
mass that goes to the RIGHT child. Leaf masses are path products and serve
directly as mixture weights.

Layout conventions:

* internal nodes are stored breadth first, root at 0, children of node ``i``
  at ``2i + 1`` (left) and ``2i + 2`` (right);
* leaves are indexed left to right, so leaf 0 is the all-left path;
* an oblivious tree stores one (w, b) row per level instead of per node.

All routing functions accept a single input of shape ``(F,)`` or a batch of
shape ``(B, F)`` and answer with the matching leading shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import sigmoid, softmax

ROUTING_MODES = ("soft", "hard")
STRUCTURES = ("free", "oblivious")
ACTIVATIONS = ("sigmoid",)


@dataclass(frozen=True)
class TreeConfig:
    depth: int
    routing_mode: str = "soft"
    structure: str = "free"
    activation: str = "sigmoid"

    def __post_init__(self):
        if int(self.depth) < 1:
            raise ValueError(f"tree depth must be >= 1, got {self.depth}")
        if self.routing_mode not in ROUTING_MODES:
            raise ValueError(f"unknown routing mode {self.routing_mode!r}")
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown tree structure {self.structure!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported gate activation {self.activation!r}")

    @property
    def n_internal(self) -> int:
        return 2**self.depth - 1

    @property
    def n_leaves(self) -> int:
        return 2**self.depth

    @property
    def n_param_nodes(self) -> int:
        """Rows of (w, b): one per internal node, or one per level if oblivious."""
        return self.depth if self.structure == "oblivious" else self.n_internal

    def param_row(self, node: int) -> int:
        """Parameter row used by breadth-first internal node ``node``."""
        if self.structure == "oblivious":
            return (node + 1).bit_length() - 1
        return node


@dataclass(frozen=True)
class NodeParams:
    w: np.ndarray
    b: float


@dataclass
class TreeParams:
    """Filters ``w`` with shape (n_param_nodes, F) and biases ``b`` with shape (n_param_nodes,)."""

    w: np.ndarray
    b: np.ndarray

    @property
    def n_features(self) -> int:
        return self.w.shape[1]

    def node(self, row: int) -> NodeParams:
        return NodeParams(self.w[row], float(self.b[row]))

    @property
    def nodes(self) -> list[NodeParams]:
        return [self.node(i) for i in range(len(self.b))]

    def copy(self) -> "TreeParams":
        return TreeParams(self.w.copy(), self.b.copy())


def init_tree(config: TreeConfig, n_features: int, rng: np.random.Generator) -> TreeParams:
    """Filters uniform in [-0.1, 0.1] and zero biases, so early gates sit near 0.5."""
    w = rng.uniform(-0.1, 0.1, size=(config.n_param_nodes, n_features))
    return TreeParams(w=w, b=np.zeros(config.n_param_nodes))


def _check_input(tree: TreeParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != tree.n_features:
        raise ValueError(
            f"dimension mismatch: tree expects {tree.n_features} features, got {x.shape[-1]}"
        )
    return x


def split_gate(node: NodeParams, x):
    """Soft gate of one node: the fraction of mass routed right."""
    w = np.asarray(node.w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dimension mismatch: filter has {w.shape[0]} entries, input {x.shape[-1]}")
    return sigmoid(x @ softmax(w) + node.b)


def gate_preactivations(tree: TreeParams, x) -> np.ndarray:
    """``softmax(w_i) . x + b_i`` for every parameter row; shape (..., n_param_nodes)."""
    x = _check_input(tree, x)
    return x @ softmax(tree.w, axis=1).T + tree.b


def _expand_gates(gates: np.ndarray, config: TreeConfig) -> np.ndarray:
    """Per-internal-node gates (B, 2^D - 1) from per-parameter-row gates."""
    if config.structure == "free":
        return gates
    return np.repeat(gates, [2**d for d in range(config.depth)], axis=1)


def level_masses(node_gates: np.ndarray, depth: int) -> list[np.ndarray]:
    """Inbound mass at every level, root (B, 1) down to leaves (B, 2^D)."""
    batch = node_gates.shape[0]
    mass = np.ones((batch, 1))
    levels = [mass]
    for d in range(depth):
        g = node_gates[:, 2**d - 1 : 2 ** (d + 1) - 1]
        mass = np.stack([mass * (1.0 - g), mass * g], axis=2).reshape(batch, 2 ** (d + 1))
        levels.append(mass)
    return levels


def soft_gates(tree: TreeParams, config: TreeConfig, x) -> np.ndarray:
    """Per-internal-node soft gates, shape (B, 2^D - 1), for a 2-D batch."""
    return _expand_gates(sigmoid(gate_preactivations(tree, x)), config)


def route(tree: TreeParams, config: TreeConfig, x) -> np.ndarray:
    """Soft leaf probabilities (path products of gates), summing to one."""
    x = _check_input(tree, x)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    alphas = level_masses(soft_gates(tree, config, xb), config.depth)[-1]
    return alphas[0] if single else alphas


def hard_path(tree: TreeParams, config: TreeConfig, x) -> tuple[np.ndarray, np.ndarray]:
    """Follow only the taken branch at each level.

    Returns ``(leaf_index, visited)`` where ``visited`` has shape (B, D) and
    lists the breadth-first internal nodes whose gate was evaluated. A gate of
    exactly 0.5 goes right.
    """
    x = _check_input(tree, x)
    xb = np.atleast_2d(x)
    batch = xb.shape[0]
    node = np.zeros(batch, dtype=np.int64)
    visited = np.empty((batch, config.depth), dtype=np.int64)
    for level in range(config.depth):
        visited[:, level] = node
        rows = np.full(batch, level) if config.structure == "oblivious" else node
        filt = softmax(tree.w[rows], axis=1)
        g = sigmoid(np.einsum("bf,bf->b", filt, xb) + tree.b[rows])
        g = np.atleast_1d(g)
        node = 2 * node + 1 + (g >= 0.5)
    return node - config.n_internal, visited


def route_hard(tree: TreeParams, config: TreeConfig, x) -> np.ndarray:
    """One-hot leaf probabilities from thresholded gates, evaluating D gates per input."""
    x = np.asarray(x, dtype=np.float64)
    leaf, _ = hard_path(tree, config, x)
    alphas = np.zeros((leaf.shape[0], config.n_leaves))
    alphas[np.arange(leaf.shape[0]), leaf] = 1.0
    return alphas[0] if x.ndim == 1 else alphas


def leaf_probabilities(tree: TreeParams, config: TreeConfig, x) -> np.ndarray:
    """Dispatch on ``config.routing_mode``."""
    if config.routing_mode == "hard":
        return route_hard(tree, config, x)
    return route(tree, config, x)


def preactivation_grad(node_gates: np.ndarray, weighted: np.ndarray, config: TreeConfig) -> np.ndarray:
    """Gradient w.r.t. each parameter row's pre-activation.

    ``weighted[b, m]`` is ``upstream[b, m] * alpha[b, m]``. Since
    d log(alpha_m) / d z_i is ``1 - g_i`` for leaves right of node i and
    ``-g_i`` for leaves left of it, the gradient at node i is
    ``(1 - g_i) * sum_right - g_i * sum_left`` over the weighted leaves of its
    subtree. No division by gates is needed.
    """
    batch = weighted.shape[0]
    dz = np.empty((batch, config.n_internal))
    sums = weighted
    for d in range(config.depth - 1, -1, -1):
        left, right = sums[:, 0::2], sums[:, 1::2]
        lo, hi = 2**d - 1, 2 ** (d + 1) - 1
        g = node_gates[:, lo:hi]
        dz[:, lo:hi] = (1.0 - g) * right - g * left
        sums = left + right
    if config.structure == "oblivious":
        dz = np.stack(
            [dz[:, 2**d - 1 : 2 ** (d + 1) - 1].sum(axis=1) for d in range(config.depth)], axis=1
        )
    return dz


def preactivation_backward(tree: TreeParams, x: np.ndarray, dz: np.ndarray):
    """Push (B, n_param_nodes) pre-activation gradients onto w, b and x.

    Parameter gradients are summed over the batch.
    """
    filt = softmax(tree.w, axis=1)
    grad_b = dz.sum(axis=0)
    grad_filt = dz.T @ x
    grad_w = filt * (grad_filt - np.sum(filt * grad_filt, axis=1, keepdims=True))
    grad_x = dz @ filt
    return grad_w, grad_b, grad_x


def route_gradients(tree: TreeParams, config: TreeConfig, x, upstream):
    """Gradients of ``sum_m upstream_m * alpha_m`` for soft routing.

    Returns ``(grad_w, grad_b, grad_x)``. For a batched input the parameter
    gradients are summed over rows and ``grad_x`` is per row.
    """
    if config.routing_mode != "soft":
        raise ValueError("non-differentiable routing")
    x = _check_input(tree, x)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    up = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if up.shape != (xb.shape[0], config.n_leaves):
        raise ValueError(f"upstream must have {config.n_leaves} entries per input")
    gates = soft_gates(tree, config, xb)
    alphas = level_masses(gates, config.depth)[-1]
    dz = preactivation_grad(gates, up * alphas, config)
    grad_w, grad_b, grad_x = preactivation_backward(tree, xb, dz)
    return grad_w, grad_b, (grad_x[0] if single else grad_x)


def tree_param_count(depth: int, input_len: int, structure: str = "free") -> int:
    """Filter weights of a complete tree (biases not counted).

    Counts internal nodes only: ``input_len * (2**depth - 1)``; an oblivious
    tree shares one filter per level, giving ``input_len * depth``.
    """
    if structure == "oblivious":
        return input_len * depth
    return input_len * (2**depth - 1)
