"""The three model kinds compared in the benchmark, their densities and NLL.

* ``mdn_baseline``: one MLP trunk on all features emitting M means, M raw
  log-sigmas and M weight logits.
* ``constant_leaf_tree``: soft tree gate over trainable per-leaf constants.
* ``tree_gated``: soft tree gate over per-leaf MLPs that read only the
  time-invariant features.

Exponentiated raw outputs are treated as standard deviations and clamped to
``exp([-7, 7])`` for every kind.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import FeatureSchema, FeatureVector, Scaler
from .leaf_mdn import (
    GaussianParams,
    Layer,
    MlpConfig,
    MlpParams,
    clamp_log_sigma,
    clamp_mask,
    init_mlp,
    leaf_forward,
    mlp_backward,
    mlp_forward,
    mlp_param_count,
    forward_with_cache,
)
from .numerics import LOG_2PI, gaussian_log_pdf, log_softmax, log_sum_exp, softmax
from .soft_tree import (
    TreeConfig,
    TreeParams,
    init_tree,
    leaf_probabilities,
    level_masses,
    preactivation_backward,
    preactivation_grad,
    soft_gates,
    tree_param_count,
)

KINDS = ("mdn_baseline", "constant_leaf_tree", "tree_gated")
KIND_ALIASES = {"mdn": "mdn_baseline", "const-tree": "constant_leaf_tree", "tree-gated": "tree_gated"}
FORMAT_VERSION = 1


@dataclass
class MixtureDensity:
    alphas: np.ndarray
    mus: np.ndarray
    sigmas: np.ndarray

    def to_dict(self) -> dict:
        return {"alphas": self.alphas.tolist(), "mus": self.mus.tolist(), "sigmas": self.sigmas.tolist()}


@dataclass
class ConstantLeaves:
    mu: np.ndarray
    log_sigma_raw: np.ndarray

    def gaussians(self) -> list[GaussianParams]:
        return [GaussianParams(float(m), float(s)) for m, s in zip(self.mu, self.log_sigma_raw)]


@dataclass
class Model:
    kind: str
    schema: FeatureSchema
    scaler: Scaler | None = None
    tree_config: TreeConfig | None = None
    tree: TreeParams | None = None
    leaves: list[MlpParams] | None = None
    constant_leaves: ConstantLeaves | None = None
    trunk: MlpParams | None = None
    n_components: int = 0

    def __post_init__(self):
        self._fingerprint = None

    @property
    def has_tree(self) -> bool:
        return self.kind != "mdn_baseline"

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name. These are live references; callers may
        update them in place, so the cached fingerprint is dropped here."""
        self._fingerprint = None
        out: dict[str, np.ndarray] = {}
        if self.tree is not None:
            out["tree.w"] = self.tree.w
            out["tree.b"] = self.tree.b
        if self.leaves is not None:
            for m, leaf in enumerate(self.leaves):
                _add_mlp(out, f"leaf{m}", leaf)
        if self.constant_leaves is not None:
            out["const.mu"] = self.constant_leaves.mu
            out["const.log_sigma_raw"] = self.constant_leaves.log_sigma_raw
        if self.trunk is not None:
            _add_mlp(out, "trunk", self.trunk)
        return out

    def copy(self) -> "Model":
        dup = copy.deepcopy(self)
        dup._fingerprint = None
        return dup

    def fingerprint(self) -> str:
        """SHA-256 of the canonical model document (memoized)."""
        if self._fingerprint is None:
            text = json.dumps(model_to_dict(self), sort_keys=True, separators=(",", ":"))
            self._fingerprint = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return self._fingerprint


def _add_mlp(out: dict, prefix: str, mlp: MlpParams) -> None:
    for k, layer in enumerate(mlp.layers):
        out[f"{prefix}.W{k}"] = layer.weights
        out[f"{prefix}.b{k}"] = layer.biases


def build_model(
    kind: str,
    rng: np.random.Generator,
    schema: FeatureSchema = FeatureSchema(),
    scaler: Scaler | None = None,
    depth: int = 3,
    leaf_depth: int = 2,
    leaf_width: int = 50,
    components: int = 8,
    hidden_activation: str = "relu",
    structure: str = "free",
    routing_mode: str = "soft",
    target_mean: float = 0.0,
) -> Model:
    """Fresh randomly initialised model.

    ``leaf_depth``/``leaf_width`` also size the MDN trunk. ``target_mean``
    (normally the train-split mean of the log target) seeds every mean output:
    the bias of the leaf/trunk mean units, or the centre of the constant-leaf
    means. Starting all components at zero lets one component win the gate
    before the others have moved, after which the tree saturates onto it.
    """
    kind = KIND_ALIASES.get(kind, kind)
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    n_features = len(schema.feature_names)
    if kind == "mdn_baseline":
        cfg = MlpConfig(leaf_depth, leaf_width, n_features, 3 * components, hidden_activation)
        trunk = init_mlp(cfg, rng)
        trunk.layers[-1].biases[:components] = target_mean
        return Model(kind, schema, scaler, trunk=trunk, n_components=components)

    tcfg = TreeConfig(depth, routing_mode=routing_mode, structure=structure)
    tree = init_tree(tcfg, n_features, rng)
    if kind == "constant_leaf_tree":
        const = ConstantLeaves(target_mean + rng.uniform(-1.0, 1.0, tcfg.n_leaves), np.zeros(tcfg.n_leaves))
        return Model(kind, schema, scaler, tcfg, tree, constant_leaves=const, n_components=tcfg.n_leaves)
    cfg = MlpConfig(leaf_depth, leaf_width, schema.n_invariant, 2, hidden_activation)
    leaves = [init_mlp(cfg, rng) for _ in range(tcfg.n_leaves)]
    for leaf in leaves:
        leaf.layers[-1].biases[0] = target_mean
    return Model(kind, schema, scaler, tcfg, tree, leaves=leaves, n_components=tcfg.n_leaves)


def _check_vector(model: Model, x: FeatureVector) -> None:
    bad = []
    if len(x.variant) != model.schema.n_variant:
        bad.append(f"variant (expected {model.schema.n_variant}, got {len(x.variant)})")
    if len(x.invariant) != model.schema.n_invariant:
        bad.append(f"invariant (expected {model.schema.n_invariant}, got {len(x.invariant)})")
    if bad:
        raise ValueError("schema mismatch in " + "; ".join(bad))


def _mdn_head(out: np.ndarray, m: int):
    """Split trunk output (..., 3M) into means, raw log-sigmas and weight logits."""
    return out[..., :m], out[..., m : 2 * m], out[..., 2 * m :]


def predict_density(model: Model, x: FeatureVector) -> MixtureDensity:
    """Mixture parameters for a single standardized input."""
    _check_vector(model, x)
    if model.kind == "mdn_baseline":
        mus, raw, logits = _mdn_head(mlp_forward(model.trunk, x.full), model.n_components)
        return MixtureDensity(softmax(logits), mus.copy(), np.exp(clamp_log_sigma(raw)))
    alphas = leaf_probabilities(model.tree, model.tree_config, np.concatenate([x.variant, x.invariant]))
    if model.kind == "constant_leaf_tree":
        gaussians = model.constant_leaves.gaussians()
    else:
        gaussians = [leaf_forward(leaf, x.invariant) for leaf in model.leaves]
    return MixtureDensity(
        alphas,
        np.array([g.mu for g in gaussians]),
        np.array([g.sigma for g in gaussians]),
    )


def mixture_log_pdf(d: MixtureDensity, y: float) -> float:
    alphas = np.asarray(d.alphas, dtype=np.float64)
    if not np.any(alphas > 0):
        raise ValueError("mixture has no positive weight")
    with np.errstate(divide="ignore"):
        log_a = np.log(alphas)
    return log_sum_exp(log_a + gaussian_log_pdf(y, d.mus, d.sigmas))


# ---------------------------------------------------------------------------
# batched evaluation and gradients


def _leaf_raw_outputs(model: Model, invariant: np.ndarray):
    """(mus, raw log-sigmas), each (B, K), plus what the backward pass needs.

    Leaves read only the invariant segment, so each distinct invariant row is
    pushed through the leaf MLPs once and the results are gathered back.
    """
    uniq, inverse = np.unique(invariant, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    outs, caches = [], []
    for leaf in model.leaves:
        out, cache = forward_with_cache(leaf, uniq)
        outs.append(out)
        caches.append(cache)
    stacked = np.stack(outs, axis=1)[inverse]  # (B, K, 2)
    return stacked[..., 0], stacked[..., 1], (uniq, inverse, caches)


def _forward_batch(model: Model, variant: np.ndarray, invariant: np.ndarray):
    """Everything the loss and its gradient need, for a batch."""
    state = {}
    if model.kind == "mdn_baseline":
        x = np.concatenate([variant, invariant], axis=1)
        out, cache = forward_with_cache(model.trunk, x)
        mus, raw, logits = _mdn_head(out, model.n_components)
        state.update(x=x, trunk_cache=cache, log_alpha=log_softmax(logits, axis=1))
    else:
        x = np.concatenate([variant, invariant], axis=1)
        if model.tree_config.routing_mode == "soft":
            gates = soft_gates(model.tree, model.tree_config, x)
            alphas = level_masses(gates, model.tree_config.depth)[-1]
            state["gates"] = gates
        else:
            alphas = leaf_probabilities(model.tree, model.tree_config, x)
        with np.errstate(divide="ignore"):
            state["log_alpha"] = np.log(alphas)
        state["x"] = x
        if model.kind == "constant_leaf_tree":
            b = len(variant)
            mus = np.broadcast_to(model.constant_leaves.mu, (b, model.n_components))
            raw = np.broadcast_to(model.constant_leaves.log_sigma_raw, (b, model.n_components))
        else:
            mus, raw, caches = _leaf_raw_outputs(model, invariant)
            state["leaf_caches"] = caches
    state.update(mus=mus, raw=raw)
    return state


def _log_terms(state, y):
    log_sigma = clamp_log_sigma(state["raw"])
    z = (y[:, None] - state["mus"]) * np.exp(-log_sigma)
    log_n = -0.5 * LOG_2PI - log_sigma - 0.5 * z * z
    terms = state["log_alpha"] + log_n
    return terms, log_sum_exp(terms, axis=1), z


def predict_batch(model: Model, variant, invariant) -> MixtureDensity:
    """Mixture parameters for a batch; each field has shape (B, M)."""
    state = _forward_batch(model, np.asarray(variant, np.float64), np.asarray(invariant, np.float64))
    return MixtureDensity(np.exp(state["log_alpha"]), np.array(state["mus"]), np.exp(clamp_log_sigma(state["raw"])))


def log_likelihoods(model: Model, variant, invariant, y) -> np.ndarray:
    """Per-row log density of the (log-space) target."""
    state = _forward_batch(model, np.asarray(variant, np.float64), np.asarray(invariant, np.float64))
    return _log_terms(state, np.asarray(y, dtype=np.float64))[1]


def split_nll(model: Model, split) -> float:
    """Mean NLL over a :class:`~treemdn.data.Split`."""
    if len(split) == 0:
        raise ValueError("empty batch")
    return float(-np.mean(log_likelihoods(model, split.variant, split.invariant, split.y)))


def batch_nll(model: Model, batch: Sequence[tuple[FeatureVector, float]]) -> float:
    """Mean of -log p(y | x) over ``(FeatureVector, y)`` pairs, one row at a time."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    return float(np.mean([-mixture_log_pdf(predict_density(model, x), y) for x, y in batch]))


def nll_and_grad(model: Model, variant, invariant, y) -> tuple[float, dict[str, np.ndarray]]:
    """Mean NLL of a batch and its gradient for every entry of ``model.parameters()``."""
    if model.has_tree and model.tree_config.routing_mode != "soft":
        raise ValueError("non-differentiable routing")
    variant = np.asarray(variant, np.float64)
    invariant = np.asarray(invariant, np.float64)
    y = np.asarray(y, np.float64)
    n = len(y)
    if n == 0:
        raise ValueError("empty batch")
    state = _forward_batch(model, variant, invariant)
    terms, log_p, z = _log_terms(state, y)
    loss = float(-np.mean(log_p))

    resp = np.exp(terms - log_p[:, None])  # posterior component responsibilities
    sigma = np.exp(clamp_log_sigma(state["raw"]))
    d_mu = -resp * z / sigma / n
    d_raw = -resp * (z * z - 1.0) * clamp_mask(state["raw"]) / n

    grads: dict[str, np.ndarray] = {}
    if model.kind == "mdn_baseline":
        d_logits = -(resp - np.exp(state["log_alpha"])) / n
        upstream = np.concatenate([d_mu, d_raw, d_logits], axis=1)
        layer_grads, _ = mlp_backward(model.trunk, state["x"], upstream, state["trunk_cache"])
        _add_mlp(grads, "trunk", MlpParams(layer_grads))
        return loss, grads

    dz = preactivation_grad(state["gates"], -resp / n, model.tree_config)
    grads["tree.w"], grads["tree.b"], _ = preactivation_backward(model.tree, state["x"], dz)
    if model.kind == "constant_leaf_tree":
        grads["const.mu"] = d_mu.sum(axis=0)
        grads["const.log_sigma_raw"] = d_raw.sum(axis=0)
    else:
        uniq, inverse, caches = state["leaf_caches"]
        for m, leaf in enumerate(model.leaves):
            upstream = np.zeros((len(uniq), 2))
            np.add.at(upstream, inverse, np.stack([d_mu[:, m], d_raw[:, m]], axis=1))
            layer_grads, _ = mlp_backward(leaf, uniq, upstream, caches[m])
            _add_mlp(grads, f"leaf{m}", MlpParams(layer_grads))
    return loss, grads


# ---------------------------------------------------------------------------


def sample(d: MixtureDensity, rng: np.random.Generator, size: int | None = None):
    """Draw a component from Categorical(alphas), then a value from its Gaussian."""
    alphas = np.asarray(d.alphas, dtype=np.float64)
    comp = rng.choice(len(alphas), size=size, p=alphas / alphas.sum())
    return np.asarray(d.mus)[comp] + np.asarray(d.sigmas)[comp] * rng.standard_normal(size)


def model_param_count(model: Model) -> dict[str, int]:
    """Weights needed by each part (biases excluded, as in the usual accounting)."""
    tree = 0
    if model.tree is not None:
        tree = tree_param_count(model.tree_config.depth, model.tree.n_features, model.tree_config.structure)
    if model.kind == "tree_gated":
        rest = sum(mlp_param_count(_mlp_config(leaf)) for leaf in model.leaves)
    elif model.kind == "constant_leaf_tree":
        rest = 2 * len(model.constant_leaves.mu)
    else:
        rest = mlp_param_count(_mlp_config(model.trunk))
    return {"tree": tree, "leaves_or_trunk": rest, "total": tree + rest}


def _mlp_config(mlp: MlpParams) -> MlpConfig:
    return MlpConfig(
        depth=len(mlp.layers),
        width=mlp.layers[0].weights.shape[0],
        in_dim=mlp.in_dim,
        out_dim=mlp.out_dim,
        hidden_activation=mlp.activation,
    )


# ---------------------------------------------------------------------------
# model file (JSON; float repr round-trips exactly)


def _mlp_to_dict(mlp: MlpParams) -> dict:
    return {
        "activation": mlp.activation,
        "layers": [{"weights": l.weights.tolist(), "biases": l.biases.tolist()} for l in mlp.layers],
    }


def _mlp_from_dict(d: dict) -> MlpParams:
    layers = [
        Layer(np.asarray(l["weights"], dtype=np.float64).reshape(len(l["biases"]), -1),
              np.asarray(l["biases"], dtype=np.float64))
        for l in d["layers"]
    ]
    return MlpParams(layers, d["activation"])


def model_to_dict(model: Model) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "n_components": model.n_components,
        "feature_schema": model.schema.to_dict(),
        "scaler": model.scaler.to_dict() if model.scaler is not None else None,
        "target_transform": "log",
    }
    if model.tree is not None:
        doc["tree_config"] = {
            "depth": model.tree_config.depth,
            "routing_mode": model.tree_config.routing_mode,
            "structure": model.tree_config.structure,
            "activation": model.tree_config.activation,
        }
        doc["tree_params"] = [{"w": model.tree.w[i].tolist(), "b": float(model.tree.b[i])} for i in range(len(model.tree.b))]
    if model.leaves is not None:
        doc["leaf_params"] = [_mlp_to_dict(l) for l in model.leaves]
    if model.constant_leaves is not None:
        doc["constant_leaves"] = {
            "mu": model.constant_leaves.mu.tolist(),
            "log_sigma_raw": model.constant_leaves.log_sigma_raw.tolist(),
        }
    if model.trunk is not None:
        doc["trunk_params"] = _mlp_to_dict(model.trunk)
    return doc


def model_from_dict(doc: dict) -> Model:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {doc.get('format_version')!r}")
    if doc.get("target_transform", "log") != "log":
        raise ValueError("only the log target transform is supported")
    kind = doc["kind"]
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    schema = FeatureSchema.from_dict(doc["feature_schema"])
    scaler = Scaler.from_dict(doc["scaler"]) if doc.get("scaler") else None
    model = Model(kind, schema, scaler, n_components=int(doc["n_components"]))
    if "tree_config" in doc:
        model.tree_config = TreeConfig(**doc["tree_config"])
        nodes = doc["tree_params"]
        model.tree = TreeParams(
            np.asarray([n["w"] for n in nodes], dtype=np.float64),
            np.asarray([n["b"] for n in nodes], dtype=np.float64),
        )
    if "leaf_params" in doc:
        model.leaves = [_mlp_from_dict(d) for d in doc["leaf_params"]]
    if "constant_leaves" in doc:
        c = doc["constant_leaves"]
        model.constant_leaves = ConstantLeaves(
            np.asarray(c["mu"], dtype=np.float64), np.asarray(c["log_sigma_raw"], dtype=np.float64)
        )
    if "trunk_params" in doc:
        model.trunk = _mlp_from_dict(doc["trunk_params"])
    return model


def dumps_model(model: Model) -> str:
    return json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n"


def save_model(model: Model, path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")


def load_model(path) -> Model:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
