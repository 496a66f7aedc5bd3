"""NLL minimisation: Adam + cosine annealing, best-validation checkpointing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Split, SplitDataset
from .mixture import Model, nll_and_grad, split_nll

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 2048
    lr_max: float = 0.1
    lr_min: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.lr_min <= self.lr_max:
            raise ValueError("need 0 <= lr_min <= lr_max")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


@dataclass
class TrainHistory:
    train: list[dict] = field(default_factory=list)  # {step, lr, train_nll}
    valid: list[dict] = field(default_factory=list)  # {step, valid_nll}
    best_valid_step: int = -1
    best_valid_nll: float = math.inf
    best_model: Model | None = None

    def log_lines(self) -> list[str]:
        """Line-oriented export: step records then eval records, in step order."""
        records = [{"type": "step", **r} for r in self.train] + [{"type": "eval", **r} for r in self.valid]
        records.sort(key=lambda r: (r["step"], r["type"] != "step"))
        return [json.dumps(r, sort_keys=True) for r in records]


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float, config: TrainConfig):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter group {name!r}")
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return params, state


def batch_order(n: int, batch_size: int, rng: np.random.Generator):
    """Endless minibatch index stream: reshuffle each epoch, short last batch kept."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start : start + batch_size]


def rng_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (init, shuffle) generators derived from one seed."""
    init_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(shuffle_ss)


def train(model: Model, data: SplitDataset, config: TrainConfig) -> tuple[Model, TrainHistory]:
    """Minimise the training NLL and return the best-validation snapshot.

    The input model is left untouched. Validation NLL is measured every
    ``eval_every`` updates and after the last one.
    """
    work = model.copy()
    params = work.parameters()
    state = AdamState.zeros_like(params)
    _, shuffle_rng = rng_streams(config.seed)
    batches = batch_order(len(data.train), config.batch_size, shuffle_rng)
    tr: Split = data.train
    history = TrainHistory()
    for step in range(config.steps):
        lr = cosine_lr(step, config.steps, config.lr_max, config.lr_min)
        idx = next(batches)
        loss, grads = nll_and_grad(work, tr.variant[idx], tr.invariant[idx], tr.y[idx])
        if not math.isfinite(loss):
            raise FloatingPointError(f"NaN loss at step {step} (lr={lr:.6g})")
        try:
            adam_step(params, grads, state, lr, config)
        except FloatingPointError as exc:
            raise FloatingPointError(f"{exc} at step {step} (lr={lr:.6g})") from None
        history.train.append({"step": step + 1, "lr": lr, "train_nll": loss})
        done = step + 1
        if done % config.eval_every == 0 or done == config.steps:
            valid_nll = split_nll(work, data.valid)
            history.valid.append({"step": done, "valid_nll": valid_nll})
            log.debug("step %d train %.4f valid %.4f", done, loss, valid_nll)
            if valid_nll < history.best_valid_nll:
                history.best_valid_nll = valid_nll
                history.best_valid_step = done
                history.best_model = work.copy()
    if history.best_model is None:
        raise FloatingPointError("validation NLL was never finite")
    return history.best_model, history


@dataclass
class NllStats:
    mean: float
    std: float
    per_seed: list[float]


def nll_stats(values) -> NllStats:
    vals = [float(v) for v in values]
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return NllStats(float(np.mean(vals)), std, vals)


def evaluate_multiseed(
    model_factory: Callable[[int], Model],
    data: SplitDataset,
    config: TrainConfig,
    n_seeds: int,
) -> NllStats:
    """Train ``n_seeds`` models (seeds ``config.seed + k``) and summarise their test NLL.

    ``model_factory(seed)`` must build a fresh model for that seed.
    """
    if n_seeds < 2:
        raise ValueError("n_seeds must be >= 2")
    results = []
    for k in range(n_seeds):
        seed = config.seed + k
        try:
            cfg = TrainConfig(**{**config.__dict__, "seed": seed})
            best, _ = train(model_factory(seed), data, cfg)
        except Exception as exc:
            raise RuntimeError(f"seed {seed}: {exc}") from exc
        results.append(split_nll(best, data.test))
    return nll_stats(results)
