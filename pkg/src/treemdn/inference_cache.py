"""Serving path that precomputes leaf Gaussians per entity.

Leaf modules only see time-invariant features, so their outputs can be
computed once per entity. At request time only the tree gate runs.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import FeatureVector
from .leaf_mdn import GaussianParams, leaf_forward
from .mixture import MixtureDensity, Model, predict_density
from .soft_tree import leaf_probabilities

FORMAT_VERSION = 1


class CacheMiss(KeyError):
    pass


class StaleCache(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class CacheEntry:
    invariant_features: np.ndarray
    leaf_gaussians: tuple[GaussianParams, ...]

    def __post_init__(self):
        object.__setattr__(self, "invariant_features", _frozen(self.invariant_features))
        object.__setattr__(self, "_mus", _frozen([g.mu for g in self.leaf_gaussians]))
        object.__setattr__(self, "_sigmas", _frozen([g.sigma for g in self.leaf_gaussians]))


@dataclass(frozen=True)
class LeafCache:
    entries: Mapping[str, CacheEntry]
    model_fingerprint: str

    def __post_init__(self):
        object.__setattr__(self, "entries", MappingProxyType(dict(self.entries)))

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return key in self.entries


def build_cache(model: Model, entities: Iterable[tuple[str, Sequence[float]]]) -> LeafCache:
    """Precompute every leaf Gaussian for each ``(entity_key, invariant_features)``.

    Invariant features must already be standardized with the model's scaler.
    """
    if model.kind != "tree_gated":
        raise ValueError(f"leaf caching needs a tree_gated model, got {model.kind}")
    entries: dict[str, CacheEntry] = {}
    for key, inv in entities:
        key = str(key)
        if key in entries:
            raise ValueError(f"duplicate entity key {key!r}")
        inv = np.asarray(inv, dtype=np.float64)
        if inv.shape != (model.schema.n_invariant,):
            raise ValueError(f"entity {key!r}: expected {model.schema.n_invariant} invariant features")
        entries[key] = CacheEntry(inv, tuple(leaf_forward(leaf, inv) for leaf in model.leaves))
    return LeafCache(entries, model.fingerprint())


def predict_cached(model: Model, cache: LeafCache, entity_key: str, variant_features) -> MixtureDensity:
    """Same result as :func:`predict_density`, running only the tree gate."""
    if cache.model_fingerprint != model.fingerprint():
        raise StaleCache("stale cache: built for a different model")
    try:
        entry = cache.entries[entity_key]
    except KeyError:
        raise CacheMiss(f"cache miss: {entity_key!r}") from None
    variant = np.asarray(variant_features, dtype=np.float64)
    if variant.shape != (model.schema.n_variant,):
        raise ValueError(f"schema mismatch in variant (expected {model.schema.n_variant}, got {variant.shape[-1]})")
    alphas = leaf_probabilities(model.tree, model.tree_config, np.concatenate([variant, entry.invariant_features]))
    return MixtureDensity(alphas, entry._mus.copy(), entry._sigmas.copy())


# ---------------------------------------------------------------------------
# persistence


def cache_to_dict(cache: LeafCache) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "model_fingerprint": cache.model_fingerprint,
        "entries": {
            key: {
                "invariant_features": e.invariant_features.tolist(),
                "leaf_gaussians": [{"mu": g.mu, "log_sigma_raw": g.log_sigma_raw} for g in e.leaf_gaussians],
            }
            for key, e in sorted(cache.entries.items())
        },
    }


def cache_from_dict(doc: dict) -> LeafCache:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported cache format_version {doc.get('format_version')!r}")
    entries = {
        key: CacheEntry(
            np.asarray(e["invariant_features"], dtype=np.float64),
            tuple(GaussianParams(g["mu"], g["log_sigma_raw"]) for g in e["leaf_gaussians"]),
        )
        for key, e in doc["entries"].items()
    }
    return LeafCache(entries, doc["model_fingerprint"])


def save_cache(cache: LeafCache, path) -> None:
    Path(path).write_text(json.dumps(cache_to_dict(cache), indent=1) + "\n", encoding="utf-8")


def load_cache(path) -> LeafCache:
    return cache_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# benchmark

MIN_BENCH_REQUESTS = 10_000


def bench_inference(
    model: Model,
    cache: LeafCache,
    workload: Sequence[tuple[str, np.ndarray]],
    repetitions: int = 3,
) -> dict:
    """Time the full path against the cached path on ``(entity_key, variant)`` requests.

    Inputs for both paths are assembled before timing, and one untimed warmup
    pass of each precedes the measured repetitions. Reported figures are
    medians over repetitions of the per-request wall time.
    """
    if len(workload) < MIN_BENCH_REQUESTS:
        raise ValueError(f"workload needs at least {MIN_BENCH_REQUESTS} requests, got {len(workload)}")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    full_inputs = [
        FeatureVector(np.asarray(v, dtype=np.float64), cache.entries[k].invariant_features, k) for k, v in workload
    ]
    cached_inputs = [(k, np.asarray(v, dtype=np.float64)) for k, v in workload]

    def run_full():
        for fv in full_inputs:
            predict_density(model, fv)

    def run_cached():
        for k, v in cached_inputs:
            predict_cached(model, cache, k, v)

    run_full()
    run_cached()
    n = len(workload)
    records = []
    for rep in range(repetitions):
        t0 = time.perf_counter_ns()
        run_full()
        t1 = time.perf_counter_ns()
        run_cached()
        t2 = time.perf_counter_ns()
        records.append({"rep": rep, "full_ns_per_pred": (t1 - t0) / n, "cached_ns_per_pred": (t2 - t1) / n})
    full = statistics.median(r["full_ns_per_pred"] for r in records)
    cached = statistics.median(r["cached_ns_per_pred"] for r in records)
    return {
        "requests": n,
        "repetitions": repetitions,
        "full_ns_per_pred": full,
        "cached_ns_per_pred": cached,
        "speedup": full / cached,
        "records": records,
    }
