"""Command line interface: ``treemdn <command> ...``.

Commands: gen-data, train, eval, predict, compare, inspect, bench.
Every command is deterministic given its flags (bench timings aside).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .inference_cache import bench_inference, build_cache
from .leaf_mdn import MlpConfig, mlp_param_count
from .mixture import (
    KIND_ALIASES,
    Model,
    build_model,
    load_model,
    model_param_count,
    predict_batch,
    save_model,
    split_nll,
)
from .numerics import softmax
from .soft_tree import level_masses, soft_gates, tree_param_count
from .training import TrainConfig, nll_stats, rng_streams, train

log = logging.getLogger("treemdn")

KIND_CHOICES = ("mdn", "const-tree", "tree-gated")
COMPARE_KINDS = ("mdn_baseline", "constant_leaf_tree", "tree_gated")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _truth_path(data_path) -> Path:
    p = Path(data_path)
    return p.with_name(p.stem + ".truth.json")


def load_splits(data_path, model: Model | None = None, boundaries=D.DEFAULT_TIME_BOUNDARIES) -> D.SplitDataset:
    schema = model.schema if model is not None else D.FeatureSchema()
    table = D.load_dataset(data_path, schema)
    scaler = model.scaler if model is not None else None
    return D.prepare_splits(table, schema, boundaries, scaler=scaler)


def make_model(kind: str, seed: int, ds: D.SplitDataset, args) -> Model:
    init_rng, _ = rng_streams(seed)
    return build_model(
        KIND_ALIASES.get(kind, kind),
        init_rng,
        schema=ds.schema,
        scaler=ds.scaler,
        depth=args.depth,
        leaf_depth=args.leaf_depth,
        leaf_width=args.leaf_width,
        components=args.components,
        hidden_activation=args.activation,
        structure=args.structure,
        target_mean=float(np.mean(ds.train.y)),
    )


def train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(
        steps=args.steps,
        batch_size=args.batch,
        lr_max=args.lr,
        lr_min=args.lr_min,
        seed=seed,
        eval_every=args.eval_every,
    )


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = D.SyntheticGenConfig(n_entities=args.entities, rows_per_entity=args.rows_per_entity, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_path = out / "data.csv"
    table, truth = D.write_synthetic(cfg, data_path, _truth_path(data_path))
    ds = D.prepare_splits(table)
    oracle = D.oracle_nll(truth, ds.test)
    print(f"wrote {len(table)} rows to {data_path} (train {len(ds.train)} / valid {len(ds.valid)} / test {len(ds.test)})")
    print(f"oracle test NLL {oracle:.6f}")
    print(_dump({"rows": len(table), "train": len(ds.train), "valid": len(ds.valid), "test": len(ds.test),
                 "oracle_test_nll": oracle, "data": str(data_path), "truth": str(_truth_path(data_path))}))
    return 0


def cmd_train(args) -> int:
    ds = load_splits(args.data)
    model = make_model(args.kind, args.seed, ds, args)
    best, history = train(model, ds, train_config(args, args.seed))
    out = Path(args.out)
    save_model(best, out)
    hist_path = Path(args.history) if args.history else out.with_suffix(".history.jsonl")
    hist_path.write_text("\n".join(history.log_lines()) + "\n", encoding="utf-8")
    test_nll = split_nll(best, ds.test)
    print(f"best valid NLL {history.best_valid_nll:.6f} at step {history.best_valid_step}; test NLL {test_nll:.6f}")
    print(_dump({"kind": best.kind, "best_valid_step": history.best_valid_step,
                 "best_valid_nll": history.best_valid_nll, "test_nll": test_nll,
                 "model": str(out), "history": str(hist_path)}))
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    ds = load_splits(args.data, model)
    split = ds.split(args.split)
    result = {"split": args.split, "rows": len(split), "nll": split_nll(model, split)}
    if args.truth:
        result["oracle_nll"] = D.oracle_nll(D.load_truth(args.truth), split)
    print(_dump(result))
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    ds = load_splits(args.data, model)
    split = ds.split(args.split)
    n = len(split) if args.limit is None else min(args.limit, len(split))
    d = predict_batch(model, split.variant[:n], split.invariant[:n])
    for i in range(n):
        print(_dump({"row": i, "entity_key": str(split.entity[i]), "time": float(split.time[i]),
                     "alphas": d.alphas[i].tolist(), "mus": d.mus[i].tolist(), "sigmas": d.sigmas[i].tolist()}))
    return 0


def run_comparison(ds: D.SplitDataset, args, n_seeds: int, base_seed: int, truth: dict | None = None) -> dict:
    """Train every model kind for ``n_seeds`` seeds and collect test NLL statistics."""
    results = {}
    for kind in COMPARE_KINDS:
        per_seed = []
        for k in range(n_seeds):
            seed = base_seed + k
            try:
                best, _ = train(make_model(kind, seed, ds, args), ds, train_config(args, seed))
            except Exception as exc:
                raise RuntimeError(f"{kind}, seed {seed}: {exc}") from exc
            per_seed.append(split_nll(best, ds.test))
            log.info("%s seed %d test NLL %.6f", kind, seed, per_seed[-1])
        s = nll_stats(per_seed)
        results[kind] = {"mean": s.mean, "std": s.std, "per_seed": s.per_seed}
    report = {"n_seeds": n_seeds, "base_seed": base_seed, "kinds": results}
    if truth is not None:
        report["oracle_nll"] = D.oracle_nll(truth, ds.test)
    return report


def cmd_compare(args) -> int:
    if args.seeds < 2:
        raise ValueError("--seeds must be >= 2")
    ds = load_splits(args.data)
    truth_path = Path(args.truth) if args.truth else _truth_path(args.data)
    if not truth_path.exists():
        raise FileNotFoundError(f"ground-truth sidecar not found: {truth_path}")
    report = run_comparison(ds, args, args.seeds, args.seed, D.load_truth(truth_path))
    labels = {"mdn_baseline": "(1) MDN", "constant_leaf_tree": "(2) soft tree, constant leaves", "tree_gated": "(3) Tree-gated"}
    print(f"{'model':34s} test NLL (mean ± std over {args.seeds} seeds)")
    for kind in COMPARE_KINDS:
        r = report["kinds"][kind]
        print(f"{labels[kind]:34s} {r['mean']:.4f} ± {r['std']:.4f}")
    print(f"{'oracle':34s} {report['oracle_nll']:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(_dump(report))
    return 0


def inspect_payload(model: Model, x_full: np.ndarray | None = None, row_info: dict | None = None) -> dict:
    """Per-node feature attention, topology and, for one input, routed mass and leaf densities."""
    if not model.has_tree:
        raise ValueError("no tree to inspect")
    cfg = model.tree_config
    names = model.schema.feature_names
    n_var = model.schema.n_variant
    filters = softmax(model.tree.w, axis=1)
    nodes, edges = [], []
    for i in range(cfg.n_internal):
        row = cfg.param_row(i)
        level = (i + 1).bit_length() - 1
        nodes.append({
            "id": f"n{i}",
            "level": level,
            "param_row": row,
            "bias": float(model.tree.b[row]),
            "weights": [
                {"name": nm, "weight": float(filters[row, k]), "segment": "variant" if k < n_var else "invariant"}
                for k, nm in enumerate(names)
            ],
        })
        for branch, child in (("left", 2 * i + 1), ("right", 2 * i + 2)):
            to = f"n{child}" if child < cfg.n_internal else f"leaf{child - cfg.n_internal}"
            edges.append({"from": f"n{i}", "to": to, "branch": branch})
    leaves = [{"id": f"leaf{m}"} for m in range(cfg.n_leaves)]
    payload = {"kind": model.kind, "depth": cfg.depth, "structure": cfg.structure,
               "nodes": nodes, "leaves": leaves, "edges": edges}
    if x_full is not None:
        xb = np.asarray(x_full, dtype=np.float64)[None, :]
        gates = soft_gates(model.tree, cfg, xb)
        masses = level_masses(gates, cfg.depth)
        for i, node in enumerate(nodes):
            lvl = node["level"]
            node["gate"] = float(gates[0, i])
            node["mass_pct"] = 100.0 * float(masses[lvl][0, i - (2**lvl - 1)])
        n_inv = model.schema.n_invariant
        d = predict_batch(model, xb[:, :n_var], xb[:, n_var:n_var + n_inv])
        for m, leaf in enumerate(leaves):
            leaf.update(alpha=float(d.alphas[0, m]), mu=float(d.mus[0, m]), sigma=float(d.sigmas[0, m]),
                        mass_pct=100.0 * float(d.alphas[0, m]))
        payload["input"] = {"features": dict(zip(names, xb[0].tolist())), **(row_info or {})}
    return payload


def graph_description(payload: dict, top_k: int = 3) -> str:
    """Graphviz DOT text: one box per node listing its strongest features."""
    lines = ["digraph soft_tree {", "  node [shape=box, fontname=monospace];"]
    for node in payload["nodes"]:
        top = sorted(node["weights"], key=lambda w: -w["weight"])[:top_k]
        rows = "\\l".join(f"{w['name']} ({w['segment'][:3]}) {w['weight']:.3f}" for w in top)
        mass = f"\\lmass {node['mass_pct']:.1f}%" if "mass_pct" in node else ""
        lines.append(f'  {node["id"]} [label="{node["id"]}\\l{rows}{mass}\\l"];')
    for leaf in payload["leaves"]:
        extra = f"\\lmu {leaf['mu']:.3f} sigma {leaf['sigma']:.3f}\\lmass {leaf['mass_pct']:.1f}%" if "mu" in leaf else ""
        lines.append(f'  {leaf["id"]} [shape=ellipse, label="{leaf["id"]}{extra}"];')
    for e in payload["edges"]:
        lines.append(f'  {e["from"]} -> {e["to"]} [label="{e["branch"]}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    model = load_model(args.model)
    if not model.has_tree:
        raise ValueError("no tree to inspect")
    x_full, info = None, None
    if args.input_row is not None:
        if not args.data:
            raise ValueError("--input-row needs --data")
        split = load_splits(args.data, model).split(args.split)
        if not 0 <= args.input_row < len(split):
            raise ValueError(f"--input-row {args.input_row} outside split of {len(split)} rows")
        i = args.input_row
        x_full = np.concatenate([split.variant[i], split.invariant[i]])
        info = {"row": i, "split": args.split, "entity_key": str(split.entity[i]), "y": float(split.y[i])}
    payload = inspect_payload(model, x_full, info)
    if args.graph_out:
        Path(args.graph_out).write_text(graph_description(payload), encoding="utf-8")
    text = json.dumps(payload, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def cmd_bench(args) -> int:
    if args.formula:
        tree = tree_param_count(args.depth, args.features)
        mlp = mlp_param_count(MlpConfig(args.mlp_depth, args.mlp_width, args.mlp_in or args.features, args.mlp_out))
        print(f"soft tree (D={args.depth}, {args.features} inputs): {tree} weights")
        print(f"MLP (L={args.mlp_depth}, W={args.mlp_width}): {mlp} weights")
        print(_dump({"tree": tree, "mlp": mlp}))
        return 0
    if not args.model:
        raise ValueError("bench needs --model (or --formula)")
    model = load_model(args.model)
    counts = model_param_count(model)
    print(f"parameters: tree {counts['tree']} / leaves_or_trunk {counts['leaves_or_trunk']} / total {counts['total']}")
    if model.kind != "tree_gated":
        raise ValueError(f"bench needs a tree_gated model, got {model.kind}")
    source = args.entities or args.data
    if not source:
        raise ValueError("bench needs --entities (a dataset CSV) to build the cache")
    table = D.load_dataset(source, model.schema)
    x = model.scaler.apply(np.concatenate([table.variant, table.invariant], axis=1))
    n_var = model.schema.n_variant
    first = {}
    for i, key in enumerate(table.entity):
        first.setdefault(str(key), i)
    cache = build_cache(model, [(k, x[i, n_var:]) for k, i in first.items()])
    rng = np.random.default_rng(args.seed)
    picks = rng.integers(0, len(table), size=args.requests)
    workload = [(str(table.entity[i]), x[i, :n_var]) for i in picks]
    result = bench_inference(model, cache, workload, args.reps)
    for rec in result["records"]:
        print(_dump({"type": "rep", **rec}))
    print(f"full {result['full_ns_per_pred'] / 1e3:.1f} us/pred, cached {result['cached_ns_per_pred'] / 1e3:.1f} us/pred, "
          f"speedup {result['speedup']:.2f}x over {result['requests']} requests x {result['repetitions']} reps")
    summary = {k: v for k, v in result.items() if k != "records"}
    print(_dump({"type": "summary", "params": counts, **summary}))
    return 0


# ---------------------------------------------------------------------------


def _add_model_flags(p):
    p.add_argument("--depth", type=int, default=3, help="soft tree depth D")
    p.add_argument("--leaf-depth", type=int, default=2, help="layers L of each leaf MLP (and the MDN trunk)")
    p.add_argument("--leaf-width", type=int, default=50, help="hidden width W")
    p.add_argument("--components", type=int, default=8, help="mixture components M of the MDN baseline")
    p.add_argument("--activation", choices=("relu", "tanh"), default="relu")
    p.add_argument("--structure", choices=("free", "oblivious"), default="free")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=2048)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--lr-min", type=float, default=0.0)
    p.add_argument("--eval-every", type=int, default=50)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treemdn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic dataset and its ground truth")
    p.add_argument("--out", default="data")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--entities", type=int, default=20)
    p.add_argument("--rows-per-entity", type=int, default=2000)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and keep the best-validation snapshot")
    p.add_argument("--kind", choices=KIND_CHOICES, default="tree-gated")
    p.add_argument("--data", required=True)
    p.add_argument("--out", "--model", dest="out", default="model.json")
    p.add_argument("--history", default=None, help="history log path (default: <out>.history.jsonl)")
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mean NLL of a model on one split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--truth", default=None, help="ground-truth sidecar; adds the oracle NLL")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="mixture parameters per row, as JSON lines")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("compare", help="train all three kinds over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--truth", default=None)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--out", default=None, help="write the structured report here")
    _add_model_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("inspect", help="export tree attention, routing and leaf densities")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--input-row", type=int, default=None)
    p.add_argument("--graph-out", default=None, help="write a Graphviz description here")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench", help="parameter counts and cached-vs-full inference latency")
    p.add_argument("--model", default=None)
    p.add_argument("--entities", default=None, help="dataset CSV supplying entities and requests")
    p.add_argument("--data", default=None, help="alias source for --entities")
    p.add_argument("--requests", type=int, default=100_000)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--formula", action="store_true", help="only evaluate the parameter-count formulas")
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--features", type=int, default=14)
    p.add_argument("--mlp-depth", type=int, default=2)
    p.add_argument("--mlp-width", type=int, default=50)
    p.add_argument("--mlp-in", type=int, default=None, help="MLP inputs (default: --features)")
    p.add_argument("--mlp-out", type=int, default=2)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, FloatingPointError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"treemdn {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
