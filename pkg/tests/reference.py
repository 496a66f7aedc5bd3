"""Independent, precision-generic re-implementation of the batch NLL.

Used only as the function handed to ``finite_diff_gradient``. It shares no
code with the package: leaf masses come from explicit root-to-leaf path
enumeration, and every operation runs either in ``np.longdouble`` or in
mpmath object arrays.
"""

import numpy as np
from mpmath import mp, mpf

from treemdn.mixture import Model


class LongDouble:
    dtype = np.longdouble

    @staticmethod
    def arr(a):
        return np.asarray(a, dtype=np.longdouble)

    exp = staticmethod(np.exp)
    log = staticmethod(np.log)
    tanh = staticmethod(np.tanh)
    pi = np.longdouble("3.14159265358979323846264338327950288")


class MpBackend:
    def __init__(self, dps=40):
        mp.dps = dps
        self.pi = mp.pi
        self._exp = np.frompyfunc(mp.exp, 1, 1)
        self._log = np.frompyfunc(mp.log, 1, 1)
        self._tanh = np.frompyfunc(mp.tanh, 1, 1)

    def arr(self, a):
        a = np.asarray(a)
        if a.dtype == object:
            return a
        return np.frompyfunc(lambda v: mpf(float(v)), 1, 1)(a).astype(object)

    def exp(self, a):
        return self._exp(a)

    def log(self, a):
        return self._log(a)

    def tanh(self, a):
        return self._tanh(a)


def _mlp(bk, params, prefix, x, activation):
    k = 0
    h = x
    layers = []
    while f"{prefix}.W{k}" in params:
        layers.append((params[f"{prefix}.W{k}"], params[f"{prefix}.b{k}"]))
        k += 1
    for i, (w, b) in enumerate(layers):
        h = h @ w.T + b
        if i < len(layers) - 1:
            if activation == "relu":
                h = np.where(h > 0, h, h * 0)
            else:
                h = bk.tanh(h)
    return h


def _softmax_rows(bk, a):
    m = np.max(a, axis=-1, keepdims=True)
    e = bk.exp(a - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def _leaf_masses(bk, params, depth, structure, x):
    filt = _softmax_rows(bk, params["tree.w"])
    z = x @ filt.T + params["tree.b"]  # (B, rows)
    g = 1 / (1 + bk.exp(-z))
    cols = []
    for leaf in range(2**depth):
        node, mass = 0, None
        for level in range(depth):
            bit = (leaf >> (depth - 1 - level)) & 1
            row = level if structure == "oblivious" else node
            f = g[:, row] if bit else 1 - g[:, row]
            mass = f if mass is None else mass * f
            node = 2 * node + 1 + bit
        cols.append(mass)
    return np.stack(cols, axis=1)


def reference_nll(bk, model: Model, params: dict, variant, invariant, y):
    """Mean NLL computed from scratch in the backend's precision."""
    P = {k: bk.arr(v) for k, v in params.items()}
    V, I, Y = bk.arr(variant), bk.arr(invariant), bk.arr(y)
    x = np.concatenate([V, I], axis=1)
    act = (model.trunk or (model.leaves[0] if model.leaves else None))
    act = act.activation if act is not None else "relu"
    if model.kind == "mdn_baseline":
        m = model.n_components
        out = _mlp(bk, P, "trunk", x, act)
        mus, raw, logits = out[:, :m], out[:, m : 2 * m], out[:, 2 * m :]
        alphas = _softmax_rows(bk, logits)
    else:
        cfg = model.tree_config
        alphas = _leaf_masses(bk, P, cfg.depth, cfg.structure, x)
        if model.kind == "constant_leaf_tree":
            mus = np.broadcast_to(P["const.mu"], alphas.shape)
            raw = np.broadcast_to(P["const.log_sigma_raw"], alphas.shape)
        else:
            outs = [_mlp(bk, P, f"leaf{k}", I, act) for k in range(cfg.n_leaves)]
            mus = np.stack([o[:, 0] for o in outs], axis=1)
            raw = np.stack([o[:, 1] for o in outs], axis=1)
    log_sigma = np.minimum(np.maximum(raw, -7), 7)
    sigma = bk.exp(log_sigma)
    z = (Y[:, None] - mus) / sigma
    dens = alphas * bk.exp(-z * z / 2) / (sigma * (2 * bk.pi) ** 0.5)
    return -np.sum(bk.log(np.sum(dens, axis=1))) / len(y)


def flatten(params: dict):
    names = list(params)
    shapes = [params[n].shape for n in names]
    flat = np.concatenate([params[n].ravel() for n in names])
    return names, shapes, flat


def unflatten(names, shapes, vec) -> dict:
    out, o = {}, 0
    for n, s in zip(names, shapes):
        k = int(np.prod(s))
        out[n] = vec[o : o + k].reshape(s)
        o += k
    return out


def sample_coords(names, shapes, n_coords, rng):
    """At least one coordinate from every parameter group, the rest uniform."""
    sizes = [int(np.prod(s)) for s in shapes]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = {int(offsets[i] + rng.integers(sizes[i])) for i in range(len(names))}
    total = int(offsets[-1])
    extra = rng.choice(total, size=min(total, max(0, n_coords - len(picks))), replace=False)
    picks.update(int(k) for k in extra)
    return sorted(picks)


def gradient_check(model, variant, invariant, y, analytic: dict, indices=None, tol=1e-5):
    """Relative error of ``analytic`` against central differences of the reference loss.

    Differences are taken in long double with eps 1e-6. Any coordinate that
    misses ``tol / 10`` is re-examined with 40-digit arithmetic and eps 1e-7,
    where round-off is negligible and only truncation error remains.
    Returns (max relative error, list of checked indices).
    """
    from treemdn.numerics import finite_diff_gradient

    names, shapes, flat = flatten(model.parameters())
    an = np.concatenate([analytic[n].ravel() for n in names])
    idx = list(range(flat.size)) if indices is None else list(indices)

    def make_f(bk):
        return lambda vec: reference_nll(bk, model, unflatten(names, shapes, vec), variant, invariant, y)

    num = finite_diff_gradient(make_f(LongDouble), flat, eps=1e-6, indices=idx)
    rel = _rel(an, num)
    doubtful = [k for k in idx if rel[k] > tol / 10]
    if doubtful:
        hp = finite_diff_gradient(make_f(MpBackend()), flat, eps=1e-7, indices=doubtful)
        num[doubtful] = hp[doubtful]
        rel = _rel(an, num)
    return float(np.nanmax(rel[idx])), idx


def _rel(a, n, floor=1e-8):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
