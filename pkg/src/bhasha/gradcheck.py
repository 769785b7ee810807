"""Float64 gradient certification: every differentiable op kind (and the
composite graph layers built from them) is checked against central finite
differences on randomized small configurations.

Each named kind checks the gradient with respect to exactly one input of one
op; multi-input ops appear once per input (``matmul.a``, ``matmul.b``, ...).
The scalarization projects the op output onto a random constant direction so
structured outputs cannot hide coordinate-wise errors.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .errors import NumericError
from .graph import TokenGraph, adjacency_mask, normalize_adjacency
from .model import gat_layer, gcn_layer
from .numerics import Tensor, finite_diff_check

DEFAULT_TOLERANCE = 1e-4
DEFAULT_CONFIGS_PER_KIND = 20
_H = 1e-5


def _away_from_kink(arr: np.ndarray, margin: float = 0.15) -> np.ndarray:
    """Push values away from 0 so piecewise ops stay on one branch under FD."""
    return np.where(np.abs(arr) < margin, np.sign(arr) * margin + (arr == 0) * margin, arr)


# keyed by id(rng); each entry keeps a strong reference to its rng so the id
# cannot be recycled while the entry is alive. Cleared per suite run.
_proj_cache: dict = {}


def _project(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Project onto a random direction that is fixed per (rng, shape).

    Finite differencing re-evaluates the same closure many times; the
    direction must not change between evaluations, so it is drawn once from a
    child generator and cached against the builder's rng.
    """
    entry = _proj_cache.get(id(rng))
    if entry is None:
        entry = {"rng": rng,
                 "child": np.random.default_rng(int(rng.integers(2**63))), "R": {}}
        _proj_cache[id(rng)] = entry
    R = entry["R"].get(out.shape)
    if R is None:
        R = entry["child"].normal(size=out.shape)
        entry["R"][out.shape] = R
    return nm.sum_all(nm.mul_const(out, R))


def _rand_graph(rng: np.random.Generator, L: int) -> TokenGraph:
    g = TokenGraph(num_nodes=L, node_valid=np.ones(L, dtype=bool))
    for i in range(L - 1):
        g.add_edge(i, i + 1, "sequential")
    extra = rng.integers(0, L, size=(L, 2))
    for i, j in extra:
        if i != j:
            g.add_edge(int(i), int(j), "shared_token")
    return g


def _make_kinds():
    """kind name -> builder(seed) returning (x0 float64 array, f, h)."""
    kinds = {}

    def register(name):
        def deco(fn):
            kinds[name] = fn
            return fn
        return deco

    def rng_shapes(seed, lo=2, hi=5, ndim=2):
        rng = np.random.default_rng(seed)
        shape = tuple(int(rng.integers(lo, hi + 1)) for _ in range(ndim))
        return rng, shape

    @register("add.a")
    def _(seed):
        rng, shape = rng_shapes(seed)
        b = Tensor(rng.normal(size=shape))
        return rng.normal(size=shape), lambda x: _project(nm.add(x, b), rng)

    @register("add.b")
    def _(seed):
        rng, shape = rng_shapes(seed)
        a = rng.normal(size=shape)
        return rng.normal(size=shape), lambda x: _project(nm.add(Tensor(a), x), rng)

    @register("sub.a")
    def _(seed):
        rng, shape = rng_shapes(seed)
        b = Tensor(rng.normal(size=shape))
        return rng.normal(size=shape), lambda x: _project(nm.sub(x, b), rng)

    @register("sub.b")
    def _(seed):
        rng, shape = rng_shapes(seed)
        a = rng.normal(size=shape)
        return rng.normal(size=shape), lambda x: _project(nm.sub(Tensor(a), x), rng)

    @register("mul.a")
    def _(seed):
        rng, shape = rng_shapes(seed)
        b = Tensor(rng.normal(size=shape))
        return rng.normal(size=shape), lambda x: _project(nm.mul(x, b), rng)

    @register("mul.b")
    def _(seed):
        rng, shape = rng_shapes(seed)
        a = rng.normal(size=shape)
        return rng.normal(size=shape), lambda x: _project(nm.mul(Tensor(a), x), rng)

    @register("scale")
    def _(seed):
        rng, shape = rng_shapes(seed)
        s = float(rng.normal())
        return rng.normal(size=shape), lambda x: _project(nm.scale(x, s), rng)

    @register("add_const")
    def _(seed):
        rng, shape = rng_shapes(seed)
        c = rng.normal(size=(1, shape[1]))  # broadcast without enlarging
        return rng.normal(size=shape), lambda x: _project(nm.add_const(x, c), rng)

    @register("mul_const")
    def _(seed):
        rng, shape = rng_shapes(seed)
        c = rng.normal(size=shape)
        return rng.normal(size=shape), lambda x: _project(nm.mul_const(x, c), rng)

    @register("add_bias.x")
    def _(seed):
        rng, shape = rng_shapes(seed)
        b = Tensor(rng.normal(size=(shape[-1],)))
        return rng.normal(size=shape), lambda x: _project(nm.add_bias(x, b), rng)

    @register("add_bias.b")
    def _(seed):
        rng, shape = rng_shapes(seed)
        a = rng.normal(size=shape)
        return rng.normal(size=(shape[-1],)), lambda x: _project(nm.add_bias(Tensor(a), x), rng)

    @register("matmul.a")
    def _(seed):
        rng = np.random.default_rng(seed)
        m, k, n = (int(rng.integers(2, 5)) for _ in range(3))
        b = Tensor(rng.normal(size=(k, n)))
        return rng.normal(size=(m, k)), lambda x: _project(nm.matmul(x, b), rng)

    @register("matmul.b")
    def _(seed):
        rng = np.random.default_rng(seed)
        m, k, n = (int(rng.integers(2, 5)) for _ in range(3))
        a = rng.normal(size=(m, k))
        return rng.normal(size=(k, n)), lambda x: _project(nm.matmul(Tensor(a), x), rng)

    @register("matmul.batched")
    def _(seed):
        rng = np.random.default_rng(seed)
        B, m, k, n = 2, *(int(rng.integers(2, 4)) for _ in range(3))
        b = Tensor(rng.normal(size=(B, k, n)))
        return rng.normal(size=(B, m, k)), lambda x: _project(nm.matmul(x, b), rng)

    @register("reshape")
    def _(seed):
        rng = np.random.default_rng(seed)
        m, n = int(rng.integers(2, 5)), 4
        return rng.normal(size=(m, n)), lambda x: _project(nm.reshape(x, (m * 2, n // 2)), rng)

    @register("transpose")
    def _(seed):
        rng = np.random.default_rng(seed)
        shape = tuple(int(rng.integers(2, 4)) for _ in range(3))
        return rng.normal(size=shape), lambda x: _project(nm.transpose(x, (2, 0, 1)), rng)

    @register("gather_rows")
    def _(seed):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(3, 6)), int(rng.integers(2, 5))
        idx = rng.integers(0, n, size=int(rng.integers(2, 7)))  # repeats exercise scatter-add
        return rng.normal(size=(n, d)), lambda x: _project(nm.gather_rows(x, idx), rng)

    @register("sum_all")
    def _(seed):
        rng, shape = rng_shapes(seed)
        return rng.normal(size=shape), lambda x: nm.sum_all(x)

    @register("softmax")
    def _(seed):
        rng, shape = rng_shapes(seed)
        return rng.normal(size=shape), lambda x: _project(nm.softmax(x, axis=-1), rng)

    @register("softmax.masked")
    def _(seed):
        rng, shape = rng_shapes(seed, lo=3, hi=5)
        mask = np.zeros(shape)
        mask[:, -1] = -1e30  # one masked-out column per row
        return rng.normal(size=shape), lambda x: _project(
            nm.softmax(nm.add_const(x, mask), axis=-1), rng)

    @register("log_softmax")
    def _(seed):
        rng, shape = rng_shapes(seed)
        return rng.normal(size=shape), lambda x: _project(nm.log_softmax(x, axis=-1), rng)

    @register("layer_norm.x")
    def _(seed):
        rng, shape = rng_shapes(seed, lo=3, hi=6)
        gain = Tensor(rng.normal(size=(shape[-1],)))
        bias = Tensor(rng.normal(size=(shape[-1],)))
        return rng.normal(size=shape), lambda x: _project(nm.layer_norm(x, gain, bias), rng)

    @register("layer_norm.gain")
    def _(seed):
        rng, shape = rng_shapes(seed, lo=3, hi=6)
        a = rng.normal(size=shape)
        bias = Tensor(rng.normal(size=(shape[-1],)))
        return rng.normal(size=(shape[-1],)), lambda x: _project(
            nm.layer_norm(Tensor(a), x, bias), rng)

    @register("layer_norm.bias")
    def _(seed):
        rng, shape = rng_shapes(seed, lo=3, hi=6)
        a = rng.normal(size=shape)
        gain = Tensor(rng.normal(size=(shape[-1],)))
        return rng.normal(size=(shape[-1],)), lambda x: _project(
            nm.layer_norm(Tensor(a), gain, x), rng)

    @register("relu")
    def _(seed):
        rng, shape = rng_shapes(seed)
        return _away_from_kink(rng.normal(size=shape)), lambda x: _project(nm.relu(x), rng)

    @register("gelu")
    def _(seed):
        rng, shape = rng_shapes(seed)
        return rng.normal(size=shape), lambda x: _project(nm.gelu(x), rng)

    @register("elu")
    def _(seed):
        rng, shape = rng_shapes(seed)
        return _away_from_kink(rng.normal(size=shape)), lambda x: _project(nm.elu(x), rng)

    @register("leaky_relu")
    def _(seed):
        rng, shape = rng_shapes(seed)
        return _away_from_kink(rng.normal(size=shape)), lambda x: _project(
            nm.leaky_relu(x, 0.2), rng)

    # ---- composite graph layers -------------------------------------------

    def _gcn_setup(seed):
        rng = np.random.default_rng(seed)
        L, D = int(rng.integers(4, 7)), int(rng.integers(2, 5))
        g = _rand_graph(rng, L)
        A = normalize_adjacency(g, dtype=np.float64)
        w = rng.normal(size=(D, D))
        b = rng.normal(size=(D,))
        # bias offset keeps pre-activations off the ReLU kink
        h0 = _away_from_kink(rng.normal(size=(L, D)), 0.3)
        return rng, A, w, b, h0

    @register("gcn_layer.h")
    def _(seed):
        rng, A, w, b, h0 = _gcn_setup(seed)
        params = {"g.w": Tensor(w), "g.b": Tensor(b)}
        return h0, lambda x: _project(gcn_layer(params, "g", x, A), rng)

    @register("gcn_layer.w")
    def _(seed):
        rng, A, w, b, h0 = _gcn_setup(seed)

        def f(x):
            params = {"g.w": x, "g.b": Tensor(b)}
            return _project(gcn_layer(params, "g", Tensor(h0), A), rng)
        return w, f

    def _gat_setup(seed):
        rng = np.random.default_rng(seed)
        L, D = int(rng.integers(4, 7)), int(rng.integers(2, 5))
        g = _rand_graph(rng, L)
        M = adjacency_mask(g, dtype=np.float64)
        w = rng.normal(size=(D, D))
        a_src = rng.normal(size=(D, 1))
        a_dst = rng.normal(size=(D, 1))
        h0 = rng.normal(size=(L, D))
        return rng, M, w, a_src, a_dst, h0

    @register("gat_layer.h")
    def _(seed):
        rng, M, w, a_src, a_dst, h0 = _gat_setup(seed)
        params = {"g.w": Tensor(w), "g.a_src": Tensor(a_src), "g.a_dst": Tensor(a_dst)}
        return h0, lambda x: _project(gat_layer(params, "g", x, M), rng)

    @register("gat_layer.w")
    def _(seed):
        rng, M, w, a_src, a_dst, h0 = _gat_setup(seed)

        def f(x):
            params = {"g.w": x, "g.a_src": Tensor(a_src), "g.a_dst": Tensor(a_dst)}
            return _project(gat_layer(params, "g", Tensor(h0), M), rng)
        return w, f

    @register("gat_layer.a")
    def _(seed):
        rng, M, w, a_src, a_dst, h0 = _gat_setup(seed)

        def f(x):
            params = {"g.w": Tensor(w), "g.a_src": x, "g.a_dst": Tensor(a_dst)}
            return _project(gat_layer(params, "g", Tensor(h0), M), rng)
        return a_src, f

    @register("attention")
    def _(seed):
        # single-head scaled dot-product attention composed from primitives
        rng = np.random.default_rng(seed)
        S, D = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        wq = Tensor(rng.normal(size=(D, D)))
        wk = Tensor(rng.normal(size=(D, D)))
        wv = Tensor(rng.normal(size=(D, D)))

        def f(x):
            q = nm.matmul(x, wq)
            k = nm.matmul(x, wk)
            v = nm.matmul(x, wv)
            scores = nm.scale(nm.matmul(q, nm.transpose(k, (1, 0))), 1.0 / np.sqrt(D))
            return _project(nm.matmul(nm.softmax(scores, axis=-1), v), rng)
        return rng.normal(size=(S, D)), f

    return kinds


KINDS = _make_kinds()


def run_gradient_suite(tolerance: float = DEFAULT_TOLERANCE,
                       configs_per_kind: int = DEFAULT_CONFIGS_PER_KIND,
                       base_seed: int = 0, h: float = _H) -> dict:
    """Run all kinds; returns per-kind worst relative error and a pass flag."""
    _proj_cache.clear()
    results = {}
    for name, builder in sorted(KINDS.items()):
        worst = 0.0
        for k in range(configs_per_kind):
            x0, f = builder(base_seed * 10000 + k)
            err = finite_diff_check(f, Tensor(np.asarray(x0, dtype=np.float64)), h=h)
            worst = max(worst, err)
        results[name] = worst
    return {
        "tolerance": tolerance,
        "configs_per_kind": configs_per_kind,
        "kinds": results,
        "worst": max(results.values()),
        "passed": all(v <= tolerance for v in results.values()),
    }


def require_gradients_certified(**kwargs):
    """Raise :class:`NumericError` unless the full suite passes."""
    res = run_gradient_suite(**kwargs)
    if not res["passed"]:
        bad = {k: v for k, v in res["kinds"].items() if v > res["tolerance"]}
        raise NumericError(f"gradient certification failed: {bad}")
    return res
