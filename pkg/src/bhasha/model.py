"""The encoder: embeddings, transformer layers, graph-convolution and
graph-attention layers, the graph-enhanced block that reroutes the query/key
source through a GNN stack while values keep their original path, hidden-state
mixing heads, and parameter accounting.

All math runs through :mod:`bhasha.numerics`; a model is a config plus a flat
dict of named parameter tensors, so checkpoints and the optimizer stay simple.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ContractError, ShapeError
from .graph import TokenGraph, adjacency_mask, normalize_adjacency
from .numerics import Tensor

NEG_INF = -1e30


@dataclass
class GetrConfig:
    enabled: bool = False
    gnn_kind: str = "GAT"        # "GCN" | "GAT"
    gnn_depth: int = 2
    insertion_index: Optional[int] = None  # default: last encoder layer


@dataclass
class HalConfig:
    enabled: bool = False
    depth: int = 2
    alpha_mode: str = "fixed"    # "fixed" | "dynamic"
    alpha: float = 0.2


@dataclass
class EncoderConfig:
    vocab_size: int
    num_labels: int
    task: str = "sentence_classification"
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 128
    num_layers: int = 4
    max_len: int = 32
    getr: GetrConfig = field(default_factory=GetrConfig)
    hal: HalConfig = field(default_factory=HalConfig)
    dropout: float = 0.0
    seed: int = 0
    dtype: str = "float32"       # "float32" | "float64"

    def __post_init__(self):
        if isinstance(self.getr, dict):
            self.getr = GetrConfig(**self.getr)
        if isinstance(self.hal, dict):
            self.hal = HalConfig(**self.hal)
        self.validate()

    def validate(self):
        if self.d_model % self.num_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.getr.insertion_index is not None and not (
                0 <= self.getr.insertion_index < self.num_layers):
            raise ConfigError("getr.insertion_index out of range")
        if self.getr.gnn_kind not in ("GCN", "GAT"):
            raise ConfigError(f"unknown gnn_kind {self.getr.gnn_kind!r}")
        if self.hal.alpha_mode not in ("fixed", "dynamic"):
            raise ConfigError(f"unknown alpha_mode {self.hal.alpha_mode!r}")
        if not (0.0 <= self.hal.alpha <= 1.0):
            raise ConfigError("hal.alpha must be in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def getr_index(self) -> Optional[int]:
        if not self.getr.enabled:
            return None
        return self.getr.insertion_index if self.getr.insertion_index is not None else self.num_layers - 1


# ---------------------------------------------------------------------------
# parameters


def _layer_shapes(d: int, f: int) -> dict:
    return {
        "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,), "wv": (d, d), "bv": (d,),
        "wo": (d, d), "bo": (d,),
        "ln1_g": (d,), "ln1_b": (d,),
        "ffn_w1": (d, f), "ffn_b1": (f,), "ffn_w2": (f, d), "ffn_b2": (d,),
        "ln2_g": (d,), "ln2_b": (d,),
    }


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple]:
    """Canonical name -> shape map; shapes derive deterministically from config."""
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_len, d),
    }
    for i in range(cfg.num_layers):
        for name, shp in _layer_shapes(d, f).items():
            shapes[f"layer{i}.{name}"] = shp
    if cfg.getr.enabled:
        gi = cfg.getr_index
        for k in range(cfg.getr.gnn_depth):
            if cfg.getr.gnn_kind == "GCN":
                shapes[f"layer{gi}.gnn{k}.w"] = (d, d)
                shapes[f"layer{gi}.gnn{k}.b"] = (d,)
            else:
                shapes[f"layer{gi}.gnn{k}.w"] = (d, d)
                shapes[f"layer{gi}.gnn{k}.a_src"] = (d, 1)
                shapes[f"layer{gi}.gnn{k}.a_dst"] = (d, 1)
    if cfg.hal.enabled:
        for k in range(cfg.hal.depth):
            shapes[f"hal{k}.w"] = (d, d)
            shapes[f"hal{k}.b"] = (d,)
            for name, shp in _layer_shapes(d, f).items():
                if name.startswith(("ln", "ffn")):
                    shapes[f"hal{k}.{name}"] = shp
    shapes["head.w"] = (d, cfg.num_labels)
    shapes["head.b"] = (cfg.num_labels,)
    return shapes


def count_parameters(cfg: EncoderConfig) -> int:
    """Exact learnable scalar count for a config."""
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: EncoderConfig, rng: Optional[np.random.Generator] = None) -> dict[str, Tensor]:
    """Seeded Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains."""
    rng = rng or np.random.default_rng(cfg.seed)
    dt = cfg.np_dtype
    params = {}
    for name, shape in param_shapes(cfg).items():
        tail = name.rsplit(".", 1)[-1]
        if tail.endswith("_g") or tail == "g":
            data = np.ones(shape, dtype=dt)
        elif tail.startswith("b") or tail.endswith("_b"):
            data = np.zeros(shape, dtype=dt)
        else:
            data = rng.normal(0.0, 0.02, size=shape).astype(dt)
        params[name] = Tensor(data, requires_grad=True)
    return params


def apply_tet_vectors(params: dict[str, Tensor], vectors: dict[int, np.ndarray]):
    """Overwrite embedding rows with transferred vectors (pre-training step)."""
    emb = params["tok_emb"].data
    for tid, vec in vectors.items():
        emb[tid] = vec.astype(emb.dtype)


# ---------------------------------------------------------------------------
# layers


def embed(params, cfg: EncoderConfig, ids: np.ndarray) -> Tensor:
    """Token embedding + learned positional embedding; (B, S) ids -> (B, S, D)."""
    ids = np.asarray(ids)
    B, S = ids.shape
    if S > cfg.max_len:
        raise ContractError(f"sequence width {S} exceeds max_len {cfg.max_len}")
    if ids.max() >= cfg.vocab_size or ids.min() < 0:
        raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
    tok = nm.gather_rows(params["tok_emb"], ids.reshape(-1))
    pos = nm.gather_rows(params["pos_emb"], np.tile(np.arange(S), B))
    return nm.reshape(nm.add(tok, pos), (B, S, cfg.d_model))


def attention_mask(lengths, S: int, dtype) -> np.ndarray:
    """Additive key mask of shape (B, 1, 1, S): 0 on valid keys, -1e30 on PAD."""
    B = len(lengths)
    mask = np.zeros((B, 1, 1, S), dtype=dtype)
    for b, ln in enumerate(lengths):
        mask[b, 0, 0, ln:] = NEG_INF
    return mask


def valid_mask(lengths, S: int) -> np.ndarray:
    out = np.zeros((len(lengths), S), dtype=bool)
    for b, ln in enumerate(lengths):
        out[b, :ln] = True
    return out


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return nm.mul_const(x, keep)


def _mha(q_src: Tensor, k_src: Tensor, v_src: Tensor, params, prefix: str,
         cfg: EncoderConfig, mask: np.ndarray) -> Tensor:
    """Multi-head scaled dot-product attention over (B, S, D) sources."""
    B, S, D = q_src.shape
    h = cfg.num_heads
    dh = D // h

    def heads(x: Tensor, w: str, b: str) -> Tensor:
        flat = nm.reshape(x, (B * S, D))
        y = nm.add_bias(nm.matmul(flat, params[f"{prefix}.{w}"]), params[f"{prefix}.{b}"])
        return nm.transpose(nm.reshape(y, (B, S, h, dh)), (0, 2, 1, 3))

    q = heads(q_src, "wq", "bq")
    k = heads(k_src, "wk", "bk")
    v = heads(v_src, "wv", "bv")
    scores = nm.scale(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    scores = nm.add_const(scores, mask)
    attn = nm.softmax(scores, axis=-1)
    ctx = nm.matmul(attn, v)                          # (B, h, S, dh)
    ctx = nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (B * S, D))
    out = nm.add_bias(nm.matmul(ctx, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])
    return nm.reshape(out, (B, S, D))


def _ffn(x: Tensor, params, prefix: str) -> Tensor:
    hidden = nm.gelu(nm.add_bias(nm.matmul(x, params[f"{prefix}.ffn_w1"]), params[f"{prefix}.ffn_b1"]))
    return nm.add_bias(nm.matmul(hidden, params[f"{prefix}.ffn_w2"]), params[f"{prefix}.ffn_b2"])


def transformer_layer(params, cfg: EncoderConfig, prefix: str, H: Tensor,
                      mask: np.ndarray, rng=None, q_k_source: Optional[Tensor] = None) -> Tensor:
    """Standard encoder layer; ``q_k_source`` optionally reroutes the Q/K input."""
    B, S, D = H.shape
    src = q_k_source if q_k_source is not None else H
    attn = _mha(src, src, H, params, prefix, cfg, mask)
    attn = _dropout(attn, cfg.dropout, rng)
    H1 = nm.layer_norm(nm.add(H, attn), params[f"{prefix}.ln1_g"], params[f"{prefix}.ln1_b"])
    flat = nm.reshape(H1, (B * S, D))
    f = _dropout(_ffn(flat, params, prefix), cfg.dropout, rng)
    out = nm.layer_norm(nm.add(flat, f), params[f"{prefix}.ln2_g"], params[f"{prefix}.ln2_b"])
    return nm.reshape(out, (B, S, D))


def gcn_layer(params, prefix: str, H_flat: Tensor, A_hat: np.ndarray) -> Tensor:
    """ReLU(Â · H · W + b) over flattened node features."""
    A = Tensor(A_hat)
    xw = nm.add_bias(nm.matmul(H_flat, params[f"{prefix}.w"]), params[f"{prefix}.b"])
    return nm.relu(nm.matmul(A, xw))


def gat_layer(params, prefix: str, H_flat: Tensor, adj_mask: np.ndarray) -> Tensor:
    """Single-head graph attention.

    alpha_ij = softmax over N(i) ∪ {i} of LeakyReLU(a_srcᵀ W h_i + a_dstᵀ W h_j),
    out_i = ELU(Σ_j alpha_ij W h_j). ``adj_mask`` is 0 on edges/self-loops and
    -1e30 elsewhere.
    """
    L = H_flat.shape[0]
    Wh = nm.matmul(H_flat, params[f"{prefix}.w"])                 # (L, D)
    s_src = nm.matmul(Wh, params[f"{prefix}.a_src"])              # (L, 1)
    s_dst = nm.matmul(Wh, params[f"{prefix}.a_dst"])              # (L, 1)
    ones_row = Tensor(np.ones((1, L), dtype=H_flat.dtype))
    ones_col = Tensor(np.ones((L, 1), dtype=H_flat.dtype))
    logits = nm.add(nm.matmul(s_src, ones_row), nm.matmul(ones_col, nm.transpose(s_dst, (1, 0))))
    logits = nm.add_const(nm.leaky_relu(logits, 0.2), adj_mask)
    alpha = nm.softmax(logits, axis=-1)
    return nm.elu(nm.matmul(alpha, Wh))


def gnn_stack(params, cfg: EncoderConfig, prefix: str, H_flat: Tensor, g: TokenGraph) -> Tensor:
    if cfg.getr.gnn_kind == "GCN":
        A_hat = normalize_adjacency(g, dtype=cfg.np_dtype)
        for k in range(cfg.getr.gnn_depth):
            H_flat = gcn_layer(params, f"{prefix}.gnn{k}", H_flat, A_hat)
    else:
        mask = adjacency_mask(g, dtype=cfg.np_dtype)
        for k in range(cfg.getr.gnn_depth):
            H_flat = gat_layer(params, f"{prefix}.gnn{k}", H_flat, mask)
    return H_flat


def getr_block(params, cfg: EncoderConfig, prefix: str, H: Tensor, g: TokenGraph,
               mask: np.ndarray, rng=None) -> Tensor:
    """Transformer layer whose Q/K source is the GNN-enhanced hidden state.

    H' = flatten(H); H'_G = GNN-stack(H'); Q/K come from the unflattened H_G
    while V keeps its original computation path from H.
    """
    B, S, D = H.shape
    if g.num_nodes != B * S:
        raise ContractError(f"graph has {g.num_nodes} nodes, batch needs {B * S}")
    H_flat = nm.reshape(H, (B * S, D))
    H_G = nm.reshape(gnn_stack(params, cfg, prefix, H_flat, g), (B, S, D))
    return transformer_layer(params, cfg, prefix, H, mask, rng=rng, q_k_source=H_G)


def hal_block(params, prefix: str, X: Tensor) -> Tensor:
    """Lightweight position-wise block: linear + residual + LN, FFN + residual + LN."""
    y = nm.add_bias(nm.matmul(X, params[f"{prefix}.w"]), params[f"{prefix}.b"])
    u = nm.layer_norm(nm.add(X, y), params[f"{prefix}.ln1_g"], params[f"{prefix}.ln1_b"])
    f = _ffn(u, params, prefix)
    return nm.layer_norm(nm.add(u, f), params[f"{prefix}.ln2_g"], params[f"{prefix}.ln2_b"])


def hal_mix(h_H: Tensor, h_L: Tensor, y_H: np.ndarray, y_L: np.ndarray, alpha: float,
            valid_H: Optional[np.ndarray] = None, valid_L: Optional[np.ndarray] = None):
    """Convex combination of hidden states and (soft) labels.

    Returns ``(h_A, y_A, loss_mask)``; for sequence inputs the mask excludes
    positions where either side is PAD.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    if h_H.shape != h_L.shape:
        raise ShapeError(f"hidden shapes {h_H.shape} and {h_L.shape} must match")
    if np.shape(y_H) != np.shape(y_L):
        raise ShapeError("label shapes must match")
    h_A = nm.add(nm.scale(h_H, alpha), nm.scale(h_L, 1.0 - alpha))
    y_A = alpha * np.asarray(y_H, dtype=float) + (1.0 - alpha) * np.asarray(y_L, dtype=float)
    loss_mask = None
    if valid_H is not None and valid_L is not None:
        loss_mask = np.asarray(valid_H, dtype=bool) & np.asarray(valid_L, dtype=bool)
    return h_A, y_A, loss_mask


def dynamic_alpha(step: int, total: int) -> float:
    """Linear schedule from 1 (all high-resource) to 0 (all low-resource)."""
    if total <= 0:
        raise ContractError("total steps must be positive")
    if not (0 <= step <= total):
        raise ContractError(f"step {step} outside [0, {total}]")
    return (total - step) / total


# ---------------------------------------------------------------------------
# forward


def forward(params, cfg: EncoderConfig, ids: np.ndarray, lengths,
            g: Optional[TokenGraph] = None, hal_pairs=None, alpha: Optional[float] = None,
            rng=None) -> dict:
    """Run the encoder and task head.

    Args:
        ids: (B, S) token ids, PAD-padded.
        lengths: valid length per sentence (CLS included).
        g: token graph; required iff graph enhancement is enabled.
        hal_pairs: list of (hrl_batch_index, lrl_batch_index) pairs; when
            given and mixing is enabled, augmented logits are produced.
        alpha: mixing coefficient override (dynamic schedules pass it per step).

    Returns a dict with ``logits`` ((B, C) sentence / (B, S, C) sequence),
    ``cls`` final CLS states, and for augmentation ``aug_logits`` plus the
    effective ``alpha``.
    """
    ids = np.asarray(ids)
    B, S = ids.shape
    D = cfg.d_model
    dt = cfg.np_dtype
    if cfg.getr.enabled and g is None:
        raise ContractError("graph enhancement enabled but no token graph supplied")

    H = embed(params, cfg, ids)
    mask = attention_mask(lengths, S, dt)
    gi = cfg.getr_index
    for i in range(cfg.num_layers):
        prefix = f"layer{i}"
        if gi is not None and i == gi:
            H = getr_block(params, cfg, prefix, H, g, mask, rng=rng)
        else:
            H = transformer_layer(params, cfg, prefix, H, mask, rng=rng)

    out: dict = {}
    eff_alpha = alpha if alpha is not None else cfg.hal.alpha

    if cfg.task == "sentence_classification":
        cls_idx = np.arange(B) * S
        X = nm.gather_rows(nm.reshape(H, (B * S, D)), cls_idx)    # (B, D)
        if cfg.hal.enabled:
            for k in range(cfg.hal.depth):
                X = hal_block(params, f"hal{k}", X)
        out["cls"] = X
        out["logits"] = nm.add_bias(nm.matmul(X, params["head.w"]), params["head.b"])
        if cfg.hal.enabled and hal_pairs:
            hi = np.array([p[0] for p in hal_pairs])
            li = np.array([p[1] for p in hal_pairs])
            # the head is affine, so mixing its outputs equals projecting the
            # mixed hidden states; this form keeps alpha in {0, 1} exactly
            # equal to the corresponding pure rows
            lg = out["logits"]
            out["aug_logits"] = nm.add(nm.scale(nm.gather_rows(lg, hi), eff_alpha),
                                       nm.scale(nm.gather_rows(lg, li), 1.0 - eff_alpha))
            out["alpha"] = eff_alpha
    else:
        X = nm.reshape(H, (B * S, D))
        if cfg.hal.enabled:
            for k in range(cfg.hal.depth):
                X = hal_block(params, f"hal{k}", X)
        cls_idx = np.arange(B) * S
        out["cls"] = nm.gather_rows(X, cls_idx)
        logits = nm.add_bias(nm.matmul(X, params["head.w"]), params["head.b"])
        out["logits"] = nm.reshape(logits, (B, S, cfg.num_labels))
        if cfg.hal.enabled and hal_pairs:
            rows_h = np.concatenate([p[0] * S + np.arange(S) for p in hal_pairs])
            rows_l = np.concatenate([p[1] * S + np.arange(S) for p in hal_pairs])
            # affine head: mixing its outputs equals projecting mixed states
            aug = nm.add(nm.scale(nm.gather_rows(logits, rows_h), eff_alpha),
                         nm.scale(nm.gather_rows(logits, rows_l), 1.0 - eff_alpha))
            out["aug_logits"] = nm.reshape(aug, (len(hal_pairs), S, cfg.num_labels))
            out["alpha"] = eff_alpha
    return out


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, cfg: EncoderConfig, params: dict[str, Tensor], extra: dict | None = None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "params": {name: t.data.tolist() for name, t in params.items()},
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = EncoderConfig(**payload["config"])
    dt = cfg.np_dtype
    expected = param_shapes(cfg)
    params = {}
    for name, shape in expected.items():
        if name not in payload["params"]:
            raise ConfigError(f"checkpoint missing parameter {name}")
        arr = np.asarray(payload["params"][name], dtype=dt)
        if arr.shape != tuple(shape):
            raise ConfigError(f"checkpoint parameter {name} has shape {arr.shape}, expected {shape}")
        params[name] = Tensor(arr, requires_grad=True)
    return cfg, params, payload.get("extra", {})
