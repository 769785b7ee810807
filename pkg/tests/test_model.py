"""Tests for the encoder: graph layers against per-node loop oracles, hidden
mixing, parameter accounting, checkpoints, and forward-pass invariants."""

import numpy as np
import pytest

from bhasha.errors import ConfigError, ContractError, ShapeError
from bhasha.graph import SEQUENTIAL, TokenGraph, adjacency_mask, normalize_adjacency
from bhasha.model import (EncoderConfig, GetrConfig, HalConfig,
                          count_parameters, dynamic_alpha, embed, forward,
                          gat_layer, gcn_layer, hal_mix, init_params,
                          load_checkpoint, param_shapes, save_checkpoint)
from bhasha.numerics import Tensor


def _graph(n, edges):
    g = TokenGraph(num_nodes=n, node_valid=np.ones(n, dtype=bool))
    for i, j in edges:
        g.add_edge(i, j, SEQUENTIAL)
    return g


def _cfg(**kw):
    base = dict(vocab_size=11, num_labels=3, d_model=8, num_heads=2, d_ff=16,
                num_layers=2, max_len=6, dtype="float64")
    base.update(kw)
    return EncoderConfig(**base)


# ---------------------------------------------------------------------------
# graph-convolution layer


def test_gcn_layer_matches_per_node_loop_oracle():
    rng = np.random.default_rng(0)
    n, d = 5, 4
    g = _graph(n, [(0, 1), (1, 2), (3, 4), (0, 4)])
    A = normalize_adjacency(g, dtype=np.float64)
    W = rng.normal(size=(d, d))
    b = rng.normal(size=(d,))
    H = rng.normal(size=(n, d))
    params = {"g.w": Tensor(W), "g.b": Tensor(b)}
    out = gcn_layer(params, "g", Tensor(H), A).data
    xw = H @ W + b
    for i in range(n):
        acc = np.zeros(d)
        for j in range(n):
            acc += A[i, j] * xw[j]
        np.testing.assert_allclose(out[i], np.maximum(acc, 0.0), atol=1e-12)


def test_gcn_two_connected_nodes_average_messages():
    """With identity weights, zero bias, and a single edge, both outputs are
    ReLU of the mean of the two inputs (degrees are equal)."""
    g = _graph(2, [(0, 1)])
    A = normalize_adjacency(g, dtype=np.float64)
    H = np.array([[2.0, -4.0], [6.0, 2.0]])
    params = {"g.w": Tensor(np.eye(2)), "g.b": Tensor(np.zeros(2))}
    out = gcn_layer(params, "g", Tensor(H), A).data
    expected = np.maximum((H[0] + H[1]) / 2.0, 0.0)
    np.testing.assert_allclose(out[0], expected, atol=1e-15)
    np.testing.assert_allclose(out[1], expected, atol=1e-15)


# ---------------------------------------------------------------------------
# graph-attention layer


def _gat_oracle(H, W, a_src, a_dst, adj):
    """Per-node double loop; adj[i, j] True on edges and self-loops."""
    n = H.shape[0]
    Wh = H @ W
    out = np.empty_like(Wh)
    for i in range(n):
        nbrs = [j for j in range(n) if adj[i, j]]
        logits = np.array([
            (Wh[i] @ a_src).item() + (Wh[j] @ a_dst).item() for j in nbrs])
        logits = np.where(logits > 0, logits, 0.2 * logits)  # LeakyReLU
        e = np.exp(logits - logits.max())
        alpha = e / e.sum()
        h = sum(a * Wh[j] for a, j in zip(alpha, nbrs))
        out[i] = np.where(h > 0, h, np.expm1(h))             # ELU
    return out


def test_gat_layer_matches_per_node_loop_oracle():
    rng = np.random.default_rng(1)
    n, d = 6, 4
    edges = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]  # node 5 isolated
    g = _graph(n, edges)
    M = adjacency_mask(g, dtype=np.float64)
    H = rng.normal(size=(n, d))
    W = rng.normal(size=(d, d))
    a_src = rng.normal(size=(d, 1))
    a_dst = rng.normal(size=(d, 1))
    params = {"g.w": Tensor(W), "g.a_src": Tensor(a_src), "g.a_dst": Tensor(a_dst)}
    out = gat_layer(params, "g", Tensor(H), M).data
    adj = M == 0
    np.testing.assert_allclose(out, _gat_oracle(H, W, a_src, a_dst, adj), atol=1e-10)


def test_gat_zero_attention_vectors_give_uniform_weights():
    rng = np.random.default_rng(2)
    n, d = 4, 3
    g = _graph(n, [(0, 1), (0, 2), (0, 3)])
    M = adjacency_mask(g, dtype=np.float64)
    H = rng.normal(size=(n, d))
    W = np.eye(d)
    params = {"g.w": Tensor(W), "g.a_src": Tensor(np.zeros((d, 1))),
              "g.a_dst": Tensor(np.zeros((d, 1)))}
    out = gat_layer(params, "g", Tensor(H), M).data
    pre = H.mean(axis=0)  # node 0 attends uniformly over all 4 (3 nbrs + self)
    np.testing.assert_allclose(out[0], np.where(pre > 0, pre, np.expm1(pre)), atol=1e-12)


def test_gat_isolated_node_attends_only_to_itself():
    rng = np.random.default_rng(3)
    n, d = 3, 4
    g = _graph(n, [(0, 1)])  # node 2 isolated
    M = adjacency_mask(g, dtype=np.float64)
    H = rng.normal(size=(n, d))
    W = rng.normal(size=(d, d))
    params = {"g.w": Tensor(W), "g.a_src": Tensor(rng.normal(size=(d, 1))),
              "g.a_dst": Tensor(rng.normal(size=(d, 1)))}
    out = gat_layer(params, "g", Tensor(H), M).data
    h = H[2] @ W
    np.testing.assert_allclose(out[2], np.where(h > 0, h, np.expm1(h)), atol=1e-12)


# ---------------------------------------------------------------------------
# mixing


def test_hal_mix_hand_values():
    h_H = Tensor(np.array([[1.0, 3.0]]))
    h_L = Tensor(np.array([[5.0, -1.0]]))
    y_H = np.array([[1.0, 0.0]])
    y_L = np.array([[0.0, 1.0]])
    h_A, y_A, mask = hal_mix(h_H, h_L, y_H, y_L, alpha=0.2)
    np.testing.assert_allclose(h_A.data, [[0.2 * 1 + 0.8 * 5, 0.2 * 3 - 0.8 * 1]])
    np.testing.assert_allclose(y_A, [[0.2, 0.8]])
    assert mask is None


def test_hal_mix_boundaries_are_exact():
    rng = np.random.default_rng(4)
    h_H, h_L = Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(3, 5)))
    y_H, y_L = rng.dirichlet(np.ones(4), 3), rng.dirichlet(np.ones(4), 3)
    h1, y1, _ = hal_mix(h_H, h_L, y_H, y_L, 1.0)
    assert np.array_equal(h1.data, h_H.data) and np.array_equal(y1, y_H)
    h0, y0, _ = hal_mix(h_H, h_L, y_H, y_L, 0.0)
    assert np.array_equal(h0.data, h_L.data) and np.array_equal(y0, y_L)


def test_hal_mix_mask_and_validation():
    h = Tensor(np.zeros((2, 3)))
    y = np.zeros((2, 3))
    _, _, mask = hal_mix(h, h, y, y, 0.5,
                         valid_H=np.array([[1, 1, 0], [1, 0, 0]], dtype=bool),
                         valid_L=np.array([[1, 0, 0], [1, 1, 0]], dtype=bool))
    assert mask.tolist() == [[True, False, False], [True, False, False]]
    with pytest.raises(ContractError):
        hal_mix(h, h, y, y, 1.5)
    with pytest.raises(ShapeError):
        hal_mix(h, Tensor(np.zeros((2, 4))), y, y, 0.5)
    with pytest.raises(ShapeError):
        hal_mix(h, h, y, np.zeros((2, 4)), 0.5)


def test_dynamic_alpha_schedule():
    assert dynamic_alpha(0, 10) == 1.0
    assert dynamic_alpha(10, 10) == 0.0
    assert dynamic_alpha(5, 10) == 0.5
    with pytest.raises(ContractError):
        dynamic_alpha(11, 10)
    with pytest.raises(ContractError):
        dynamic_alpha(0, 0)


# ---------------------------------------------------------------------------
# configuration and parameter accounting


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        _cfg(d_model=10, num_heads=4)
    with pytest.raises(ConfigError):
        _cfg(getr=GetrConfig(enabled=True, insertion_index=5))
    with pytest.raises(ConfigError):
        _cfg(getr=GetrConfig(enabled=True, gnn_kind="SAGE"))
    with pytest.raises(ConfigError):
        _cfg(hal=HalConfig(enabled=True, alpha=1.5))
    with pytest.raises(ConfigError):
        _cfg(dtype="float16")


def test_getr_index_defaults_to_last_layer():
    cfg = _cfg(getr=GetrConfig(enabled=True))
    assert cfg.getr_index == cfg.num_layers - 1
    assert _cfg().getr_index is None
    assert _cfg(getr=GetrConfig(enabled=True, insertion_index=0)).getr_index == 0


def test_count_parameters_closed_forms():
    cfg = _cfg()
    d, f = cfg.d_model, cfg.d_ff
    per_layer = 4 * (d * d + d) + 2 * 2 * d + d * f + f + f * d + d
    base = cfg.vocab_size * d + cfg.max_len * d + cfg.num_layers * per_layer \
        + d * cfg.num_labels + cfg.num_labels
    assert count_parameters(cfg) == base
    # each GCN layer adds d*d + d
    gcn = _cfg(getr=GetrConfig(enabled=True, gnn_kind="GCN", gnn_depth=3))
    assert count_parameters(gcn) == base + 3 * (d * d + d)
    # each GAT layer adds d*d + 2d
    gat = _cfg(getr=GetrConfig(enabled=True, gnn_kind="GAT", gnn_depth=2))
    assert count_parameters(gat) == base + 2 * (d * d + 2 * d)
    # each mixing block adds linear + its own LN/FFN set
    hal = _cfg(hal=HalConfig(enabled=True, depth=2))
    per_hal = d * d + d + 2 * 2 * d + d * f + f + f * d + d
    assert count_parameters(hal) == base + 2 * per_hal


def test_param_shapes_match_init():
    cfg = _cfg(getr=GetrConfig(enabled=True), hal=HalConfig(enabled=True))
    params = init_params(cfg)
    shapes = param_shapes(cfg)
    assert set(params) == set(shapes)
    for name, t in params.items():
        assert t.shape == tuple(shapes[name])
        assert t.requires_grad
    assert np.all(params["layer0.ln1_g"].data == 1.0)
    assert np.all(params["layer0.bq"].data == 0.0)


def test_init_params_deterministic_per_seed():
    a = init_params(_cfg(seed=9))
    b = init_params(_cfg(seed=9))
    c = init_params(_cfg(seed=10))
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


# ---------------------------------------------------------------------------
# forward pass


def _ids(cfg, B=2, S=4, seed=0):
    rng = np.random.default_rng(seed)
    ids = rng.integers(3, cfg.vocab_size, size=(B, S))
    ids[:, 0] = 1  # CLS
    lengths = [S, S - 1]
    ids[1, S - 1] = 0  # PAD
    return ids, lengths


def test_forward_logits_shapes():
    cfg = _cfg()
    params = init_params(cfg)
    ids, lengths = _ids(cfg)
    out = forward(params, cfg, ids, lengths)
    assert out["logits"].shape == (2, cfg.num_labels)
    seq_cfg = _cfg(task="sequence_labeling", num_labels=5)
    out2 = forward(init_params(seq_cfg), seq_cfg, ids, lengths)
    assert out2["logits"].shape == (2, 4, 5)


def test_forward_flags_off_equals_plain_encoder():
    """With enhancements disabled, a graph/pairs argument changes nothing and
    extra parameter groups don't exist."""
    cfg = _cfg()
    params = init_params(cfg)
    ids, lengths = _ids(cfg)
    plain = forward(params, cfg, ids, lengths)["logits"].data
    again = forward(params, cfg, ids, lengths, hal_pairs=[(0, 1)])["logits"].data
    assert np.array_equal(plain, again)
    assert not any(k.startswith("hal") or ".gnn" in k for k in params)


def test_forward_getr_requires_graph_and_matching_nodes():
    cfg = _cfg(getr=GetrConfig(enabled=True))
    params = init_params(cfg)
    ids, lengths = _ids(cfg)
    with pytest.raises(ContractError):
        forward(params, cfg, ids, lengths)
    with pytest.raises(ContractError):
        forward(params, cfg, ids, lengths, g=_graph(3, []))


def test_forward_getr_edgeless_graph_runs():
    cfg = _cfg(getr=GetrConfig(enabled=True, gnn_kind="GCN"))
    params = init_params(cfg)
    ids, lengths = _ids(cfg)
    g = TokenGraph(num_nodes=ids.size, node_valid=np.ones(ids.size, dtype=bool))
    out = forward(params, cfg, ids, lengths, g=g)
    assert np.all(np.isfinite(out["logits"].data))


def test_forward_hal_aug_logit_count_matches_pairs():
    cfg = _cfg(hal=HalConfig(enabled=True, alpha=0.3))
    params = init_params(cfg)
    ids, lengths = _ids(cfg)
    out = forward(params, cfg, ids, lengths, hal_pairs=[(0, 1), (1, 0)])
    assert out["aug_logits"].shape == (2, cfg.num_labels)
    assert out["alpha"] == 0.3
    out2 = forward(params, cfg, ids, lengths, hal_pairs=[(0, 1)], alpha=0.9)
    assert out2["alpha"] == 0.9


def test_forward_sequence_hal_aug_shape():
    cfg = _cfg(task="sequence_labeling", num_labels=4, hal=HalConfig(enabled=True))
    params = init_params(cfg)
    ids, lengths = _ids(cfg)
    out = forward(params, cfg, ids, lengths, hal_pairs=[(0, 1)])
    assert out["aug_logits"].shape == (1, 4, 4)


def test_embed_bounds_checks():
    cfg = _cfg()
    params = init_params(cfg)
    with pytest.raises(ContractError):
        embed(params, cfg, np.ones((1, cfg.max_len + 1), dtype=int))
    with pytest.raises(IndexError):
        embed(params, cfg, np.array([[cfg.vocab_size]]))


def test_pad_positions_do_not_influence_valid_outputs():
    """Changing a PAD token's id must not move any valid logits."""
    cfg = _cfg()
    params = init_params(cfg)
    ids, lengths = _ids(cfg)
    base = forward(params, cfg, ids, lengths)["logits"].data
    ids2 = ids.copy()
    ids2[1, 3] = 7  # padded slot of sentence 1
    pert = forward(params, cfg, ids2, lengths)["logits"].data
    np.testing.assert_allclose(base, pert, atol=1e-12)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    cfg = _cfg(getr=GetrConfig(enabled=True), hal=HalConfig(enabled=True))
    params = init_params(cfg)
    p = tmp_path / "ckpt.json"
    save_checkpoint(p, cfg, params, extra={"epoch": 3})
    cfg2, params2, extra = load_checkpoint(p)
    assert cfg2 == cfg
    assert extra == {"epoch": 3}
    for k in params:
        np.testing.assert_array_equal(params[k].data, params2[k].data)


def test_checkpoint_version_and_shape_errors(tmp_path):
    import json
    cfg = _cfg()
    params = init_params(cfg)
    p = tmp_path / "ckpt.json"
    save_checkpoint(p, cfg, params)
    payload = json.loads(p.read_text())
    payload["version"] = 99
    p.write_text(json.dumps(payload))
    with pytest.raises(ConfigError):
        load_checkpoint(p)
    payload["version"] = 1
    del payload["params"]["head.w"]
    p.write_text(json.dumps(payload))
    with pytest.raises(ConfigError):
        load_checkpoint(p)
    save_checkpoint(p, cfg, params)
    payload = json.loads(p.read_text())
    payload["params"]["head.b"] = [0.0]  # wrong shape
    p.write_text(json.dumps(payload))
    with pytest.raises(ConfigError):
        load_checkpoint(p)
