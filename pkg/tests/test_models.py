import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meltgraph import autodiff as ad
from meltgraph import kernels
from meltgraph.autodiff import Tensor
from meltgraph.errors import ConfigError
from meltgraph.graph_build import graph_from_edges
from meltgraph.models import (
    KINDS, GraphInputs, ModelSpec, fc_forward, forward, gat_layer, gcn_layer,
    gin_aggregate, graph_transformer_layer, init_params, params_from_json,
    params_to_json, predict,
)
from meltgraph.scan_synth import LayerScan
from meltgraph.training import Standardizer, mse_loss

from conftest import random_graph, toy_scan

GRAPH_KINDS = ("graph_transformer", "gat", "gcn", "gin")


def small_spec(kind, **kw):
    base = dict(kind=kind, hidden_dim=8, n_heads=2, edge_dim=4, activation="tanh")
    base.update(kw)
    return ModelSpec(**base)


def randomize(params, seed=0, scale=0.5):
    """Non-zero biases and eps so oracles exercise every term."""
    rng = np.random.default_rng(seed)
    for name, t in params.tensors.items():
        if name.endswith(".b") or name.endswith(".eps"):
            t.value[...] = rng.uniform(-scale, scale, size=t.shape)
    return params


def with_standardizer(params):
    params.standardizer = Standardizer(np.zeros(4), np.ones(4))
    return params


def in_edges(graph, i):
    return [(int(j), int(c)) for j, d, c in zip(graph.src, graph.dst, graph.edge_class) if d == i]


# ------------------------------------------------------------ graph transformer


def gt_oracle(h, graph, params, prefix, n_heads, edge_emb):
    W = {p: params[f"{prefix}.{p}.W"].value for p in ("q", "k", "v", "skip")}
    b = {p: params[f"{prefix}.{p}.b"].value for p in ("q", "k", "v", "skip")}
    We = params[f"{prefix}.edge.W"].value
    d = W["q"].shape[1]
    dh = d // n_heads
    out = np.zeros((h.shape[0], d))
    for i in range(h.shape[0]):
        out[i] = h[i] @ W["skip"] + b["skip"]
        nbrs = in_edges(graph, i)
        if not nbrs:
            continue
        q = h[i] @ W["q"] + b["q"]
        for head in range(n_heads):
            sl = slice(head * dh, (head + 1) * dh)
            logits, values = [], []
            for j, c in nbrs:
                e = edge_emb[c] @ We
                kj = h[j] @ W["k"] + b["k"] + e
                logits.append(sum(q[sl][t] * kj[sl][t] for t in range(dh)) / math.sqrt(dh))
                values.append((h[j] @ W["v"] + b["v"] + e)[sl])
            m = max(logits)
            w = [math.exp(x - m) for x in logits]
            total = sum(w)
            for wj, vj in zip(w, values):
                out[i, sl] += wj / total * vj
    return out


def gt_layer_value(h, graph, params, heads=2):
    emb = params["edge_embed"].value
    return graph_transformer_layer(Tensor(h), graph.src, graph.dst, graph.edge_class,
                                   Tensor(emb), params, "l0", heads).value, emb


def test_gt_single_node_is_skip_path():
    g = graph_from_edges(toy_scan(1), np.zeros((0, 2), int))
    params = init_params(small_spec("graph_transformer", in_dim=4, hidden_dim=4))
    params["l0.skip.W"].value[...] = np.eye(4)
    h = np.array([[0.3, -1.0, 2.0, 0.5]])
    out, _ = gt_layer_value(h, g, params)
    np.testing.assert_array_equal(out, h)


def test_gt_two_nodes_identity_weights():
    g = graph_from_edges(toy_scan(2), [(0, 1)])
    params = init_params(small_spec("graph_transformer", hidden_dim=4))
    for p in ("q", "k", "v", "skip"):
        params[f"l0.{p}.W"].value[...] = np.eye(4)
    params["l0.edge.W"].value[...] = 0.0
    h = np.array([[1.0, 2.0, 3.0, 4.0], [-1.0, 0.5, 0.0, 2.0]])
    out, _ = gt_layer_value(h, g, params)
    np.testing.assert_allclose(out, [h[0] + h[1], h[1] + h[0]], atol=1e-15)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32))
def test_gt_matches_loop_oracle(seed):
    g = random_graph(5, p=0.4, seed=seed)
    params = randomize(init_params(small_spec("graph_transformer"), seed=seed), seed)
    h = np.random.default_rng(seed).uniform(-1, 1, size=(5, 4))
    out, emb = gt_layer_value(h, g, params)
    ref = gt_oracle(h, g, params, "l0", 2, emb)
    np.testing.assert_allclose(out, ref, atol=1e-10, rtol=0)


@pytest.mark.parametrize("backend", sorted(kernels.backends()))
def test_attention_weights_sum_to_one(backend):
    mod = kernels.backends()[backend]
    g = random_graph(12, p=0.3, seed=4)
    rng = np.random.default_rng(0)
    q, k, v = (rng.standard_normal((12, 8)) for _ in range(3))
    etab = rng.standard_normal((2, 8))
    _, alpha = mod.attention_forward(q, k, v, etab, g.edge_class, g.src, g.dst, 2)
    sums = kernels.segment_sum(alpha, g.dst, 12)
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)


# ------------------------------------------------------------ GCN


def test_gcn_single_node_identity():
    g = graph_from_edges(toy_scan(1), np.zeros((0, 2), int))
    params = init_params(small_spec("gcn", hidden_dim=4))
    params["l0.W"].value[...] = np.eye(4)
    h = np.array([[1.0, -2.0, 0.5, 3.0]])
    out = gcn_layer(Tensor(h), g.operator(True).matrix, params, "l0").value
    np.testing.assert_allclose(out, h, atol=1e-15)


def test_gcn_two_nodes_average():
    g = graph_from_edges(toy_scan(2), [(0, 1)])
    params = init_params(small_spec("gcn", hidden_dim=4))
    params["l0.W"].value[...] = np.eye(4)
    h = np.array([[1.0, 2.0, 3.0, 4.0], [3.0, 0.0, -1.0, 2.0]])
    out = gcn_layer(Tensor(h), g.operator(True).matrix, params, "l0").value
    np.testing.assert_allclose(out, np.tile((h[0] + h[1]) / 2, (2, 1)), atol=1e-15)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32))
def test_gcn_matches_dense_oracle(seed):
    n = 7
    g = random_graph(n, p=0.4, seed=seed)
    params = randomize(init_params(small_spec("gcn"), seed=seed), seed)
    h = np.random.default_rng(seed).uniform(-1, 1, size=(n, 4))
    A = g.adjacency.toarray() + np.eye(n)
    d = A.sum(axis=1)
    S = A / np.sqrt(np.outer(d, d))
    ref = S @ h @ params["l0.W"].value + params["l0.b"].value
    out = gcn_layer(Tensor(h), g.operator(True).matrix, params, "l0").value
    np.testing.assert_allclose(out, ref, atol=1e-12, rtol=0)


# ------------------------------------------------------------ GAT


def gat_oracle(h, graph, params, n_heads, slope):
    W, b = params["l0.W"].value, params["l0.b"].value
    a_src, a_dst = params["l0.att_src"].value, params["l0.att_dst"].value
    wh = h @ W
    dh = wh.shape[1] // n_heads
    out = np.zeros_like(wh)
    for i in range(h.shape[0]):
        nbrs = [j for j, _ in in_edges(graph, i)] + [i]
        for head in range(n_heads):
            sl = slice(head * dh, (head + 1) * dh)
            logits = []
            for j in nbrs:
                x = a_dst[head] @ wh[i, sl] + a_src[head] @ wh[j, sl]
                logits.append(x if x > 0 else slope * x)
            m = max(logits)
            w = np.exp(np.array(logits) - m)
            w /= w.sum()
            for wj, j in zip(w, nbrs):
                out[i, sl] += wj * wh[j, sl]
    return out + b


def gat_value(h, graph, params, heads=2, slope=0.2):
    inp = GraphInputs(graph, h)
    return gat_layer(Tensor(h), inp.src_loop, inp.dst_loop, params, "l0", heads, slope).value


def test_gat_isolated_node():
    g = graph_from_edges(toy_scan(1), np.zeros((0, 2), int))
    params = init_params(small_spec("gat"))
    h = np.array([[0.4, -0.2, 1.0, 0.0]])
    np.testing.assert_allclose(gat_value(h, g, params), h @ params["l0.W"].value, atol=1e-15)


def test_gat_identical_neighbours_uniform():
    g = graph_from_edges(toy_scan(4), [(0, 1), (0, 2), (0, 3)])
    params = init_params(small_spec("gat"))
    h = np.tile([[0.3, 0.1, -0.7, 0.9]], (4, 1))
    wh = h @ params["l0.W"].value
    np.testing.assert_allclose(gat_value(h, g, params), wh, atol=1e-14)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32))
def test_gat_matches_loop_oracle(seed):
    g = random_graph(6, p=0.4, seed=seed)
    params = randomize(init_params(small_spec("gat"), seed=seed), seed)
    h = np.random.default_rng(seed).uniform(-1, 1, size=(6, 4))
    np.testing.assert_allclose(gat_value(h, g, params), gat_oracle(h, g, params, 2, 0.2),
                               atol=1e-10, rtol=0)


def test_gat_attention_sums_to_one():
    g = random_graph(10, p=0.3, seed=2)
    params = init_params(small_spec("gat"), seed=3)
    inp = GraphInputs(g)
    wh = inp.X @ params["l0.W"].value
    heads = wh.reshape(10, 2, 4)
    s_src = (heads * params["l0.att_src"].value).sum(axis=2)
    s_dst = (heads * params["l0.att_dst"].value).sum(axis=2)
    logits = ad.leaky_relu(s_dst[inp.dst_loop] + s_src[inp.src_loop], 0.2)
    alpha = ad.segment_softmax(logits, inp.dst_loop, 10).value
    np.testing.assert_allclose(kernels.segment_sum(alpha, inp.dst_loop, 10), 1.0, atol=1e-12)


# ------------------------------------------------------------ GIN


def test_gin_no_neighbours_is_mlp_input():
    g = graph_from_edges(toy_scan(3), np.zeros((0, 2), int))
    h = np.random.default_rng(0).standard_normal((3, 4))
    out = gin_aggregate(Tensor(h), g.src, g.dst, Tensor(np.zeros(1))).value
    np.testing.assert_array_equal(out, h)


def test_gin_zero_neighbour_sum():
    g = graph_from_edges(toy_scan(3), [(0, 1), (0, 2)])
    h = np.array([[1.0, 2.0, 3.0, 4.0], [0.5, -1.0, 0.0, 2.0], [-0.5, 1.0, 0.0, -2.0]])
    out = gin_aggregate(Tensor(h), g.src, g.dst, Tensor(np.zeros(1))).value
    np.testing.assert_array_equal(out[0], h[0])


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32), eps=st.floats(-0.9, 2.0))
def test_gin_aggregate_matches_loop_oracle(seed, eps):
    g = random_graph(8, p=0.3, seed=seed)
    h = np.random.default_rng(seed).uniform(-1, 1, size=(8, 4))
    ref = np.zeros_like(h)
    for i in range(8):
        ref[i] = (1 + eps) * h[i]
        for j, _ in in_edges(g, i):
            ref[i] += h[j]
    out = gin_aggregate(Tensor(h), g.src, g.dst, Tensor([eps])).value
    np.testing.assert_allclose(out, ref, atol=1e-12, rtol=0)


# ------------------------------------------------------------ FC / AE


def test_fc_zero_final_layer_gives_bias_rows():
    params = init_params(small_spec("fc"))
    params["head.W"].value[...] = 0.0
    params["head.b"].value[...] = [1.0, -2.0, 0.5, 3.0]
    out = fc_forward(Tensor(np.random.default_rng(0).standard_normal((6, 4))), params, ad.tanh).value
    np.testing.assert_array_equal(out, np.tile([1.0, -2.0, 0.5, 3.0], (6, 1)))


def test_fc_matches_mlp_loop_oracle():
    params = randomize(init_params(small_spec("fc", n_message_layers=1, activation="relu")))
    x = np.random.default_rng(1).uniform(-1, 1, size=(5, 4))
    W0, b0 = params["l0.W"].value, params["l0.b"].value
    W1, b1 = params["head.W"].value, params["head.b"].value
    ref = np.zeros((5, 4))
    for n in range(5):
        hidden = [max(0.0, sum(x[n, a] * W0[a, j] for a in range(4)) + b0[j]) for j in range(8)]
        for c in range(4):
            ref[n, c] = sum(hidden[j] * W1[j, c] for j in range(8)) + b1[c]
    np.testing.assert_allclose(fc_forward(Tensor(x), params).value, ref, atol=1e-12, rtol=0)


def test_fc_ignores_edges():
    g = random_graph(10, p=0.3, seed=0)
    bare = graph_from_edges(g.scan, np.zeros((0, 2), int))
    params = with_standardizer(init_params(small_spec("fc")))
    np.testing.assert_array_equal(predict(params, g), predict(params, bare))


def test_autoencoder_shapes_and_zero_input():
    params = init_params(small_spec("autoencoder", bottleneck_dim=3))
    scan = toy_scan(6)
    scan.X[...] = 0.0
    g = graph_from_edges(scan, np.zeros((0, 2), int))
    out = forward(params, GraphInputs(g), np.zeros((6, 4)))
    assert out.shape == (6, 8)
    assert np.all(np.isfinite(out.value))


def test_autoencoder_bottleneck_must_shrink():
    with pytest.raises(ConfigError):
        ModelSpec(kind="autoencoder", bottleneck_dim=8).validate()


def test_linear_autoencoder_fits_rank_two_data():
    from meltgraph.training import TrainConfig, train

    rng = np.random.default_rng(0)
    n = 60
    latent = rng.standard_normal((n, 2))
    scan = toy_scan(n)
    scan.X[...] = latent @ rng.standard_normal((2, 4)) + 0.3
    scan.Y[...] = latent @ rng.standard_normal((2, 4)) - 1.0
    g = graph_from_edges(scan, np.zeros((0, 2), int))
    spec = ModelSpec(kind="autoencoder", hidden_dim=8, bottleneck_dim=2, activation="identity")
    _, history = train(spec, [g], TrainConfig(learning_rate=1e-2, epochs=1500, seed=0))
    assert history[-1] < 1e-3


# ------------------------------------------------------------ whole model


def test_invalid_specs():
    with pytest.raises(ConfigError):
        ModelSpec(kind="mlp").validate()
    with pytest.raises(ConfigError):
        ModelSpec(hidden_dim=10, n_heads=4).validate()
    with pytest.raises(ConfigError):
        ModelSpec(hidden_dim=0).validate()


def test_feature_dimension_mismatch():
    params = with_standardizer(init_params(small_spec("gcn")))
    g = random_graph(4)
    with pytest.raises(ConfigError):
        predict(params, g, X=np.zeros((4, 3)))


def test_gt_one_node_is_skip_plus_head():
    spec = small_spec("graph_transformer", n_message_layers=1)
    params = with_standardizer(init_params(spec, seed=2))
    g = graph_from_edges(toy_scan(1), np.zeros((0, 2), int))
    x = g.scan.X
    h = np.tanh(x @ params["l0.skip.W"].value + params["l0.skip.b"].value)
    ref = h @ params["head.W"].value + params["head.b"].value
    np.testing.assert_allclose(predict(params, g), ref, atol=1e-14)


@pytest.mark.parametrize("kind", KINDS)
def test_predict_shape_and_finite(kind):
    from meltgraph.scan_synth import LayerSpec, generate_melt_signal, generate_scan_path
    from meltgraph.graph_build import build_graph

    scan = generate_melt_signal(generate_scan_path(LayerSpec(width_mm=1.0, height_mm=0.45)),
                                LayerSpec(width_mm=1.0, height_mm=0.45))
    assert scan.n_nodes == 100
    g = build_graph(scan)
    params = init_params(ModelSpec(kind=kind), seed=1)
    params.standardizer = Standardizer(scan.Y.mean(axis=0), scan.Y.std(axis=0))
    out = predict(params, g)
    assert out.shape == (100, 4)
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, predict(params, g))


def permuted(graph, perm):
    s = graph.scan
    scan = LayerScan(s.positions[perm], s.track_id[perm], s.node_id[perm], s.X[perm],
                     s.Y[perm], s.anomaly_mask[perm])
    inv = np.argsort(perm)
    return graph_from_edges(scan, inv[graph.edges])


@pytest.mark.parametrize("kind", GRAPH_KINDS)
def test_permutation_equivariance(kind):
    g = random_graph(9, p=0.3, seed=5)
    perm = np.random.default_rng(0).permutation(9)
    params = with_standardizer(randomize(init_params(small_spec(kind), seed=3)))
    np.testing.assert_allclose(predict(params, permuted(g, perm)), predict(params, g)[perm],
                               atol=1e-10, rtol=0)


# ------------------------------------------------------------ gradients


def model_loss(params, inputs, target):
    return mse_loss(forward(params, inputs), target)


def max_param_grad_error(params, graph):
    inputs = GraphInputs(graph)
    target = np.random.default_rng(9).standard_normal((graph.n_nodes, 4))
    worst = 0.0
    for name, t in params.tensors.items():
        if not t.requires_grad:
            continue
        worst = max(worst, ad.grad_check(lambda _: model_loss(params, inputs, target), t))
    return worst


def test_gcn_layer_grad_check():
    g = random_graph(5, seed=1)
    params = randomize(init_params(small_spec("gcn", n_message_layers=1)))
    op = g.operator(True).matrix
    target = np.random.default_rng(2).standard_normal((5, 8))
    h = Tensor(g.scan.X.copy())
    f = lambda _: mse_loss(gcn_layer(h, op, params, "l0"), target)
    for x in (h, params["l0.W"], params["l0.b"]):
        assert ad.grad_check(f, x) < 1e-5


@pytest.mark.parametrize("kind", KINDS[:-1])
def test_every_kind_grad_check(kind):
    g = random_graph(5, seed=7)
    params = randomize(init_params(small_spec(kind), seed=1), seed=1)
    assert max_param_grad_error(params, g) < 1e-4


def test_autoencoder_grad_check():
    g = random_graph(5, seed=7)
    params = randomize(init_params(small_spec("autoencoder"), seed=1), seed=1)
    inputs = GraphInputs(g)
    Y = g.scan.Y
    target = np.hstack([inputs.X, Y])
    worst = max(ad.grad_check(lambda _: mse_loss(forward(params, inputs, Y), target), t)
                for t in params.tensors.values())
    assert worst < 1e-4


def test_full_graph_transformer_grad_check_relu():
    # default activation; a generic random instance stays away from kinks
    g = random_graph(5, seed=3)
    params = randomize(init_params(small_spec("graph_transformer", activation="relu"), seed=5), 5)
    assert max_param_grad_error(params, g) < 1e-4


# ------------------------------------------------------------ serialisation


@pytest.mark.parametrize("kind", KINDS)
def test_params_json_round_trip_bit_exact(kind):
    params = randomize(init_params(ModelSpec(kind=kind, hidden_dim=8, n_heads=2), seed=11))
    params.standardizer = Standardizer(np.array([0.1, 1 / 3, 2.0, 1e-17]),
                                       np.array([1.0, 2 / 7, 3.5, 1e300]))
    params.meta = {"final_loss": 0.1 + 0.2}
    text = params_to_json(params)
    back = params_from_json(text)
    assert back.spec == params.spec
    for name, t in params.tensors.items():
        assert np.array_equal(back[name].value, t.value)
        assert back[name].value.tobytes() == t.value.tobytes()
    assert params_to_json(back) == text
