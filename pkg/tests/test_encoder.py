import numpy as np
import pytest

from deta import autodiff as ad
from deta.autodiff import Tensor
from deta.encoder import (
    DualEncoderParams,
    EncoderConfig,
    domain_classifier,
    fused_predict,
    load_checkpoint,
    mp_forward,
    position_encoding,
    readout,
    save_checkpoint,
    sp_forward,
)
from deta.graphs import GraphDataset, WSIGraph, normalized_adjacency, shortest_path_sets
from gradcheck import check_gradients


def make_params(rng, **kw):
    cfg = EncoderConfig(**{"in_dim": 4, "hidden": 6, "k_sp": 2, "k_bins": 3, "head_hidden": 5, "dclf_hidden": 4, **kw})
    return DualEncoderParams.init(cfg, rng)


def random_graph(rng, n, d=4, p=0.4):
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return WSIGraph(rng.standard_normal((n, d)), edges)


def set_identity(params):
    for name, t in params.tensors.items():
        if t.data.ndim == 2 and t.shape[0] == t.shape[1]:
            t.data[...] = np.eye(t.shape[0])


def relu(x):
    return np.maximum(x, 0)


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def numpy_head(z, p, head):
    h = relu(z @ p[f"{head}.W0"].data + p[f"{head}.b0"].data)
    return softmax(h @ p[f"{head}.W1"].data + p[f"{head}.b1"].data)


def numpy_mp(graph, p):
    a = normalized_adjacency(graph)
    h = graph.features
    for t in range(p.config.mp_layers):
        h = relu(a @ h @ p[f"mp.W{t}"].data)
    z = h.mean(axis=0)
    return h, numpy_head(z, p, "head_mp")


def numpy_sp(graph, p):
    sets = shortest_path_sets(graph, p.config.k_sp)
    m = graph.features
    for t in range(p.config.sp_layers):
        d = m.shape[1]
        agg = np.zeros_like(m)
        for u in range(graph.num_nodes):
            for k in range(1, p.config.k_sp + 1):
                for v in sets.sets[k - 1][u]:
                    agg[u] += relu(m[v] + position_encoding(k, d))
        m = relu(m @ p[f"sp.C{t}"].data + agg @ p[f"sp.A{t}"].data)
    return m, numpy_head(m.mean(axis=0), p, "head_sp")


# ----------------------------------------------------------------- examples


def test_position_encoding_values():
    np.testing.assert_array_equal(position_encoding(0, 6), [0, 1, 0, 1, 0, 1])
    np.testing.assert_allclose(position_encoding(1, 2), [0.8414709848, 0.5403023059], atol=1e-10)
    with pytest.raises(ValueError):
        position_encoding(1, 3)


def test_position_encoding_range():
    for k in range(20):
        for d in (2, 8, 64):
            assert np.all(np.abs(position_encoding(k, d)) <= 1)


def test_single_node_identity_layer_returns_features():
    params = make_params(np.random.default_rng(0), in_dim=2, hidden=2, mp_layers=1)
    set_identity(params)
    g = WSIGraph(np.array([[0.3, 1.2]]))
    out = mp_forward(g, params)
    np.testing.assert_allclose(out.node_embeddings.data, [[0.3, 1.2]])


def test_zero_features_give_uniform_hazard(rng):
    params = make_params(rng)
    g = WSIGraph(np.zeros((5, 4)), [(0, 1), (1, 2), (3, 4)])
    np.testing.assert_allclose(mp_forward(g, params).hazard.data, np.full((1, 3), 1 / 3))
    # SP messages still carry ReLU(TE(k)), except on a graph without edges
    iso = WSIGraph(np.zeros((3, 4)))
    np.testing.assert_allclose(sp_forward(iso, params).hazard.data, np.full((1, 3), 1 / 3))


def test_sp_path_graph_hand_evaluation():
    params = make_params(np.random.default_rng(0), in_dim=2, hidden=2, sp_layers=1)
    set_identity(params)
    x = np.array([[0.5, -1.0], [-0.2, 0.3], [1.0, -2.0]])
    g = WSIGraph(x, [(0, 1), (1, 2)])
    out = sp_forward(g, params).node_embeddings.data
    expected = relu(x[0] + relu(x[1] + position_encoding(1, 2)) + relu(x[2] + position_encoding(2, 2)))
    np.testing.assert_allclose(out[0], expected, atol=1e-12)


def test_isolated_node_uses_only_self_path(rng):
    params = make_params(rng, sp_layers=1)
    x = rng.standard_normal((1, 4))
    out = sp_forward(WSIGraph(x), params).node_embeddings.data
    np.testing.assert_allclose(out, relu(x @ params["sp.C0"].data))


def test_readout_examples(rng):
    np.testing.assert_allclose(readout(Tensor([[0.0, 0.0], [2.0, 4.0]])).data, [[1, 2]])
    x = rng.standard_normal((7, 3))
    np.testing.assert_allclose(readout(Tensor(x)).data, readout(Tensor(x[rng.permutation(7)])).data)
    with pytest.raises(ValueError):
        readout(Tensor(np.zeros((0, 3))))


def test_domain_classifier_examples(rng):
    params = make_params(rng)
    for name in ("dclf.W0", "dclf.W1"):
        params[name].data[...] = 0
    d = domain_classifier(Tensor(rng.standard_normal((3, 6))), Tensor(np.full((3, 3), 1 / 3)), params)
    np.testing.assert_array_equal(d.data, 0.5)
    params = make_params(rng)
    d = domain_classifier(Tensor(10 * rng.standard_normal((20, 6))), Tensor(np.full((20, 3), 1 / 3)), params)
    assert np.all((d.data > 0) & (d.data < 1))
    with pytest.raises(ValueError):
        domain_classifier(Tensor(np.zeros((2, 5))), Tensor(np.zeros((2, 3))), params)


def test_fused_predict_averages(rng):
    params = make_params(rng)
    g = random_graph(rng, 6)
    out = fused_predict(g, params)
    a = mp_forward(g, params).hazard.data
    b = sp_forward(g, params).hazard.data
    np.testing.assert_allclose(out, (a + b) / 2)
    np.testing.assert_allclose(out.sum(axis=1), 1, atol=1e-9)


def test_odd_widths_rejected():
    with pytest.raises(ValueError, match="even"):
        EncoderConfig(in_dim=3)


def test_feature_width_mismatch(rng):
    params = make_params(rng)
    with pytest.raises(ValueError, match="in_dim"):
        mp_forward(WSIGraph(np.zeros((3, 5))), params)


def test_sp_sets_size_mismatch(rng):
    params = make_params(rng)
    g = random_graph(rng, 5)
    other = shortest_path_sets(random_graph(rng, 6), 2)
    with pytest.raises(ValueError, match="nodes"):
        sp_forward(g, params, sp_sets=other)


# -------------------------------------------------------------- properties


def test_forward_matches_numpy_oracle(rng):
    params = make_params(rng)
    for _ in range(5):
        g = random_graph(rng, 5)
        h, hz = numpy_mp(g, params)
        out = mp_forward(g, params)
        np.testing.assert_allclose(out.node_embeddings.data, h, atol=1e-12)
        np.testing.assert_allclose(out.hazard.data[0], hz, atol=1e-12)
        m, hz = numpy_sp(g, params)
        out = sp_forward(g, params)
        np.testing.assert_allclose(out.node_embeddings.data, m, atol=1e-12)
        np.testing.assert_allclose(out.hazard.data[0], hz, atol=1e-12)


def test_hazards_are_distributions(rng):
    params = make_params(rng)
    for _ in range(20):
        g = random_graph(rng, int(rng.integers(1, 10)))
        g.features *= 5
        for fwd in (mp_forward, sp_forward):
            h = fwd(g, params).hazard.data
            assert np.all(h > 0)
            assert abs(h.sum() - 1) < 1e-9


def test_permutation_equivariance(rng):
    params = make_params(rng)
    g = random_graph(rng, 8)
    perm = rng.permutation(8)
    inv = np.argsort(perm)
    pg = WSIGraph(g.features[perm], [(inv[i], inv[j]) for i, j in g.edges])
    for fwd in (mp_forward, sp_forward):
        a, b = fwd(g, params), fwd(pg, params)
        np.testing.assert_allclose(b.node_embeddings.data, a.node_embeddings.data[perm], atol=1e-12)
        np.testing.assert_allclose(b.graph_embedding.data, a.graph_embedding.data, atol=1e-12)
        np.testing.assert_allclose(b.hazard.data, a.hazard.data, atol=1e-12)
        da = domain_classifier(a.graph_embedding, a.hazard, params).data
        db = domain_classifier(b.graph_embedding, b.hazard, params).data
        np.testing.assert_allclose(da, db, atol=1e-12)


def test_batch_matches_single_graph_passes(rng):
    params = make_params(rng)
    graphs = [random_graph(rng, n) for n in (3, 6, 4)]
    batch = GraphDataset(graphs, 2).batch()
    for fwd in (mp_forward, sp_forward):
        together = fwd(batch, params).hazard.data
        alone = np.vstack([fwd(g, params).hazard.data for g in graphs])
        np.testing.assert_allclose(together, alone, atol=1e-12)


def test_zero_perturbation_is_bitwise_identical(rng):
    params = make_params(rng)
    g = random_graph(rng, 7)
    zero = Tensor(np.zeros((7, 4)))
    for fwd in (mp_forward, sp_forward):
        a = fwd(g, params).hazard.data
        b = fwd(g, params, perturbation=zero).hazard.data
        assert a.tobytes() == b.tobytes()


def test_perturbation_shape_checked(rng):
    params = make_params(rng)
    with pytest.raises(ValueError, match="perturbation"):
        mp_forward(random_graph(rng, 4), params, perturbation=Tensor(np.zeros((3, 4))))


def _loss_with(params, name, fwd, g):
    def build(w, delta):
        saved = params.tensors[name]
        params.tensors[name] = w
        try:
            out = fwd(g, params, perturbation=delta)
            logd = ad.log(domain_classifier(out.graph_embedding, out.hazard, params))
            return ad.add(ad.sum(ad.log(out.hazard)), ad.sum(logd))
        finally:
            params.tensors[name] = saved

    return build


@pytest.mark.parametrize("fwd,name", [
    (mp_forward, "mp.W0"), (mp_forward, "head_mp.W1"),
    (sp_forward, "sp.C0"), (sp_forward, "sp.A1"), (sp_forward, "dclf.W0"),
])
def test_end_to_end_gradients(rng, fwd, name):
    params = make_params(rng)
    g = random_graph(rng, 6)
    build = _loss_with(params, name, fwd, g)
    err = check_gradients(build, params[name].data.copy(), 0.1 * rng.standard_normal((6, 4)))
    assert err < 1e-4


def test_log_domain_gradient_wrt_embedding(rng):
    params = make_params(rng)
    p = np.full((2, 3), 1 / 3)

    def build(z):
        return ad.sum(ad.log(domain_classifier(z, Tensor(p), params)))

    assert check_gradients(build, rng.standard_normal((2, 6))) < 1e-5


def test_checkpoint_round_trip(tmp_path, rng):
    params = make_params(rng)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, params, meta={"stage": "pretrain"})
    back = load_checkpoint(path)
    assert back.config == params.config
    for name, t in params.tensors.items():
        assert back[name].data.tobytes() == t.data.tobytes()
    save_checkpoint(tmp_path / "again.json", back, meta={"stage": "pretrain"})
    assert path.read_bytes() == (tmp_path / "again.json").read_bytes()


def test_checkpoint_shape_mismatch_diagnostic(tmp_path, rng):
    payload = make_params(rng).to_dict()
    payload["params"]["mp.W0"]["shape"] = [3, 6]
    payload["params"]["mp.W0"]["data"] = [0.0] * 18
    with pytest.raises(ValueError, match="mp.W0"):
        DualEncoderParams.from_dict(payload)
