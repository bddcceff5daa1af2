import numpy as np
import pytest
from scipy.special import expit

from hstgcn.model import (
    HSTGCN,
    VARIANTS,
    ArchitectureConfig,
    Normalizer,
    domain_transformer,
    graph_conv,
    init_parameters,
    temporal_gated_conv,
)
from hstgcn.spectral import scaled_laplacian
from hstgcn.tensor import Graph, GraphError

SMALL = dict(transformer_channels=(4, 4), gated_channels=(6, 8, 6, 6), graph_channels=5)


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def ring(n):
    w = np.zeros((n, n))
    for i in range(n):
        w[i, (i + 1) % n] = w[(i + 1) % n, i] = 1.0
    return scaled_laplacian(w)


def toy_inputs(rng, n=4, batch=None):
    lead = () if batch is None else (batch,)
    V = rng.poisson(2.0, size=lead + (n, 6, 26)).astype(float)
    T = rng.uniform(0.03, 0.1, size=lead + (n, 6, 14))
    return V, T


# --- layer oracles ---------------------------------------------------------------

def test_gated_conv_bias_only():
    g = Graph()
    x = g.input("x", (2, 6, 3))
    k = g.const(np.zeros((3, 3, 4)))
    b = g.const(np.array([1.5, -2.0, 0.3, 0.7]))
    temporal_gated_conv(g, x, k, b)
    y = list(g.forward({"x": np.random.default_rng(0).normal(size=(2, 6, 3))}).values())[-1]
    assert y.shape == (2, 4, 2)
    np.testing.assert_allclose(y[..., 0], 1.5 * expit(0.3), rtol=0, atol=1e-15)
    np.testing.assert_allclose(y[..., 1], -2.0 * expit(0.7), rtol=0, atol=1e-15)


def test_gated_conv_with_zero_gate_halves():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 5, 2))
    kern = np.zeros((1, 2, 4))
    kern[0, :, :2] = rng.normal(size=(2, 2))
    g = Graph()
    xi = g.input("x", (3, 5, 2))
    temporal_gated_conv(g, xi, g.const(kern), g.const(np.zeros(4)))
    y = list(g.forward({"x": x}).values())[-1]
    np.testing.assert_allclose(y, 0.5 * (x @ kern[0, :, :2]), atol=1e-15)


def test_gated_conv_too_short():
    g = Graph()
    x = g.input("x", (2, 2, 3))
    with pytest.raises(GraphError):
        temporal_gated_conv(g, x, g.const(np.zeros((3, 3, 4))), g.const(np.zeros(4)))


def _run_graph_conv(h, lt, theta, bias):
    g = Graph()
    hi = g.input("h", h.shape)
    graph_conv(g, hi, lt, g.const(theta), g.const(bias))
    return list(g.forward({"h": h}).values())[-1]


def test_graph_conv_order_one_identity_is_elu():
    h = np.random.default_rng(2).normal(size=(3, 2, 4))
    out = _run_graph_conv(h, ring(3).scaled_laplacian, np.eye(4)[None], np.zeros(4))
    np.testing.assert_allclose(out, elu(h), atol=1e-15)


def test_graph_conv_two_node_dense_oracle():
    rng = np.random.default_rng(3)
    lt = scaled_laplacian(np.array([[0.0, 1.0], [1.0, 0.0]])).scaled_laplacian
    h = rng.normal(size=(2, 3, 2))
    theta = rng.normal(size=(2, 2, 3))
    bias = rng.normal(size=3)
    expected = np.empty((2, 3, 3))
    for t in range(3):
        expected[:, t] = elu(h[:, t] @ theta[0] + lt @ h[:, t] @ theta[1] + bias)
    np.testing.assert_allclose(_run_graph_conv(h, lt, theta, bias), expected, atol=1e-12)


def test_graph_conv_permutation_equivariance():
    rng = np.random.default_rng(4)
    n = 5
    w = rng.uniform(size=(n, n))
    w = np.triu(w, 1) + np.triu(w, 1).T
    lt = scaled_laplacian(w).scaled_laplacian
    h = rng.normal(size=(n, 2, 3))
    theta, bias = rng.normal(size=(3, 3, 4)), rng.normal(size=4)
    perm = rng.permutation(n)
    base = _run_graph_conv(h, lt, theta, bias)
    permuted = _run_graph_conv(h[perm], lt[np.ix_(perm, perm)], theta, bias)
    np.testing.assert_allclose(permuted, base[perm], atol=1e-12)


def test_graph_conv_channel_mismatch():
    g = Graph()
    h = g.input("h", (2, 1, 3))
    with pytest.raises(GraphError, match="input channels"):
        graph_conv(g, h, np.eye(2), g.const(np.zeros((2, 4, 5))), g.const(np.zeros(5)))


def test_domain_transformer_segmentwise_weights():
    g = Graph()
    v = g.input("v", (2, 1, 1))
    domain_transformer(g, v, g.const(np.ones((1, 1))), g.const(np.zeros(1)),
                       g.const(np.array([[[1.0]], [[2.0]]])), g.const(np.zeros((2, 1))))
    out = list(g.forward({"v": np.ones((2, 1, 1))}).values())[-1]
    assert out[0, 0, 0] == 1.0 and out[1, 0, 0] == 2.0


def test_domain_transformer_replicated_template_is_shared_conv():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(3, 6, 4))
    ws, bs = rng.normal(size=(4, 5)), rng.normal(size=5)
    wt, bt = rng.normal(size=(5, 2)), rng.normal(size=2)
    g = Graph()
    vi = g.input("v", v.shape)
    domain_transformer(g, vi, g.const(ws), g.const(bs), g.const(np.repeat(wt[None], 3, axis=0)),
                       g.const(np.repeat(bt[None], 3, axis=0)))
    out = list(g.forward({"v": v}).values())[-1]
    np.testing.assert_allclose(out, elu(elu(v @ ws + bs) @ wt + bt), atol=1e-12)
    g2 = Graph()
    with pytest.raises(GraphError, match="segments"):
        domain_transformer(g2, g2.input("v", (3, 6, 4)), g2.const(ws), g2.const(bs),
                           g2.const(np.zeros((2, 5, 2))), g2.const(np.zeros((2, 2))))


# --- full model ---------------------------------------------------------------------

@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_output_shape_for_every_variant(variant):
    rng = np.random.default_rng(6)
    model = HSTGCN(ArchitectureConfig(variant, n=4, **SMALL), ring(4))
    V, T = toy_inputs(rng)
    assert model.predict(V, T).shape == (4, 12)
    Vb, Tb = toy_inputs(rng, batch=3)
    assert model.predict(Vb, Tb).shape == (3, 4, 12)
    assert model.predict(V, T).tobytes() == model.predict(V, T).tobytes()


def test_ones_variant_equals_full_model_on_all_ones_volume():
    rng = np.random.default_rng(7)
    full = HSTGCN(ArchitectureConfig("hstgcn", n=4, **SMALL), ring(4), seed=3)
    ones = HSTGCN(ArchitectureConfig("hstgcn1", n=4, **SMALL), ring(4), seed=3)
    V, T = toy_inputs(rng)
    a = full.predict(np.ones_like(V), T)
    assert a.tobytes() == ones.predict(V, T).tobytes()
    assert not np.array_equal(full.predict(V, T), a)


def test_stgcn_im_matches_composed_layer_oracles():
    rng = np.random.default_rng(8)
    op = ring(4)
    cfg = ArchitectureConfig("stgcn-im", n=4, **SMALL)
    model = HSTGCN(cfg, op, seed=1)
    p = model.params
    _, T = toy_inputs(rng)

    def glu(x, k, b):
        kt = k.shape[0]
        ab = sum(x[:, i:x.shape[1] - kt + 1 + i] @ k[i] for i in range(kt)) + b
        c = ab.shape[-1] // 2
        return ab[..., :c] * expit(ab[..., c:])

    lt = op.scaled_laplacian
    h = glu(T, p["gated2.kernel"], p["gated2.bias"])
    cheb = [h, np.einsum("ij,jtc->itc", lt, h)]
    cheb.append(2 * np.einsum("ij,jtc->itc", lt, cheb[1]) - h)
    h = elu(sum(c @ p["graph.theta"][k] for k, c in enumerate(cheb)) + p["graph.bias"])
    h = glu(h, p["gated3.kernel"], p["gated3.bias"])
    h = glu(h, p["gated4.kernel"], p["gated4.bias"])
    expected = h[:, 0] @ p["head.weight"] + p["head.bias"]
    np.testing.assert_allclose(model.predict(None, T), expected, rtol=1e-12, atol=1e-12)


def test_config_errors():
    with pytest.raises(ValueError, match="unknown variant"):
        ArchitectureConfig("lstm")
    with pytest.raises(ValueError, match="must be 1"):
        ArchitectureConfig(kernel_sizes=(3, 3, 2, 2))
    with pytest.raises(ValueError, match="shrink time equally"):
        ArchitectureConfig(kernel_sizes=(2, 3, 3, 2))
    cfg = ArchitectureConfig("hstgcn", n=4, **SMALL)
    params = init_parameters(cfg)
    params["head.weight"] = np.zeros((3, 3))
    with pytest.raises(ValueError, match="head.weight"):
        HSTGCN(cfg, ring(4), params=params)
    with pytest.raises(ValueError, match="Laplacian"):
        HSTGCN(cfg, ring(5))
    del params["head.weight"]
    with pytest.raises(ValueError, match="missing"):
        HSTGCN(cfg, ring(4), params=params)


def test_hybrid_model_requires_volume():
    model = HSTGCN(ArchitectureConfig("hstgcn", n=4, **SMALL), ring(4))
    _, T = toy_inputs(np.random.default_rng(9))
    with pytest.raises(ValueError, match="volume"):
        model.predict(None, T)


def test_normalizer_maps_head_back_to_travel_time():
    cfg = ArchitectureConfig("stgcn", n=4, **SMALL)
    params = {k: np.zeros_like(v) for k, v in init_parameters(cfg).items()}
    norm = Normalizer(np.full(14, 0.07), np.full(14, 0.01), np.ones(26))
    params["head.bias"] = np.full(12, 2.0)
    model = HSTGCN(cfg, ring(4), params=params, normalizer=norm)
    _, T = toy_inputs(np.random.default_rng(10))
    np.testing.assert_allclose(model.predict(None, T), 0.07 + 2.0 * 0.01, atol=1e-15)
    with pytest.raises(ValueError):
        Normalizer(np.zeros(14), np.zeros(14), np.ones(26))
