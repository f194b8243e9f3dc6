import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nsreg.encoder import EncoderParams, encode, mean_aggregator
from nsreg.graph import AttributedGraph, sample_neighbours
from nsreg.numeric import DimensionError


def small_graph(n=12, p=0.3, seed=0, d=5):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < p
    return AttributedGraph.from_edges(n, np.stack([iu[keep], ju[keep]], 1), rng.normal(size=(n, d)),
                                      np.zeros(n, dtype=int))


def loop_oracle(g, params):
    """Full-neighbourhood forward pass written node by node."""
    h = g.features.copy()
    for layer in params.sage:
        nxt = np.zeros((g.n, layer["bias"].shape[1]))
        for v in range(g.n):
            nb = g.neighbours(v)
            agg = h[nb].mean(axis=0) if len(nb) else np.zeros(h.shape[1])
            if params.combine == "sum":
                pre = h[v] @ layer["self"].value + agg @ layer["neigh"].value
            else:
                pre = np.concatenate([h[v], agg]) @ layer["cat"].value
            nxt[v] = np.maximum(pre + layer["bias"].value[0], 0.0)
        h = nxt
    h = np.maximum(h @ params.proj[0]["w"].value + params.proj[0]["bias"].value, 0.0)
    return h @ params.proj[1]["w"].value + params.proj[1]["bias"].value


@pytest.mark.parametrize("combine", ["sum", "concat"])
def test_forward_matches_loop_oracle(combine):
    g = small_graph()
    params = EncoderParams.init(g.d, np.random.default_rng(1), hidden=8, combine=combine)
    for gr in params.groups():
        if gr.name.endswith(".b"):
            gr.value[...] = np.random.default_rng(2).normal(size=gr.shape) * 0.1
    nodes = np.arange(g.n)
    z = encode(g, nodes, sample_neighbours(g, nodes, (None, None), 0), params)
    assert np.max(np.abs(z - loop_oracle(g, params))) < 1e-12


def test_isolated_node_uses_self_path_only():
    g = AttributedGraph.from_edges(3, [(0, 1)], np.eye(3), np.zeros(3))
    params = EncoderParams.init(3, np.random.default_rng(0), hidden=4)
    z = encode(g, [2], sample_neighbours(g, [2], (None, None), 0), params)
    assert np.allclose(z, loop_oracle(g, params)[[2]])


def test_rows_follow_request_order():
    g = small_graph()
    params = EncoderParams.init(g.d, np.random.default_rng(0), hidden=6)
    nodes = [7, 2, 9]
    sample = sample_neighbours(g, nodes, (None, None), 0)
    fwd = encode(g, nodes, sample, params)
    rev = encode(g, nodes[::-1], sample, params)
    assert np.array_equal(fwd[::-1], rev)
    assert fwd.shape == (3, 6)


def test_feature_width_mismatch():
    g = small_graph(d=5)
    params = EncoderParams.init(4, np.random.default_rng(0), hidden=6)
    with pytest.raises(DimensionError, match="5.*4"):
        encode(g, [0], sample_neighbours(g, [0], (2, 2), 0), params)


def test_unknown_combine_rejected():
    with pytest.raises(ValueError):
        EncoderParams.init(3, np.random.default_rng(0), combine="max")


def test_mean_aggregator_rows_sum_to_one_or_zero():
    g = small_graph(20, 0.15, 3)
    block = sample_neighbours(g, np.arange(20), (3,), 0).blocks[-1]
    sums = np.asarray(mean_aggregator(block).sum(axis=1)).ravel()
    expected = np.where(block.isolated, 0.0, 1.0)
    assert np.allclose(sums, expected)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 25), st.integers(0, 10_000))
def test_node_relabelling_equivariance(n, seed):
    g = small_graph(n, 0.3, seed, d=3)
    perm = np.random.default_rng(seed).permutation(n)
    inv = np.argsort(perm)
    # node v in g becomes node inv[v] in h
    h = AttributedGraph.from_edges(n, inv[g.edge_list()], g.features[perm], g.node_class[perm])
    params = EncoderParams.init(3, np.random.default_rng(seed), hidden=5)
    nodes = np.arange(n)
    zg = encode(g, nodes, sample_neighbours(g, nodes, (None, None), 0), params)
    zh = encode(h, nodes, sample_neighbours(h, nodes, (None, None), 0), params)
    assert np.allclose(zg, zh[inv], atol=1e-12)
