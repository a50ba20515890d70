import numpy as np
import pytest

from hetdiff import autodiff as ad
from hetdiff.aggregation import (
    AttentionParams,
    attention_weights,
    build_normalized_adjacency,
    heterogeneous_propagate,
    homogeneous_aggregate,
    sparse_dropout,
)
from hetdiff.autodiff import Tensor
from hetdiff.errors import ConfigError
from hetdiff.graph import HeteroGraph


def att(rng, d, slope=0.2):
    return AttentionParams(Tensor(rng.normal(size=(2 * d, 1)), requires_grad=True), slope)


def leaky(x, s=0.2):
    return x if x > 0 else s * x


def test_hand_computed_three_node_toy():
    h = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, -1.0]])
    a = np.array([0.5, -1.0, 2.0, 0.25])
    rel = [np.array([1, 2]), np.array([0, 0]), np.array([], dtype=np.int64)]
    out = homogeneous_aggregate(Tensor(h), rel, AttentionParams(Tensor(a.reshape(-1, 1)), 0.2)).values
    e01 = leaky(a[:2] @ h[0] + a[2:] @ h[1])
    e02 = leaky(a[:2] @ h[0] + a[2:] @ h[2])
    w1 = np.exp(e01) / (np.exp(e01) + np.exp(e02))
    expect0 = h[0] + w1 * h[1] + (1 - w1) * h[2]
    np.testing.assert_allclose(out[0], expect0, atol=1e-12)
    np.testing.assert_allclose(out[1], h[1] + h[0], atol=1e-12)
    np.testing.assert_array_equal(out[2], h[2])


def test_no_relations_returns_input(rng):
    h = Tensor(rng.normal(size=(3, 4)))
    out = homogeneous_aggregate(h, [np.array([], dtype=np.int64)] * 3, att(rng, 4))
    np.testing.assert_array_equal(out.values, h.values)


def test_attention_weights_sum_to_one(rng):
    h = rng.normal(size=(6, 4)) * 10
    rel = [rng.integers(0, 6, 3) for _ in range(6)]
    for w in attention_weights(h, rel, att(rng, 4)):
        assert np.all(w >= 0)
        assert abs(w.sum() - 1.0) <= 1e-12


def test_homogeneous_dimension_mismatch(rng):
    with pytest.raises(ad.DimensionError):
        homogeneous_aggregate(Tensor(np.ones((2, 3))), [np.array([1]), np.array([0])], att(rng, 4))


def test_homogeneous_permutation_equivariance(rng):
    n, d = 5, 3
    h = rng.normal(size=(n, d))
    rel = [np.sort(rng.choice([j for j in range(n) if j != i], 2, replace=False)) for i in range(n)]
    p = att(rng, d)
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    out = homogeneous_aggregate(Tensor(h), rel, p).values
    rel_p = [inv[rel[perm[i]]] for i in range(n)]
    out_p = homogeneous_aggregate(Tensor(h[perm]), rel_p, p).values
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


def test_homogeneous_gradients(rng):
    h = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    p = att(rng, 3)
    rel = [np.array([1, 2]), np.array([0, 3]), np.array([3, 3]), np.array([], dtype=np.int64)]
    f = lambda: ad.sum(ad.square(homogeneous_aggregate(h, rel, p)))
    assert ad.finite_difference_check(f, [h, p.a_vec]) <= 1e-4


def test_single_edge_adjacency():
    adj = build_normalized_adjacency(HeteroGraph(1, 1, [(0, 0)]))
    np.testing.assert_allclose(adj.matrix.to_dense(), np.full((2, 2), 0.5))


def test_empty_graph_adjacency_is_identity():
    adj = build_normalized_adjacency(HeteroGraph(2, 3, []))
    np.testing.assert_array_equal(adj.matrix.to_dense(), np.eye(5))


def test_adjacency_matches_dense_oracle(rng):
    A = (rng.random((5, 4)) < 0.5).astype(float)
    g = HeteroGraph(5, 4, np.argwhere(A))
    B = np.block([[np.zeros((5, 5)), A], [A.T, np.zeros((4, 4))]]) + np.eye(9)
    dinv = 1.0 / np.sqrt(B.sum(1))
    dense = adj = build_normalized_adjacency(g).matrix.to_dense()
    np.testing.assert_allclose(dense, dinv[:, None] * B * dinv[None, :], atol=1e-12)
    np.testing.assert_array_equal(adj, adj.T)


def test_propagate_single_edge_values(rng):
    adj = build_normalized_adjacency(HeteroGraph(1, 1, [(0, 0)]))
    ed, eg = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    out_d, out_g = heterogeneous_propagate(adj, Tensor(ed), Tensor(eg), 0.0)
    np.testing.assert_allclose(out_g.values, 0.5 * ed + 0.5 * eg)
    np.testing.assert_allclose(out_d.values, 0.5 * ed + 0.5 * eg)


def test_propagate_zero_in_zero_out():
    adj = build_normalized_adjacency(HeteroGraph(3, 2, [(0, 1), (2, 0)]))
    d, g = heterogeneous_propagate(adj, Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))), 0.5, True, np.random.default_rng(0))
    assert not d.values.any() and not g.values.any()


def test_propagate_rejects_bad_rate():
    adj = build_normalized_adjacency(HeteroGraph(1, 1, []))
    with pytest.raises(ConfigError):
        heterogeneous_propagate(adj, Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))), 1.0)
    with pytest.raises(ConfigError):
        heterogeneous_propagate(adj, Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))), 0.1, training=True)


def test_dropout_keeps_diagonal_and_rescales():
    adj = build_normalized_adjacency(HeteroGraph(3, 3, [(0, 0), (1, 1), (2, 2), (0, 2)]))
    vals = sparse_dropout(adj, 0.5, np.random.default_rng(3))
    base = adj.matrix.vals
    diag = ~adj.offdiag
    np.testing.assert_array_equal(vals[diag], base[diag])
    off = adj.offdiag
    assert np.all((vals[off] == 0) | np.isclose(vals[off], 2 * base[off]))


def test_dropout_expectation_matches_eval_output():
    rng = np.random.default_rng(0)
    g = HeteroGraph(4, 3, [(0, 0), (1, 0), (1, 2), (3, 1), (2, 2)])
    adj = build_normalized_adjacency(g)
    ed, eg = Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=(3, 2)))
    ref_d, ref_g = heterogeneous_propagate(adj, ed, eg, 0.3)
    draws = np.stack([np.concatenate([x.values for x in heterogeneous_propagate(adj, ed, eg, 0.3, True, rng)]) for _ in range(10_000)])
    mean, se = draws.mean(0), draws.std(0, ddof=1) / np.sqrt(len(draws))
    ref = np.concatenate([ref_d.values, ref_g.values])
    assert np.all(np.abs(mean - ref) <= 3 * se + 1e-12)


def test_propagate_gradients(rng):
    g = HeteroGraph(3, 2, [(0, 0), (1, 0), (2, 1)])
    adj = build_normalized_adjacency(g)
    ed = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    eg = Tensor(rng.normal(size=(2, 2)), requires_grad=True)

    def f():
        d, gg = heterogeneous_propagate(adj, ed, eg, 0.2, True, np.random.default_rng(5))
        return ad.sum(ad.square(d)) + ad.sum(gg)

    assert ad.finite_difference_check(f, [ed, eg]) <= 1e-6
