"""
空间建模测试：构图、归一化与图卷积的置换等变性
"""

import numpy as np
import pytest

from gdance.exceptions import GraphError
from gdance import numerics as ops
from gdance.numerics import RngStream, Tensor, grad_check
from gdance.spatial import (GraphConv, SpatialBlock, build_adjacency, build_adjacency_batch, distance_weights, gcn_layer,
                            graph_propagate, normalize, resolve_k, spatial_block)


@pytest.mark.parametrize("k,n,expected", [
    (None, 2, 1), (None, 3, 1), (None, 5, 2), (1.0, 4, 3), (0.5, 5, 2), (2, 3, 2), (10, 3, 2), (None, 1, 0),
])
def test_resolve_k(k, n, expected):
    assert resolve_k(k, n) == expected


def test_duet_graph_single_edge():
    graph = build_adjacency(np.array([[0.0, 0.0], [3.0, 4.0]]), eps=1e-6)
    assert len(graph.edges) == 1
    i, j, weight = graph.edges[0]
    assert (i, j) == (0, 1)
    assert weight == pytest.approx(1.0 / (5.0 + 1e-6))
    np.testing.assert_allclose(graph.normalized, [[0.0, 1.0], [1.0, 0.0]], atol=1e-12)


def test_adjacency_symmetric_and_spectrally_bounded():
    positions = RngStream(0).generator.uniform(-3, 3, (50, 5, 2))
    sparse, normalized = build_adjacency_batch(positions, k=2)
    np.testing.assert_array_equal(sparse, np.swapaxes(sparse, -1, -2))
    assert np.all(np.diagonal(sparse, axis1=-2, axis2=-1) == 0)
    eigenvalues = np.linalg.eigvalsh(normalized)
    assert np.max(np.abs(eigenvalues)) <= 1.0 + 1e-9


def test_top_k_keeps_nearest_neighbours():
    positions = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 0.0], [11.0, 0.0]])
    graph = build_adjacency(positions, k=1)
    pairs = {(i, j) for i, j, _ in graph.edges}
    assert pairs == {(0, 1), (1, 2), (2, 3)}


def test_close_dancers_are_clamped_or_dropped():
    positions = np.array([[0.0, 0.0], [0.01, 0.0], [2.0, 0.0]])
    clamped = distance_weights(positions, eps=1e-6, d_min=0.05)
    assert clamped[0, 1] == pytest.approx(1.0 / (0.05 + 1e-6))
    dropped = distance_weights(positions, eps=1e-6, d_min=0.05, mask_mode='drop')
    assert dropped[0, 1] == 0.0 and dropped[0, 2] > 0


def test_coincident_dancers_stay_finite():
    graph = build_adjacency(np.zeros((3, 2)), k=2)
    assert np.isfinite(graph.normalized).all()


def test_invalid_inputs_raise_graph_error():
    with pytest.raises(GraphError):
        build_adjacency(np.array([[0.0, np.nan], [1.0, 1.0]]))
    with pytest.raises(GraphError):
        normalize(np.array([[0.0, 1.0], [2.0, 0.0]]))
    with pytest.raises(GraphError):
        build_adjacency(np.zeros((2, 2)), eps=0.0)


def test_spatial_block_is_permutation_equivariant():
    generator = RngStream(3).generator
    block = SpatialBlock(8, 2, RngStream(4), k=None)
    features = generator.standard_normal((6, 4, 8))
    roots = generator.uniform(-3, 3, (6, 4, 2))
    permutation = np.array([2, 0, 3, 1])
    out = spatial_block(Tensor(features), roots, block).numpy()
    permuted = spatial_block(Tensor(features[:, permutation]), roots[:, permutation], block).numpy()
    np.testing.assert_allclose(permuted, out[:, permutation], atol=1e-10)


def test_gcn_layer_swaps_duet_rows():
    swap = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    h = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
    out = gcn_layer(h, swap, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.numpy(), [[[0.0, 1.0], [1.0, 0.0]]])
    negative = gcn_layer(h, swap, Tensor(-np.eye(2)))
    np.testing.assert_array_equal(negative.numpy(), np.zeros((1, 2, 2)))


def test_single_dancer_keeps_only_residual_path():
    roots = np.zeros((5, 1, 2))
    normalized = build_adjacency_batch(roots)[1]
    assert np.all(normalized == 0)
    h = RngStream(5).generator.standard_normal((5, 1, 6))

    widening = GraphConv(6, 4, RngStream(6))
    expected = widening.projection(Tensor(h)).numpy()
    np.testing.assert_allclose(widening(Tensor(h), normalized).numpy(), expected, atol=1e-12)

    block = SpatialBlock(6, 2, RngStream(7))
    np.testing.assert_allclose(block(Tensor(h), roots).numpy(), h, atol=1e-12)


def test_graph_propagate_gradient_matches_finite_differences():
    generator = RngStream(8).generator
    normalized = build_adjacency_batch(generator.uniform(-3, 3, (4, 4, 2)), k=2)[1]
    h = generator.standard_normal((4, 4, 5))
    mix = generator.standard_normal((4, 4, 5))
    report = grad_check(lambda x: ops.sum(graph_propagate(x, normalized) * mix), h, tolerance=1e-4)
    assert report.passed, report.message

    weight = Tensor(generator.standard_normal((5, 3)))
    report = grad_check(lambda x: ops.sum(ops.square(gcn_layer(x, normalized, weight, x[..., :3]))), h,
                        tolerance=1e-4)
    assert report.passed, report.message
