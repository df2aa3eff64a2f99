"""
时间建模测试：对齐掩码、差分注意力、SSM 两种执行方式与条件编码
"""

from dataclasses import replace

import numpy as np
import pytest

from gdance import numerics as ops
from gdance.exceptions import InvalidTimestepError, MaskError, NumericError
from gdance.model import GroupDanceDecoder
from gdance.numerics import RngStream, Tensor, grad_check
from gdance.temporal import (DifferentialAttention, SelectiveSSM, SwapEmbedding, TemporalStack, TimestepEmbedding,
                             build_alignment_mask, identity_swap, masked_cross_attention, sinusoidal_embedding,
                             ssm_apply, ssm_discretize, ssm_kernel, swap_mode_encode, swap_sequence, timestep_embed)

from conftest import random_poses


def _qkv(generator, m, length, d):
    return tuple(Tensor(generator.standard_normal((m, length, d))) for _ in range(3))


def test_mask_semantics():
    symmetric = build_alignment_mask(5, 1, 'symmetric').allowed
    causal = build_alignment_mask(5, 1, 'causal').allowed
    assert symmetric[2].tolist() == [False, True, True, True, False]
    assert causal[2].tolist() == [False, True, True, False, False]
    with pytest.raises(MaskError):
        build_alignment_mask(5, -1)
    with pytest.raises(MaskError):
        build_alignment_mask(0, 1)


@pytest.mark.parametrize("windowed", [True, False])
def test_cross_attention_weights_vanish_outside_window(windowed):
    generator = RngStream(0).generator
    for _ in range(100):
        length, window = int(generator.integers(1, 65)), int(generator.integers(0, 9))
        mode = 'causal' if generator.random() < 0.5 else 'symmetric'
        mask = build_alignment_mask(length, window, mode)
        q, k, v = _qkv(generator, 2, length, 4)
        _, weights = masked_cross_attention(q, k, v, mask, windowed=windowed, return_weights=True)
        assert np.all(weights[:, ~mask.allowed] == 0.0)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)


def test_windowed_and_dense_cross_attention_agree():
    generator = RngStream(1).generator
    q, k, v = _qkv(generator, 3, 20, 6)
    for mode in ('symmetric', 'causal'):
        mask = build_alignment_mask(20, 4, mode)
        windowed = masked_cross_attention(q, k, v, mask, windowed=True).numpy()
        dense = masked_cross_attention(q, k, v, mask, windowed=False).numpy()
        np.testing.assert_allclose(windowed, dense, atol=1e-12)


def test_full_window_equals_unmasked_attention():
    generator = RngStream(2).generator
    q, k, v = _qkv(generator, 2, 12, 4)
    out = masked_cross_attention(q, k, v, build_alignment_mask(12, 11, 'symmetric')).numpy()
    scores = np.einsum('mld,mkd->mlk', q.numpy(), k.numpy()) / 2.0
    weights = np.exp(scores - scores.max(axis=-1, keepdims=True))
    weights /= weights.sum(axis=-1, keepdims=True)
    np.testing.assert_allclose(out, weights @ v.numpy(), atol=1e-12)


@pytest.mark.parametrize("windowed", [True, False])
def test_causal_cross_attention_ignores_future_music(windowed):
    generator = RngStream(3).generator
    q, k, v = _qkv(generator, 2, 30, 4)
    mask = build_alignment_mask(30, 5, 'causal')
    base = masked_cross_attention(q, k, v, mask, windowed=windowed).numpy()
    cut = 17
    k2, v2 = k.numpy().copy(), v.numpy().copy()
    k2[:, cut + 1:] += generator.standard_normal(k2[:, cut + 1:].shape) * 5.0
    v2[:, cut + 1:] += generator.standard_normal(v2[:, cut + 1:].shape) * 5.0
    perturbed = masked_cross_attention(q, Tensor(k2), Tensor(v2), mask, windowed=windowed).numpy()
    np.testing.assert_array_equal(perturbed[:, :cut + 1], base[:, :cut + 1])


def test_causal_temporal_stack_ignores_future_music():
    generator = RngStream(4).generator
    stack = TemporalStack(8, 2, 3, RngStream(5), window=3, mode='causal')
    h = Tensor(generator.standard_normal((2, 16, 8)))
    music = generator.standard_normal((1, 16, 8))
    repeat = np.zeros(2, dtype=np.int64)
    base = stack(h, Tensor(music), repeat).numpy()
    changed = music.copy()
    changed[:, 10:] = generator.standard_normal(changed[:, 10:].shape)
    perturbed = stack(h, Tensor(changed), repeat).numpy()
    np.testing.assert_array_equal(perturbed[:, :10], base[:, :10])


def test_diff_attention_with_zero_lambda_is_single_branch():
    d = 6
    layer = DifferentialAttention(d, RngStream(6), lambda_init=0.0)
    x = RngStream(7).generator.standard_normal((2, 9, d))
    q1 = x @ layer.query.weight.numpy()[:, :d]
    k1 = x @ layer.key.weight.numpy()[:, :d]
    v = x @ layer.value.weight.numpy()
    scores = np.einsum('mld,mkd->mlk', q1, k1) / np.sqrt(d)
    weights = np.exp(scores - scores.max(axis=-1, keepdims=True))
    weights /= weights.sum(axis=-1, keepdims=True)
    expected = (weights @ v) @ layer.output.weight.numpy()
    np.testing.assert_allclose(layer(Tensor(x)).numpy(), expected, atol=1e-12)


def test_local_diff_attention_matches_full_when_window_covers_sequence():
    x = Tensor(RngStream(8).generator.standard_normal((1, 7, 4)))
    full = DifferentialAttention(4, RngStream(9), self_window=None)
    local = DifferentialAttention(4, RngStream(9), self_window=6)
    np.testing.assert_allclose(local(x).numpy(), full(x).numpy(), atol=1e-12)


def test_diff_attention_rejects_non_finite_lambda():
    layer = DifferentialAttention(4, RngStream(0))
    layer.lam = Tensor([np.inf], requires_grad=True)
    with pytest.raises(NumericError):
        layer(Tensor(np.zeros((1, 3, 4))))


def test_diff_attention_gradient():
    layer = DifferentialAttention(4, RngStream(10), lambda_init=0.3, self_window=2)
    weights = RngStream(11).generator.standard_normal((1, 6, 4))
    x = RngStream(12).generator.standard_normal((1, 6, 4))
    report = grad_check(lambda t: ops.sum(layer(t) * weights), x, tolerance=1e-4)
    assert report.passed, report


@pytest.mark.parametrize("length", [16, 64, 256])
@pytest.mark.parametrize("selective", [True, False])
def test_ssm_scan_and_kernel_agree(length, selective):
    for draw in range(20):
        rng = RngStream(100 + draw)
        ssm = SelectiveSSM(4, 3, rng.substream(0), selective=selective)
        x = Tensor(rng.substream(1).generator.standard_normal((1, length, 4)))
        log_a, b_bar = ssm.discretize(x)
        scan = ssm_apply(x, log_a, b_bar, ssm.c, 'scan').numpy()
        kernel = ssm_apply(x, log_a, b_bar, ssm.c, 'kernel').numpy()
        assert np.max(np.abs(scan - kernel)) < 1e-8


def test_ssm_gradient_through_scan():
    ssm = SelectiveSSM(3, 2, RngStream(13), selective=True)
    weights = RngStream(14).generator.standard_normal((2, 6, 3))
    x = RngStream(15).generator.standard_normal((2, 6, 3))
    report = grad_check(lambda t: ops.sum(ssm(t) * weights), x, tolerance=1e-4)
    assert report.passed, report


def test_zoh_discretization_limit():
    a_bar, b_bar = ssm_discretize(np.array([[0.0, -1.0]]), np.array([[2.0, 2.0]]), np.array([[0.1]]))
    np.testing.assert_allclose(a_bar, [[1.0, np.exp(-0.1)]])
    np.testing.assert_allclose(b_bar, [[0.2, np.expm1(-0.1) / -1.0 * 2.0]])
    with pytest.raises(NumericError):
        ssm_discretize(np.array([[-1.0]]), np.array([[1.0]]), np.array([[0.0]]))


def test_swap_sequence_ranks_end_positions():
    start = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    end = np.array([[2.0, 1.0], [0.0, 2.0], [1.0, 0.0]])
    np.testing.assert_array_equal(swap_sequence(start, end), [1, 2, 0, 2, 0, 1])
    np.testing.assert_array_equal(swap_sequence(start, start), identity_swap(3))


def test_swap_embedding_matches_encoder():
    embedding = SwapEmbedding(3, 5, RngStream(16))
    start = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    end = np.array([[2.0, 1.0], [0.0, 2.0], [1.0, 0.0]])
    code = swap_mode_encode(start, end, embedding)
    np.testing.assert_allclose(embedding(code.index_sequence[None]).numpy()[0], code.embedding, atol=1e-12)


def test_timestep_embedding_is_lipschitz_and_bounded():
    t = np.arange(0, 1001)
    table = sinusoidal_embedding(t, 16)
    assert np.max(np.abs(np.diff(table, axis=0))) <= 1.0 + 1e-12
    embedding = TimestepEmbedding(16, 1000, RngStream(17))
    assert embedding(np.array([0, 500, 1000])).shape == (3, 16)
    with pytest.raises(InvalidTimestepError):
        embedding(np.array([1001]))


@pytest.mark.parametrize("mode", ['scan', 'kernel'])
def test_ssm_impulse_response_is_kernel(mode):
    generator = RngStream(18).generator
    log_a = Tensor(-generator.uniform(0.05, 1.0, (3, 2)))
    b_bar = Tensor(generator.uniform(0.1, 1.0, (3, 2)))
    C = Tensor(generator.standard_normal((3, 2)))
    impulse = np.zeros((1, 12, 3))
    impulse[0, 0] = 1.0
    response = ssm_apply(Tensor(impulse), log_a, b_bar, C, mode).numpy()[0]
    expected = ssm_kernel(log_a, b_bar, C, 12).numpy()
    np.testing.assert_allclose(response, expected, atol=1e-12)
    manual = np.einsum('dn,ldn->ld', C.numpy() * b_bar.numpy(),
                       np.exp(np.arange(12)[:, None, None] * log_a.numpy()))
    np.testing.assert_allclose(response, manual, atol=1e-12)


@pytest.mark.parametrize("mode", ['scan', 'kernel'])
def test_ssm_without_memory_is_pointwise(mode):
    generator = RngStream(19).generator
    log_a = Tensor(np.full((4, 3), -1000.0))
    b_bar = Tensor(generator.uniform(0.1, 1.0, (4, 3)))
    C = Tensor(generator.standard_normal((4, 3)))
    x = generator.standard_normal((2, 9, 4))
    y = ssm_apply(Tensor(x), log_a, b_bar, C, mode).numpy()
    np.testing.assert_allclose(y, x * np.sum(C.numpy() * b_bar.numpy(), axis=-1), atol=1e-12)


def test_constant_timestep_gives_identical_rows():
    embedding = TimestepEmbedding(8, 50, RngStream(20))
    rows = embedding(np.full(6, 17)).numpy()
    np.testing.assert_allclose(rows, np.repeat(rows[:1], 6, axis=0), rtol=0, atol=1e-12)
    ends = embedding(np.array([0, 50])).numpy()
    assert not np.allclose(ends[0], ends[1])
    table = sinusoidal_embedding(np.full(4, 3), 8)
    np.testing.assert_array_equal(table, np.repeat(table[:1], 4, axis=0))


def test_timestep_embed_accepts_scalar_and_vector():
    embedding = TimestepEmbedding(8, 50, RngStream(21))
    scalar = timestep_embed(7, embedding).numpy()
    assert scalar.shape == (1, 8)
    vector = timestep_embed(np.array([3, 7]), embedding).numpy()
    np.testing.assert_allclose(scalar[0], vector[1], rtol=0, atol=1e-12)
    assert timestep_embed(np.zeros((2, 5), dtype=np.int64), embedding).shape == (2, 5, 8)
    with pytest.raises(InvalidTimestepError):
        timestep_embed(-1, embedding)


def test_causal_decoder_ignores_future_music(tiny_decoder_config):
    config = replace(tiny_decoder_config, aam_mode='causal')
    decoder = GroupDanceDecoder(config, 2, RngStream(22), steps=20)
    generator = RngStream(23).generator
    x_t = random_poses(RngStream(24), 12, 2)
    t_frames = generator.integers(1, 21, 12)
    music = generator.standard_normal((12, 5))
    base = decoder(x_t, t_frames, music, identity_swap(2)).numpy()
    cut = 7
    changed = music.copy()
    changed[cut:] = generator.standard_normal(changed[cut:].shape) * 3.0
    perturbed = decoder(x_t, t_frames, changed, identity_swap(2)).numpy()
    np.testing.assert_allclose(perturbed[:cut], base[:cut], rtol=0, atol=1e-12)
    assert not np.allclose(perturbed[cut:], base[cut:])


def test_stack_reuses_banded_mask_without_dense_matrix():
    stack = TemporalStack(4, 1, 2, RngStream(25), window=3)
    h = Tensor(RngStream(26).generator.standard_normal((2, 40, 4)))
    music = Tensor(RngStream(27).generator.standard_normal((1, 40, 4)))
    stack(h, music, np.zeros(2, dtype=np.int64))
    mask = stack.alignment_mask(40)
    assert mask is stack.alignment_mask(40)
    assert 'values' not in vars(mask)
    assert mask.allowed.shape == (40, 40)
    assert 'values' in vars(mask)
    assert stack.alignment_mask(12) is not mask
