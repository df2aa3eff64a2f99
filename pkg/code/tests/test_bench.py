"""
效率基准测试：解析 FLOP 与实测计数对账、缩放规律、指数拟合、稀疏度探针
"""

import json
import os
from dataclasses import replace

import numpy as np
import pytest

from gdance.baseline import DenseBaselineDecoder
from gdance.bench import (fit_exponent, flop_count, parameter_count, run_scaling, sparsity_probe,
                          write_scaling_report)
from gdance.config import BenchConfig, DecoderConfig
from gdance.exceptions import ConfigError
from gdance.model import GroupDanceDecoder
from gdance.numerics import FlopCounter, RngStream, Tensor, no_grad
from gdance.temporal import identity_swap

from conftest import random_poses


def _measure(model, length, dancers=2, music_dim=5):
    generator = RngStream(length).generator
    x_t = random_poses(RngStream(length + 1), length, dancers)
    t_frames = generator.integers(1, 21, length)
    music = generator.standard_normal((length, music_dim))
    with FlopCounter() as counter, no_grad():
        model(x_t, t_frames, music, identity_swap(dancers))
    return counter.total


VARIANTS = [
    {},
    {'self_window': 2},
    {'aam_mode': 'causal'},
    {'aam_mode': 'causal', 'self_window': 2},
    {'use_aam': False},
    {'use_smb': False},
    {'ssm_mode': 'kernel'},
    {'ssm_mode': 'kernel', 'selective_ssm': False},
    {'selective_ssm': False},
]


@pytest.mark.parametrize("changes", VARIANTS)
@pytest.mark.parametrize("length", [5, 8])
def test_analytic_flops_match_counted(tiny_decoder_config, changes, length):
    config = replace(tiny_decoder_config, **changes)
    decoder = GroupDanceDecoder(config, 2, RngStream(0), steps=20)
    assert _measure(decoder, length) == flop_count(config, length, 2)['total']


@pytest.mark.parametrize("length", [4, 8])
def test_dense_baseline_flops_match_counted(tiny_decoder_config, length):
    baseline = DenseBaselineDecoder(tiny_decoder_config, 2, RngStream(1), steps=20)
    assert _measure(baseline, length) == flop_count(tiny_decoder_config, length, 2)['dense_total']


def test_attention_cost_scaling():
    config = DecoderConfig(self_window=30)
    short, long = flop_count(config, 240, 3), flop_count(config, 480, 3)
    assert long['dense_attention'] == 4 * short['dense_attention']
    for key in ('diff_attention', 'cross_attention', 'ssm', 'total'):
        assert long[key] == 2 * short[key]
    assert flop_count(config, 240, 3, batch=2)['total'] == 2 * short['total']


def test_fit_exponent():
    sizes = np.array([120, 240, 480, 960])
    assert fit_exponent(sizes, 3.5 * sizes ** 2.0) == pytest.approx(2.0, abs=0.01)
    assert fit_exponent(sizes, 0.1 * sizes) == pytest.approx(1.0, abs=0.01)
    with pytest.raises(ConfigError) as excinfo:
        fit_exponent(sizes[:3], sizes[:3])
    assert excinfo.value.key == 'bench.sizes'
    with pytest.raises(ConfigError):
        fit_exponent(sizes, np.array([1.0, 0.0, 1.0, 1.0]))


@pytest.mark.parametrize("self_window", [None, 2])
def test_sparsity_probe_with_tied_branches(tiny_decoder_config, self_window):
    config = replace(tiny_decoder_config, temporal_layers=2, self_window=self_window)
    decoder = GroupDanceDecoder(config, 2, RngStream(2), steps=20)
    d = config.d
    for layer in decoder.temporal.layers:
        for projection in (layer.attn.query, layer.attn.key):
            half = projection.weight.numpy()[:, :d]
            projection.weight = Tensor(np.concatenate([half, half], axis=1), requires_grad=True)
        layer.attn.lam = Tensor([1.0], requires_grad=True)
    x_t = random_poses(RngStream(3), 6, 2)
    result = sparsity_probe(decoder, x_t, np.full(6, 5), np.zeros((6, 5)), identity_swap(2))
    assert result['layers'] == [1.0, 1.0]
    assert result['mean'] == 1.0 and result['lambdas'] == [1.0, 1.0]
    assert all(not layer.attn.record_maps for layer in decoder.temporal.layers)


def test_sparsity_probe_fraction_in_unit_interval(tiny_decoder_config):
    decoder = GroupDanceDecoder(tiny_decoder_config, 2, RngStream(4), steps=20)
    x_t = random_poses(RngStream(5), 6, 2)
    result = sparsity_probe(decoder, x_t, np.full(6, 5), np.zeros((6, 5)), identity_swap(2))
    assert 0.0 <= result['mean'] <= 1.0


def test_parameter_count_split(tiny_decoder_config):
    duet = parameter_count(GroupDanceDecoder(tiny_decoder_config, 2, RngStream(6), steps=20))
    trio = parameter_count(GroupDanceDecoder(tiny_decoder_config, 3, RngStream(6), steps=20))
    assert duet['total'] == duet['fusion'] + duet['other']
    assert trio['fusion'] > duet['fusion']


def test_small_scaling_run_writes_reports(tmp_path, tiny_decoder_config):
    bench = BenchConfig(axis='L', sizes=[4, 6, 8, 10], dancers=2, repeats=1, warmup=0)
    report = run_scaling(bench, tiny_decoder_config, seed=0, steps=20)
    assert len(set(report.parameters.values())) == 1
    assert report.decoupled_flops == [flop_count(replace(tiny_decoder_config, self_window=3), L, 2)['total']
                                      for L in bench.sizes]
    assert np.isfinite(report.decoupled_exponent) and np.isfinite(report.dense_exponent)
    assert report.measured_model == {'window': 3, 'self_window': 3, 'aam_mode': 'symmetric',
                                     'self_window_forced': True}
    assert any('self_window=3' in advisory for advisory in report.advisories)
    paths = write_scaling_report(report, str(tmp_path), plot=True)
    assert all(os.path.exists(path) for path in paths.values())
    assert set(paths) == {'json', 'csv', 'dat', 'html'}
    with open(paths['json'], encoding='utf-8') as handle:
        assert json.load(handle)['measured_model']['self_window_forced'] is True


def test_explicit_self_window_is_measured_as_configured(tiny_decoder_config):
    bench = BenchConfig(axis='L', sizes=[4, 6, 8, 10], dancers=2, repeats=1, warmup=0)
    report = run_scaling(bench, replace(tiny_decoder_config, self_window=2), seed=0, steps=20)
    assert report.measured_model['self_window'] == 2
    assert report.measured_model['self_window_forced'] is False
    assert not any('self_window' in advisory for advisory in report.advisories)


def test_scaling_over_dancers_rebuilds_models(tiny_decoder_config):
    bench = BenchConfig(axis='N', sizes=[2, 3, 4, 5], frames=6, repeats=1, warmup=0)
    report = run_scaling(bench, tiny_decoder_config, seed=0, steps=20)
    counts = [report.parameters[str(n)] for n in bench.sizes]
    assert counts == sorted(counts) and len(set(counts)) == 4


@pytest.mark.slow
def test_wall_clock_exponents():
    report = run_scaling(BenchConfig(), DecoderConfig(), seed=0)
    assert report.decoupled_exponent < 1.35
    assert report.dense_exponent > report.decoupled_exponent + 0.3
