"""
效率基准模块
解析 FLOP 计数、墙钟缩放测量与指数拟合、差分注意力稀疏度探针、参数量统计

FLOP 口径与 numerics.FlopCounter 一致：只统计收缩运算（matmul、einsum、图传播、SSM 扫描）的乘法次数。
"""

import os
import json
import time
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
import plotly.express as px

from .baseline import DenseBaselineDecoder
from .config import BenchConfig, DecoderConfig, get_config
from .exceptions import ConfigError
from .model import GroupDanceDecoder
from .motion import POSE_DIM
from .motion_io import atomic_write
from .numerics import RngStream, Tensor, no_grad
from .spatial import resolve_k
from .temporal import identity_swap

logger = logging.getLogger(__name__)

SPARSITY_THRESHOLD = 1e-3


# ================================================================ 解析计数

def window_width(radius: int, length: int, causal: bool) -> int:
    r = min(radius, length - 1)
    return r + 1 if causal else 2 * r + 1


def flop_count(config: DecoderConfig, L: int, N: int, batch: int = 1) -> Dict[str, int]:
    """
    各组件的解析乘法次数

    图卷积按每节点 k' 条有向边计（k' = N-1 时与实际计数完全一致）；
    dense_attention / dense_total 为同宽同层数的 N·L token 稠密基线。
    """
    d, C, m = config.d, POSE_DIM, batch * N
    frames = batch * L
    layers, n = config.temporal_layers, config.ssm_state_dim
    causal = config.causal
    counts: Dict[str, int] = {}

    counts['input'] = frames * N * C * d
    counts['fusion'] = 2 * frames * (N * d) ** 2
    edges = frames * N * resolve_k(config.graph_k, N)
    counts['gcn'] = config.gcn_layers * (edges * d + frames * N * d * d) if config.use_smb else 0
    counts['embedding'] = 2 * frames * d * d + frames * config.music_dim * d

    if config.self_window is None:
        attention_core = 4 * m * L * L * d
    else:
        attention_core = 4 * m * L * window_width(config.self_window, L, causal) * d
    counts['diff_attention'] = layers * (8 * m * L * d * d + attention_core)

    radius = config.window if config.use_aam else L
    cross_core = 2 * m * L * window_width(radius, L, causal) * d
    counts['cross_attention'] = layers * (2 * frames * d * d + 2 * m * L * d * d + cross_core)

    if config.ssm_mode == 'scan':
        ssm = 3 * m * L * d * n
    elif config.selective_ssm:
        ssm = m * L * L * d * n + m * L * d * n
    else:
        ssm = L * d * n + L * L * d * m
    dt = m * L * d * d if config.selective_ssm else 0
    counts['ssm'] = layers * (ssm + dt)
    counts['ffn'] = layers * 4 * m * L * d * d
    counts['output'] = m * L * d * C
    counts['total'] = sum(counts.values())

    tokens = L * N
    counts['dense_attention'] = layers * 2 * batch * tokens * tokens * d
    counts['dense_total'] = (frames * N * C * d + 2 * frames * d * d + frames * config.music_dim * d
                             + layers * (8 * batch * tokens * d * d) + counts['dense_attention']
                             + batch * tokens * d * C)
    return counts


# ================================================================ 缩放测量

@dataclass
class ScalingReport:
    """缩放测量报告"""
    axis: str
    sizes: List[int]
    decoupled_seconds: List[float]
    dense_seconds: List[float]
    decoupled_flops: List[int]
    dense_flops: List[int]
    decoupled_exponent: float
    dense_exponent: float
    parameters: Dict[str, int] = field(default_factory=dict)
    advisories: List[str] = field(default_factory=list)
    # 实际被测的解耦模型：window / self_window / aam_mode，以及 self_window 是否被替换为 window
    measured_model: Dict[str, Any] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'size': self.sizes,
            'decoupled_seconds': self.decoupled_seconds,
            'dense_seconds': self.dense_seconds,
            'decoupled_flops': self.decoupled_flops,
            'dense_flops': self.dense_flops,
        })


def fit_exponent(sizes, values) -> float:
    """双对数最小二乘拟合增长指数"""
    sizes, values = np.asarray(sizes, dtype=np.float64), np.asarray(values, dtype=np.float64)
    if len(sizes) < 4:
        raise ConfigError(f"指数拟合至少需要 4 个点: {len(sizes)}", key='bench.sizes')
    if np.any(sizes <= 0) or np.any(values <= 0):
        raise ConfigError("指数拟合要求规模与测量值为正", key='bench.sizes')
    slope, _ = np.polyfit(np.log(sizes), np.log(values), 1)
    return float(slope)


def parameter_count(decoder: GroupDanceDecoder) -> Dict[str, int]:
    """参数量：融合层（随 N 变化）与其余部分分开统计"""
    fusion = decoder.fusion.parameter_count()
    total = decoder.parameter_count()
    return {'total': total, 'fusion': fusion, 'other': total - fusion}


def _bench_inputs(L: int, N: int, config: DecoderConfig, steps: int, rng: RngStream):
    generator = rng.generator
    x_t = generator.standard_normal((L, N, POSE_DIM))
    t_frames = generator.integers(1, steps + 1, size=L)
    music = generator.standard_normal((L, config.music_dim))
    return x_t, t_frames, music, identity_swap(N)


def median_forward_seconds(model, inputs, repeats: int, warmup: int) -> float:
    """预热后多次前向的墙钟中位数（无梯度）"""
    x_t, t_frames, music, swap = inputs
    x = Tensor(x_t)
    with no_grad():
        for _ in range(warmup):
            model(x, t_frames, music, swap)
        samples = []
        for _ in range(repeats):
            start = time.perf_counter()
            model(x, t_frames, music, swap)
            samples.append(time.perf_counter() - start)
    return float(np.median(samples))


def run_scaling(bench: BenchConfig, config: DecoderConfig, seed: int = 0, steps: int = 1000,
                callback_system=None) -> ScalingReport:
    """
    分别测量解耦解码器（自注意力带宽取 AAM 半径 w）与稠密基线在各规模下的前向中位耗时

    axis='L' 时固定 N = bench.dancers；axis='N' 时固定 L = bench.frames。
    """
    decoupled_config = replace(config, self_window=config.window if config.self_window is None else config.self_window)
    rng = RngStream(seed)
    times, dense_times, flops, dense_flops, params = [], [], [], [], {}
    decoupled = dense = None
    for index, size in enumerate(bench.sizes):
        L, N = (size, bench.dancers) if bench.axis == 'L' else (bench.frames, size)
        if decoupled is None or bench.axis == 'N':
            decoupled = GroupDanceDecoder(decoupled_config, N, rng.substream(0, N), steps)
            dense = DenseBaselineDecoder(decoupled_config, N, rng.substream(1, N), steps)
        inputs = _bench_inputs(L, N, decoupled_config, steps, rng.substream(2, index))
        times.append(median_forward_seconds(decoupled, inputs, bench.repeats, bench.warmup))
        dense_times.append(median_forward_seconds(dense, inputs, bench.repeats, bench.warmup))
        counts = flop_count(decoupled_config, L, N)
        flops.append(counts['total'])
        dense_flops.append(counts['dense_total'])
        params[str(size)] = parameter_count(decoupled)['total']
        logger.info(f"规模 {bench.axis}={size}: 解耦 {times[-1] * 1000:.1f} ms, 稠密 {dense_times[-1] * 1000:.1f} ms")
        if callback_system:
            callback_system.emit_json({'size': size, 'decoupled': times[-1], 'dense': dense_times[-1]}, "基准进度")

    advisories = []
    resolution = get_config('TIMER_RESOLUTION', 1e-4)
    if min(times[0], dense_times[0]) < 10 * resolution:
        advisories.append(f"最小规模耗时低于计时分辨率的 10 倍 ({resolution:.0e}s)，请增大规模")
    forced = config.self_window is None
    if forced:
        advisories.append(f"被测解耦模型的自注意力带宽取 self_window={config.window}；"
                          f"默认配置 self_window=null 为全序列自注意力，拟合指数不代表默认模型")
    measured = {'window': decoupled_config.window, 'self_window': decoupled_config.self_window,
                'aam_mode': decoupled_config.aam_mode, 'self_window_forced': forced}
    report = ScalingReport(bench.axis, list(bench.sizes), times, dense_times, flops, dense_flops,
                           fit_exponent(bench.sizes, times), fit_exponent(bench.sizes, dense_times),
                           params, advisories, measured)
    for advisory in advisories:
        logger.warning(advisory)
    logger.info(f"增长指数: 解耦 {report.decoupled_exponent:.2f}, 稠密 {report.dense_exponent:.2f}")
    return report


def write_scaling_report(report: ScalingReport, out_dir: str, plot: bool = False) -> Dict[str, str]:
    """写出 JSON、CSV、gnuplot 风格 .dat 以及可选的 plotly HTML"""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        'json': os.path.join(out_dir, 'scaling.json'),
        'csv': os.path.join(out_dir, 'scaling.csv'),
        'dat': os.path.join(out_dir, 'scaling.dat'),
    }
    atomic_write(paths['json'], json.dumps(report.as_dict(), ensure_ascii=False, indent=2))
    frame = report.to_frame()
    atomic_write(paths['csv'], frame.to_csv(index=False))
    lines = ["# size decoupled_seconds dense_seconds"]
    lines += [f"{s} {a:.6e} {b:.6e}" for s, a, b in zip(report.sizes, report.decoupled_seconds, report.dense_seconds)]
    atomic_write(paths['dat'], "\n".join(lines) + "\n")
    if plot:
        long = frame.melt(id_vars='size', value_vars=['decoupled_seconds', 'dense_seconds'],
                          var_name='model', value_name='seconds')
        fig = px.line(long, x='size', y='seconds', color='model', markers=True, log_x=True, log_y=True,
                      title=f"前向耗时随 {report.axis} 的缩放")
        paths['html'] = os.path.join(out_dir, 'scaling.html')
        fig.write_html(paths['html'])
    return paths


# ================================================================ 稀疏度

def sparsity_probe(decoder: GroupDanceDecoder, x_t: np.ndarray, t_frames: np.ndarray, music: np.ndarray,
                   swap: np.ndarray, threshold: float = SPARSITY_THRESHOLD) -> Dict[str, Any]:
    """
    差分注意力矩阵 |A1 - λA2| 中低于阈值的元素比例（逐层）

    只统计窗口内的有效位置。
    """
    layers = [layer.attn for layer in decoder.temporal.layers]
    for attn in layers:
        attn.record_maps, attn.recorded = True, []
    try:
        with no_grad():
            decoder(x_t, t_frames, music, swap)
        fractions = [float(np.mean(attn.recorded[-1] < threshold)) for attn in layers]
    finally:
        for attn in layers:
            attn.record_maps, attn.recorded = False, []
    result = {
        'threshold': threshold,
        'layers': fractions,
        'mean': float(np.mean(fractions)) if fractions else 0.0,
        'lambdas': [float(attn.lam.item()) for attn in layers],
    }
    logger.info(f"差分注意力稀疏度: {['%.3f' % f for f in fractions]}")
    return result
