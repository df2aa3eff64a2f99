"""
时间建模模块
差分自注意力、对齐掩码交叉注意力、状态空间模型（ZOH 离散化，扫描/卷积核双实现）、
换位编码与时间步嵌入

所有序列张量布局为 (M, L, d)，M 为独立序列数（批 × 舞者）。
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from . import numerics as ops
from .exceptions import InvalidTimestepError, MaskError, NumericError, ShapeError
from .numerics import LayerNorm, Linear, Module, RngStream, Tensor, count_flops, custom_op, init_normal

logger = logging.getLogger(__name__)

ZOH_LIMIT = 1e-8
MASK_MODES = ('symmetric', 'causal')


# ================================================================ 对齐掩码

@dataclass
class AlignmentMask:
    """加性掩码：窗口内为 0，窗口外为 -inf。稠密矩阵首次访问时才生成，带状路径只读半径"""
    length: int
    window_radius: int
    mode: str

    @cached_property
    def values(self) -> np.ndarray:
        lag = np.arange(self.length)[:, None] - np.arange(self.length)[None, :]
        if self.mode == 'symmetric':
            allowed = np.abs(lag) <= self.window_radius
        else:
            allowed = (lag >= 0) & (lag <= self.window_radius)
        return np.where(allowed, 0.0, -np.inf)

    @property
    def allowed(self) -> np.ndarray:
        return np.isfinite(self.values)


def build_alignment_mask(length: int, window: int, mode: str = 'symmetric') -> AlignmentMask:
    """
    symmetric: (l, m) 可见当且仅当 |l - m| ≤ w
    causal:    (l, m) 可见当且仅当 0 ≤ l - m ≤ w
    """
    if length < 1:
        raise MaskError(f"序列长度必须 ≥ 1: {length}")
    if window < 0:
        raise MaskError(f"窗口半径不能为负: {window}")
    if mode not in MASK_MODES:
        raise MaskError(f"未知的掩码模式: {mode}")
    return AlignmentMask(length, window, mode)


def window_index(length: int, radius: int, mode: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    带状窗口的取值索引

    Returns:
        (index (L, W) 截断到 [0, L-1], valid (L, W) 是否落在序列内)
    """
    if radius < 0:
        raise MaskError(f"窗口半径不能为负: {radius}")
    if mode not in MASK_MODES:
        raise MaskError(f"未知的掩码模式: {mode}")
    r = min(radius, length - 1)
    offsets = np.arange(-r, r + 1) if mode == 'symmetric' else np.arange(-r, 1)
    raw = np.arange(length)[:, None] + offsets[None, :]
    valid = (raw >= 0) & (raw < length)
    return np.clip(raw, 0, length - 1), valid


def scatter_window(weights: np.ndarray, index: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """把 (M, L, W) 窗口权重展开为 (M, L, L) 稠密矩阵"""
    dense = np.zeros(weights.shape[:-1] + (index.shape[0],))
    rows, cols = np.nonzero(valid)
    dense[..., rows, index[rows, cols]] = weights[..., rows, cols]
    return dense


def _window_weights(q: Tensor, k: Tensor, index: np.ndarray, valid: np.ndarray, scale: float) -> Tensor:
    keys = ops.gather(k, index, axis=1)        # (M, L, W, d)
    scores = ops.scale(ops.einsum('mld,mlwd->mlw', q, keys), scale)
    return ops.softmax(ops.masked_fill(scores, ~valid, -np.inf), axis=-1)


def masked_cross_attention(q: Tensor, k: Tensor, v: Tensor, mask: AlignmentMask, windowed: bool = True,
                           return_weights: bool = False):
    """
    Softmax((Q K_mᵀ + A) / √d) V_m

    windowed=True 时只取窗口内的键（O(L·w·d)），否则用稠密 L × L 掩码。

    Args:
        q: (M, L, d) 动作查询
        k, v: (M, L, d) 音乐键值
        mask: 对齐掩码

    Returns:
        Tensor 或 (Tensor, np.ndarray 稠密权重 (M, L, L))
    """
    if q.ndim != 3 or k.shape != q.shape or v.shape[:2] != q.shape[:2]:
        raise ShapeError("masked_cross_attention", q.shape, k.shape, v.shape)
    length = q.shape[1]
    if mask.length != length:
        raise ShapeError("masked_cross_attention", q.shape, (mask.length, mask.length), detail="掩码长度不符")
    scale = 1.0 / np.sqrt(q.shape[-1])
    if windowed:
        index, valid = window_index(length, mask.window_radius, mask.mode)
        weights = _window_weights(q, k, index, valid, scale)
        out = ops.einsum('mlw,mlwe->mle', weights, ops.gather(v, index, axis=1))
        dense = scatter_window(weights.data, index, valid) if return_weights else None
    else:
        blocked = ~mask.allowed
        if blocked.all(axis=-1).any():
            raise MaskError("存在被完全屏蔽的行")
        scores = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), scale)
        weights = ops.softmax(ops.masked_fill(scores, blocked, -np.inf), axis=-1)
        out = ops.matmul(weights, v)
        dense = np.array(weights.data) if return_weights else None
    return (out, dense) if return_weights else out


# ================================================================ 差分注意力

class DifferentialAttention(Module):
    """
    (softmax(Q1 K1ᵀ/√d) - λ·softmax(Q2 K2ᵀ/√d)) V，再投影回 d

    self_window 为 None 时是精确全注意力，否则为带宽 s 的局部差分注意力；
    causal=True 时只看当前及过去帧。
    """

    def __init__(self, d: int, rng: RngStream, lambda_init: float = 0.5, prune_tau: float = 0.0,
                 self_window: Optional[int] = None, causal: bool = False):
        self.d = d
        self.prune_tau = prune_tau
        self.self_window = self_window
        self.causal = causal
        self.query = Linear(d, 2 * d, rng.substream(0), bias=False)
        self.key = Linear(d, 2 * d, rng.substream(1), bias=False)
        self.value = Linear(d, 2 * d, rng.substream(2), bias=False)
        self.output = Linear(2 * d, d, rng.substream(3), bias=False)
        self.lam = Tensor([lambda_init], requires_grad=True)
        self.record_maps = False
        self.recorded: List[np.ndarray] = []

    def _prune(self, diff: Tensor) -> Tensor:
        if self.prune_tau <= 0:
            return diff
        return ops.masked_fill(diff, np.abs(diff.data) < self.prune_tau, 0.0)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.d:
            raise ShapeError("diff_attention", x.shape, (-1, -1, self.d))
        if not np.isfinite(self.lam.data).all():
            raise NumericError(f"差分注意力 λ 非有限: {self.lam.data}")
        length = x.shape[1]
        scale = 1.0 / np.sqrt(self.d)
        q1, q2 = ops.split(self.query(x), 2, axis=-1)
        k1, k2 = ops.split(self.key(x), 2, axis=-1)
        v = self.value(x)

        if self.self_window is None:
            future = np.triu(np.ones((length, length), dtype=bool), k=1) if self.causal else np.zeros((length, length), dtype=bool)
            s1 = ops.masked_fill(ops.scale(ops.matmul(q1, ops.swapaxes(k1, -1, -2)), scale), future, -np.inf)
            s2 = ops.masked_fill(ops.scale(ops.matmul(q2, ops.swapaxes(k2, -1, -2)), scale), future, -np.inf)
            diff = self._prune(ops.softmax(s1) - self.lam * ops.softmax(s2))
            out = ops.matmul(diff, v)
            valid = None
        else:
            index, valid = window_index(length, self.self_window, 'causal' if self.causal else 'symmetric')
            a1 = _window_weights(q1, k1, index, valid, scale)
            a2 = _window_weights(q2, k2, index, valid, scale)
            diff = self._prune(a1 - self.lam * a2)
            out = ops.einsum('mlw,mlwe->mle', diff, ops.gather(v, index, axis=1))

        if self.record_maps:
            entries = np.abs(diff.data) if valid is None else np.abs(diff.data)[..., valid]
            self.recorded.append(entries)
        return self.output(out)


def diff_attention(x: Tensor, layer: DifferentialAttention) -> Tensor:
    """函数式入口"""
    return layer(x)


# ================================================================ 状态空间模型

@dataclass
class SsmParams:
    """对角连续时间参数（每通道独立状态）"""
    A: np.ndarray       # (d, n)，非正
    B: np.ndarray       # (d, n)
    C: np.ndarray       # (d, n)
    delta: np.ndarray   # 正步长，可随输入变化


def ssm_discretize(A: np.ndarray, B: np.ndarray, delta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    零阶保持离散化

    Ā = exp(ΔA)；B̄ = (ΔA)^-1 (exp(ΔA) - 1) ΔB，|ΔA| < 1e-8 时取极限 ΔB
    """
    A, B, delta = (np.asarray(v, dtype=np.float64) for v in (A, B, delta))
    if np.any(delta <= 0):
        raise NumericError(f"SSM 步长 Δ 必须为正: min={float(np.min(delta))}")
    if np.any(A > 0):
        raise NumericError("SSM 对角 A 必须为非正实数")
    z = delta * A
    small = np.abs(z) < ZOH_LIMIT
    factor = np.where(small, 1.0, np.expm1(z) / np.where(small, 1.0, z))
    return np.exp(z), factor * delta * B


def zoh_factor(z: Tensor) -> Tensor:
    """(exp(z) - 1) / z，在 0 附近取极限 1"""
    small = np.abs(z.data) < ZOH_LIMIT
    safe = np.where(small, 1.0, z.data)
    value = np.where(small, 1.0, np.expm1(safe) / safe)
    tiny = np.abs(z.data) < 1e-4
    derivative = np.where(tiny, 0.5 + z.data / 3.0,
                          (np.exp(safe) * safe - np.expm1(safe)) / (safe * safe))
    return custom_op(value, (z,), lambda g: (g * derivative,), "zoh_factor")


def ssm_scan(a_bar: Tensor, b_bar: Tensor, x: Tensor, C: Tensor) -> Tensor:
    """
    递推 h_l = Ā_l h_{l-1} + B̄_l x_l，y_l = Σ_n C h_l，零初值

    Args:
        a_bar, b_bar: (M, L, d, n)
        x: (M, L, d)
        C: (d, n)
    """
    if a_bar.shape != b_bar.shape or a_bar.shape[:3] != x.shape or a_bar.shape[2:] != C.shape:
        raise ShapeError("ssm_scan", a_bar.shape, b_bar.shape, x.shape, C.shape)
    batch, length, width, state = a_bar.shape
    count_flops("ssm_scan", 3 * batch * length * width * state)
    a, b, u = a_bar.data, b_bar.data, x.data
    h = np.zeros(a.shape)
    carry = np.zeros((batch, width, state))
    for l in range(length):
        carry = a[:, l] * carry + b[:, l] * u[:, l, :, None]
        h[:, l] = carry
    y = np.einsum('mldn,dn->mld', h, C.data)

    def backward(g):
        grad_a, grad_b = np.zeros(a.shape), np.zeros(b.shape)
        grad_x = np.zeros(u.shape)
        grad_C = np.einsum('mld,mldn->dn', g, h)
        carry_grad = np.zeros((batch, width, state))
        for l in range(length - 1, -1, -1):
            dh = g[:, l, :, None] * C.data + carry_grad
            if l > 0:
                grad_a[:, l] = dh * h[:, l - 1]
            grad_b[:, l] = dh * u[:, l, :, None]
            grad_x[:, l] = np.sum(dh * b[:, l], axis=-1)
            carry_grad = a[:, l] * dh
        return grad_a, grad_b, grad_x, grad_C

    return custom_op(y, (a_bar, b_bar, x, C), backward, "ssm_scan")


def ssm_kernel(log_a: Tensor, b_bar: Tensor, C: Tensor, length: int) -> Tensor:
    """时不变卷积核 K̄_j = Σ_n C Ā^j B̄，返回 (L, d)"""
    powers = ops.exp(Tensor(np.arange(length, dtype=np.float64).reshape(length, 1, 1)) * log_a)
    return ops.einsum('ldn,dn->ld', powers, C * b_bar)


def ssm_apply(x: Tensor, log_a: Tensor, b_bar: Tensor, C: Tensor, mode: str = 'scan') -> Tensor:
    """
    执行离散 SSM

    log_a = ΔA（即 log Ā）。时不变参数形状为 (d, n)，选择性参数为 (M, L, d, n)。
    scan 为逐步递推；kernel 为因果卷积（时不变用 K̄ 的 Toeplitz 展开，
    选择性用 exp(S_l - S_m) 的显式传递矩阵）。
    """
    if mode not in ('scan', 'kernel'):
        raise NumericError(f"未知的 SSM 执行模式: {mode}")
    batch, length, width = x.shape
    time_invariant = log_a.ndim == 2
    if mode == 'scan':
        a_bar = ops.exp(log_a)
        if time_invariant:
            full = (batch, length) + log_a.shape
            a_bar, b_bar = ops.broadcast_to(a_bar, full), ops.broadcast_to(b_bar, full)
        return ssm_scan(a_bar, b_bar, x, C)

    lag = np.arange(length)[:, None] - np.arange(length)[None, :]
    future = lag < 0
    if time_invariant:
        kernel = ssm_kernel(log_a, b_bar, C, length)                       # (L, d)
        toeplitz = ops.gather(kernel, np.clip(lag, 0, None), axis=0)       # (L, L, d)
        toeplitz = ops.masked_fill(toeplitz, future[:, :, None], 0.0)
        return ops.einsum('lmc,xmc->xlc', toeplitz, x)

    cumulative = ops.cumsum(log_a, axis=1)                                 # (M, L, d, n)
    state = log_a.shape[-1]
    exponent = (ops.reshape(cumulative, (batch, length, 1, width, state))
                - ops.reshape(cumulative, (batch, 1, length, width, state)))
    transfer = ops.exp(ops.masked_fill(exponent, future[None, :, :, None, None], -np.inf))
    drive = b_bar * ops.reshape(x, (batch, length, width, 1))
    states = ops.einsum('blmcn,bmcn->blcn', transfer, drive)
    return ops.einsum('blcn,cn->blc', states, C)


class SelectiveSSM(Module):
    """
    对角 SSM 骨干：A = -exp(A_log)，Δ = softplus(x W_Δ + b_Δ)（选择性）或逐通道常数
    """

    def __init__(self, d: int, state_dim: int, rng: RngStream, selective: bool = True, mode: str = 'scan'):
        self.selective = selective
        self.mode = mode
        generator = rng.substream(0).generator
        self.a_log = Tensor(np.log(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (d, 1))), requires_grad=True)
        self.b = init_normal(rng.substream(1), (d, state_dim), 1.0 / np.sqrt(state_dim))
        self.c = init_normal(rng.substream(2), (d, state_dim), 1.0 / np.sqrt(state_dim))
        dt = np.exp(generator.uniform(np.log(1e-3), np.log(1e-1), size=d))
        dt_bias = dt + np.log(-np.expm1(-dt))   # softplus 的反函数
        if selective:
            self.dt_proj = Linear(d, d, rng.substream(3))
            self.dt_proj.bias = Tensor(dt_bias, requires_grad=True)
        else:
            self.dt_bias = Tensor(dt_bias, requires_grad=True)

    def discretize(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """返回 (ΔA, B̄)"""
        A = -ops.exp(self.a_log)
        if self.selective:
            batch, length, width = x.shape
            delta = ops.reshape(ops.softplus(self.dt_proj(x)), (batch, length, width, 1))
        else:
            delta = ops.reshape(ops.softplus(self.dt_bias), (self.a_log.shape[0], 1))
        log_a = delta * A
        return log_a, zoh_factor(log_a) * delta * self.b

    def forward(self, x: Tensor) -> Tensor:
        log_a, b_bar = self.discretize(x)
        return ssm_apply(x, log_a, b_bar, self.c, self.mode)


# ================================================================ 条件编码

@dataclass
class SwapCode:
    """换位编码：段末 x 排名 + y 排名，及其嵌入"""
    index_sequence: np.ndarray     # (2N,)
    embedding: Optional[np.ndarray] = None


def swap_sequence(roots_start: np.ndarray, roots_end: np.ndarray) -> np.ndarray:
    """段末按 x、再按 y 稳定排序得到的舞者编号序列（同值按编号）"""
    roots_start, roots_end = np.asarray(roots_start), np.asarray(roots_end)
    if roots_start.shape != roots_end.shape or roots_end.ndim != 2 or roots_end.shape[1] < 2:
        raise ShapeError("swap_mode_encode", roots_start.shape, roots_end.shape)
    by_x = np.argsort(roots_end[:, 0], kind='stable')
    by_y = np.argsort(roots_end[:, 1], kind='stable')
    return np.concatenate([by_x, by_y]).astype(np.int64)


class SwapEmbedding(Module):
    """每个 (槽位, 舞者编号) 一个可学习向量，编码取全部槽位的均值"""

    def __init__(self, dancers: int, d: int, rng: RngStream):
        self.dancers = dancers
        self.d = d
        self.table = init_normal(rng, (2 * dancers, dancers, d), 1.0 / np.sqrt(d))

    def forward(self, sequences: np.ndarray) -> Tensor:
        """sequences: (B, 2N) -> (B, d)"""
        sequences = np.asarray(sequences, dtype=np.int64)
        if sequences.ndim != 2 or sequences.shape[1] != 2 * self.dancers:
            raise ShapeError("swap_embedding", sequences.shape, (-1, 2 * self.dancers))
        flat = np.arange(2 * self.dancers)[None, :] * self.dancers + sequences
        table = ops.reshape(self.table, (2 * self.dancers * self.dancers, self.d))
        return ops.mean(ops.gather(table, flat, axis=0), axis=1)


def swap_mode_encode(roots_start: np.ndarray, roots_end: np.ndarray,
                     embed_table: Union[SwapEmbedding, np.ndarray]) -> SwapCode:
    """计算换位编码及其嵌入向量"""
    sequence = swap_sequence(roots_start, roots_end)
    table = embed_table.table.data if isinstance(embed_table, SwapEmbedding) else np.asarray(embed_table)
    n = roots_end.shape[0]
    if table.shape[:2] != (2 * n, n):
        raise ShapeError("swap_mode_encode", table.shape, (2 * n, n, -1))
    embedding = table[np.arange(2 * n), sequence].mean(axis=0)
    return SwapCode(sequence, embedding)


def identity_swap(dancers: int) -> np.ndarray:
    return np.concatenate([np.arange(dancers), np.arange(dancers)]).astype(np.int64)


def sinusoidal_embedding(t: np.ndarray, d: int) -> np.ndarray:
    """频率 ω_k = 10000^(-2k/d) ≤ 1 的正弦嵌入，每个坐标对 t 是 1-Lipschitz"""
    if d % 2 != 0:
        raise ShapeError("timestep_embed", (d,), detail="宽度必须为偶数")
    t = np.asarray(t, dtype=np.float64)
    freqs = np.power(10000.0, -2.0 * np.arange(d // 2) / d)
    angles = t[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


class TimestepEmbedding(Module):
    """逐帧时间步嵌入：正弦编码 + 两层投影"""

    def __init__(self, d: int, steps: int, rng: RngStream):
        self.d = d
        self.steps = steps
        self.hidden = Linear(d, d, rng.substream(0))
        self.output = Linear(d, d, rng.substream(1))

    def forward(self, t: np.ndarray) -> Tensor:
        t = np.asarray(t)
        if t.size and (t.min() < 0 or t.max() > self.steps):
            raise InvalidTimestepError(f"时间步超出 [0, {self.steps}]: [{t.min()}, {t.max()}]")
        return self.output(ops.relu(self.hidden(Tensor(sinusoidal_embedding(t, self.d)))))


def timestep_embed(t: np.ndarray, embedding: TimestepEmbedding) -> Tensor:
    """函数式入口：标量 t 或逐帧 t 向量 -> (..., d)"""
    return embedding(np.atleast_1d(t))


# ================================================================ 时间层

class TemporalLayer(Module):
    """预归一化残差结构：DiffAttn -> 对齐交叉注意力 -> SSM -> 前馈"""

    def __init__(self, d: int, state_dim: int, rng: RngStream, lambda_init: float = 0.5, prune_tau: float = 0.0,
                 self_window: Optional[int] = None, causal: bool = False, selective: bool = True,
                 ssm_mode: str = 'scan'):
        self.d = d
        self.norm_attn = LayerNorm(d)
        self.attn = DifferentialAttention(d, rng.substream(0), lambda_init, prune_tau, self_window, causal)
        self.norm_cross = LayerNorm(d)
        self.cross_query = Linear(d, d, rng.substream(1), bias=False)
        self.cross_key = Linear(d, d, rng.substream(2), bias=False)
        self.cross_value = Linear(d, d, rng.substream(3), bias=False)
        self.cross_output = Linear(d, d, rng.substream(4), bias=False)
        self.norm_ssm = LayerNorm(d)
        self.ssm = SelectiveSSM(d, state_dim, rng.substream(5), selective, ssm_mode)
        self.norm_ffn = LayerNorm(d)
        self.ffn_in = Linear(d, 2 * d, rng.substream(6))
        self.ffn_out = Linear(2 * d, d, rng.substream(7))
        self.dense_cross = False

    def forward(self, h: Tensor, music: Tensor, repeat: np.ndarray, mask: AlignmentMask) -> Tensor:
        """
        Args:
            h: (M, L, d) 逐舞者序列
            music: (B, L, d) 投影后的音乐特征
            repeat: (M,) 每个序列对应的批索引
            mask: 对齐掩码
        """
        h = h + self.attn(self.norm_attn(h))
        keys = ops.gather(self.cross_key(music), repeat, axis=0)
        values = ops.gather(self.cross_value(music), repeat, axis=0)
        query = self.cross_query(self.norm_cross(h))
        h = h + self.cross_output(masked_cross_attention(query, keys, values, mask, windowed=not self.dense_cross))
        h = h + self.ssm(self.norm_ssm(h))
        return h + self.ffn_out(ops.relu(self.ffn_in(self.norm_ffn(h))))


class TemporalStack(Module):
    """时间层堆叠"""

    def __init__(self, d: int, layers: int, state_dim: int, rng: RngStream, window: int = 30,
                 mode: str = 'symmetric', use_aam: bool = True, **layer_options):
        self.window = window
        self.mode = mode
        self.use_aam = use_aam
        self.layers = [TemporalLayer(d, state_dim, rng.substream(i), causal=(mode == 'causal'), **layer_options)
                       for i in range(layers)]
        self._masks: Dict[int, AlignmentMask] = {}

    def alignment_mask(self, length: int) -> AlignmentMask:
        if length not in self._masks:
            # 关闭 AAM 时退化为全窗口（因果模式下仍不看未来）
            radius = self.window if self.use_aam else length
            self._masks[length] = build_alignment_mask(length, radius, self.mode)
        return self._masks[length]

    def forward(self, h: Tensor, music: Tensor, repeat: np.ndarray) -> Tensor:
        mask = self.alignment_mask(h.shape[1])
        for layer in self.layers:
            h = layer(h, music, repeat, mask)
        return h
