"""
空间建模模块
基于舞者间距离的加权图：top-k 稀疏化、对称归一化与逐帧图卷积
"""

import math
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from . import numerics as ops
from .exceptions import GraphError, ShapeError
from .numerics import Linear, Module, RngStream, Tensor, count_flops, custom_op, init_normal

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-6
DEFAULT_D_MIN = 0.05


@dataclass
class SpatialGraph:
    """单帧舞者图"""
    n: int
    edges: List[Tuple[int, int, float]]   # (i, j, weight)，i < j
    adjacency: np.ndarray                 # 稀疏化后的 A
    normalized: np.ndarray                # D^-1/2 A D^-1/2


def resolve_k(k: Optional[Union[int, float]], n: int) -> int:
    """
    每个节点保留的候选边数

    整数表示条数，浮点数表示占 N-1 的比例，None 为 ceil(0.5·(N-1))；结果截断到 N-1。
    """
    if n <= 1:
        return 0
    if k is None:
        count = math.ceil(0.5 * (n - 1))
    elif isinstance(k, float):
        count = math.ceil(k * (n - 1))
    else:
        count = int(k)
    return max(0, min(count, n - 1))


def distance_weights(positions: np.ndarray, eps: float = DEFAULT_EPS, d_min: float = DEFAULT_D_MIN,
                     mask_mode: str = 'clamp') -> np.ndarray:
    """
    全连接权重 A_ij = 1 / (max(dist, d_min) + eps)，对角为 0

    mask_mode='drop' 时距离小于 d_min 的边直接删除而不是截断。

    Args:
        positions: (..., N, 2)
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[-1] != 2:
        raise ShapeError("build_adjacency", positions.shape, (-1, 2))
    if not np.isfinite(positions).all():
        raise GraphError("舞者位置包含非有限值")
    if eps <= 0 or d_min < 0:
        raise GraphError(f"eps 必须为正且 d_min 非负: eps={eps}, d_min={d_min}")
    delta = positions[..., :, None, :] - positions[..., None, :, :]
    dist = np.sqrt(np.sum(delta * delta, axis=-1))
    if mask_mode == 'clamp':
        weights = 1.0 / (np.maximum(dist, d_min) + eps)
    elif mask_mode == 'drop':
        weights = np.where(dist < d_min, 0.0, 1.0 / (dist + eps))
    else:
        raise GraphError(f"未知的近距离屏蔽方式: {mask_mode}")
    n = positions.shape[-2]
    weights[..., np.arange(n), np.arange(n)] = 0.0
    return weights


def top_k_mask(weights: np.ndarray, k: int) -> np.ndarray:
    """每个节点最强的 k 条候选边（同权按索引），有向、未对称化"""
    n = weights.shape[-1]
    keep = np.zeros(weights.shape, dtype=bool)
    if k <= 0 or n <= 1:
        return keep
    ranking = np.where(np.eye(n, dtype=bool), -np.inf, weights)
    order = np.argsort(-ranking, axis=-1, kind='stable')[..., :k]
    np.put_along_axis(keep, order, True, axis=-1)
    return keep


def top_k_symmetric(weights: np.ndarray, k: int) -> np.ndarray:
    """top-k 候选取并集对称化，被屏蔽（权重为 0）的边不保留"""
    keep = top_k_mask(weights, k) & (weights > 0)
    keep |= np.swapaxes(keep, -1, -2)
    return np.where(keep, weights, 0.0)


def normalize(adjacency: np.ndarray) -> np.ndarray:
    """
    对称归一化 D^-1/2 A D^-1/2；度为 0 的行列保持为 0

    Args:
        adjacency: (..., N, N) 对称非负矩阵
    """
    adjacency = np.asarray(adjacency, dtype=np.float64)
    if adjacency.shape[-1] != adjacency.shape[-2]:
        raise ShapeError("normalize", adjacency.shape)
    if not np.allclose(adjacency, np.swapaxes(adjacency, -1, -2), rtol=0.0, atol=1e-12):
        raise GraphError("邻接矩阵不对称")
    if np.any(adjacency < 0):
        raise GraphError("邻接矩阵存在负权")
    degree = adjacency.sum(axis=-1)
    inv_sqrt = np.where(degree > 0, 1.0 / np.sqrt(np.where(degree > 0, degree, 1.0)), 0.0)
    return inv_sqrt[..., :, None] * adjacency * inv_sqrt[..., None, :]


def build_adjacency_batch(positions: np.ndarray, eps: float = DEFAULT_EPS, k: Optional[Union[int, float]] = None,
                          d_min: float = DEFAULT_D_MIN, mask_mode: str = 'clamp') -> Tuple[np.ndarray, np.ndarray]:
    """
    所有帧一次向量化构图

    Args:
        positions: (F, N, 2)

    Returns:
        (稀疏化邻接 (F, N, N), 归一化邻接 (F, N, N))
    """
    weights = distance_weights(positions, eps, d_min, mask_mode)
    sparse = top_k_symmetric(weights, resolve_k(k, weights.shape[-1]))
    return sparse, normalize(sparse)


def build_adjacency(positions: np.ndarray, eps: float = DEFAULT_EPS, k: Optional[Union[int, float]] = None,
                    d_min: float = DEFAULT_D_MIN, mask_mode: str = 'clamp') -> SpatialGraph:
    """
    单帧构图

    Args:
        positions: N × 2 根位置（米）
        eps: 防止除零的小量
        k: 每个节点保留的边数（整数）或比例（小数）
        d_min: 距离下限

    Returns:
        SpatialGraph
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2:
        raise ShapeError("build_adjacency", positions.shape, (-1, 2))
    sparse, normalized = build_adjacency_batch(positions[None], eps, k, d_min, mask_mode)
    sparse, normalized = sparse[0], normalized[0]
    rows, cols = np.nonzero(np.triu(sparse, k=1))
    edges = [(int(i), int(j), float(sparse[i, j])) for i, j in zip(rows, cols)]
    return SpatialGraph(positions.shape[0], edges, sparse, normalized)


def graph_propagate(h: Tensor, normalized: np.ndarray) -> Tensor:
    """
    稀疏边传播 out[f, i] = Σ_j Ã[f, i, j] · h[f, j]

    只遍历非零边，乘法次数为 边数 × 通道数。

    Args:
        h: (F, N, d)
        normalized: (F, N, N)
    """
    if h.ndim != 3 or normalized.shape != (h.shape[0], h.shape[1], h.shape[1]):
        raise ShapeError("graph_propagate", h.shape, normalized.shape)
    frames, dst, src = np.nonzero(normalized)
    weights = normalized[frames, dst, src][:, None]
    count_flops("graph_propagate", len(frames) * h.shape[-1])
    out = np.zeros(h.shape)
    np.add.at(out, (frames, dst), weights * h.data[frames, src])

    def backward(g):
        grad = np.zeros(h.shape)
        np.add.at(grad, (frames, src), weights * g[frames, dst])
        return (grad,)

    return custom_op(out, (h,), backward, "graph_propagate")


def gcn_layer(h: Tensor, normalized: np.ndarray, weight: Tensor, residual: Optional[Tensor] = None) -> Tensor:
    """
    H' = ReLU(Ã H W) + residual

    Args:
        h: (F, N, d)
        normalized: (F, N, N)
        weight: (d, d')
        residual: 残差项（None 表示关闭残差）
    """
    if h.shape[-1] != weight.shape[0]:
        raise ShapeError("gcn_layer", h.shape, weight.shape)
    frames, n, _ = h.shape
    propagated = ops.reshape(graph_propagate(h, normalized), (frames * n, h.shape[-1]))
    out = ops.reshape(ops.relu(ops.matmul(propagated, weight)), (frames, n, weight.shape[1]))
    return out if residual is None else out + residual


class GraphConv(Module):
    """跨帧共享权重的图卷积层，宽度变化时残差经线性投影"""

    def __init__(self, d_in: int, d_out: int, rng: RngStream, residual: bool = True):
        self.weight = init_normal(rng.substream(0), (d_in, d_out), 1.0 / np.sqrt(d_in))
        self.residual = residual
        self.projection = Linear(d_in, d_out, rng.substream(1), bias=False) if residual and d_in != d_out else None

    def forward(self, h: Tensor, normalized: np.ndarray) -> Tensor:
        skip = None
        if self.residual:
            skip = self.projection(h) if self.projection is not None else h
        return gcn_layer(h, normalized, self.weight, skip)


class SpatialBlock(Module):
    """
    空间建模块：按当前根位置逐帧构图，再叠加若干图卷积层

    输入 (..., N, d)，前导维度均视为独立帧。
    """

    def __init__(self, d: int, layers: int, rng: RngStream, k: Optional[Union[int, float]] = None,
                 eps: float = DEFAULT_EPS, d_min: float = DEFAULT_D_MIN, mask_mode: str = 'clamp'):
        self.k, self.eps, self.d_min, self.mask_mode = k, eps, d_min, mask_mode
        self.layers = [GraphConv(d, d, rng.substream(i)) for i in range(layers)]

    def graphs(self, roots: np.ndarray) -> np.ndarray:
        return build_adjacency_batch(roots, self.eps, self.k, self.d_min, self.mask_mode)[1]

    def forward(self, x: Tensor, roots: np.ndarray) -> Tensor:
        lead, n, d = x.shape[:-2], x.shape[-2], x.shape[-1]
        roots = np.asarray(roots, dtype=np.float64)
        if roots.shape != lead + (n, 2):
            raise ShapeError("spatial_block", x.shape, roots.shape)
        frames = int(np.prod(lead, dtype=np.int64))
        normalized = self.graphs(roots.reshape(frames, n, 2))
        h = ops.reshape(x, (frames, n, d))
        for layer in self.layers:
            h = layer(h, normalized)
        return ops.reshape(h, x.shape)


def spatial_block(x: Tensor, roots: np.ndarray, block: SpatialBlock) -> Tensor:
    """函数式入口：对 L × N × d 特征逐帧应用空间块"""
    return block(x, roots)
