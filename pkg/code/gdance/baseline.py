"""
稠密基线模型
把 L 帧 × N 舞者展平为 N·L 个 token 做全局自注意力，作为效率对比的参照
"""

import logging
from typing import Optional

import numpy as np

from . import numerics as ops
from .config import DecoderConfig
from .exceptions import ShapeError
from .motion import POSE_DIM
from .numerics import LayerNorm, Linear, Module, RngStream, Tensor
from .temporal import TimestepEmbedding

logger = logging.getLogger(__name__)


class DenseAttentionLayer(Module):
    """单头全注意力 + 前馈，预归一化残差"""

    def __init__(self, d: int, rng: RngStream):
        self.d = d
        self.norm_attn = LayerNorm(d)
        self.query = Linear(d, d, rng.substream(0), bias=False)
        self.key = Linear(d, d, rng.substream(1), bias=False)
        self.value = Linear(d, d, rng.substream(2), bias=False)
        self.output = Linear(d, d, rng.substream(3), bias=False)
        self.norm_ffn = LayerNorm(d)
        self.ffn_in = Linear(d, 2 * d, rng.substream(4))
        self.ffn_out = Linear(2 * d, d, rng.substream(5))

    def forward(self, h: Tensor) -> Tensor:
        x = self.norm_attn(h)
        scores = ops.scale(ops.matmul(self.query(x), ops.swapaxes(self.key(x), -1, -2)), 1.0 / np.sqrt(self.d))
        h = h + self.output(ops.matmul(ops.softmax(scores), self.value(x)))
        return h + self.ffn_out(ops.relu(self.ffn_in(self.norm_ffn(h))))


class DenseBaselineDecoder(Module):
    """与解码器同宽同层数的 N·L token 稠密注意力模型，接口与 GroupDanceDecoder 一致"""

    def __init__(self, config: DecoderConfig, dancers: int, rng: RngStream, steps: int = 1000):
        self.config = config
        self.dancers = dancers
        d = config.d
        self.input = Linear(POSE_DIM, d, rng.substream(0))
        self.time_embed = TimestepEmbedding(d, steps, rng.substream(1))
        self.music = Linear(config.music_dim, d, rng.substream(2))
        self.layers = [DenseAttentionLayer(d, rng.substream(3, i)) for i in range(config.temporal_layers)]
        self.output = Linear(d, POSE_DIM, rng.substream(4))

    def forward(self, x_t, t_frames: np.ndarray, music: np.ndarray, swap_codes: Optional[np.ndarray] = None,
                roots: Optional[np.ndarray] = None) -> Tensor:
        x = ops.as_tensor(x_t)
        batched = x.ndim == 4
        if not batched:
            x = ops.reshape(x, (1,) + x.shape)
            t_frames, music = np.asarray(t_frames)[None], np.asarray(music)[None]
        if x.shape[-1] != POSE_DIM or x.shape[2] != self.dancers:
            raise ShapeError("dense_baseline", x.shape, (-1, -1, self.dancers, POSE_DIM))
        batch, length, n, _ = x.shape
        d = self.config.d
        frame_cond = self.time_embed(np.asarray(t_frames)) + self.music(Tensor(np.asarray(music, dtype=np.float64)))
        h = self.input(x) + ops.reshape(frame_cond, (batch, length, 1, d))
        h = ops.reshape(h, (batch, length * n, d))
        for layer in self.layers:
            h = layer(h)
        out = ops.reshape(self.output(h), (batch, length, n, POSE_DIM))
        return out if batched else ops.reshape(out, (length, n, POSE_DIM))
