"""
模型模块
解码器 D(x_t, t, M, S) 的组装、群体融合、五项训练损失、Adam 优化器、训练循环与检查点
"""

import json
import struct
import logging
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import numerics as ops
from .config import DecoderConfig, RunConfig, TrainConfig, get_config, resolve_batch_size
from .diffusion import Schedule, frame_levels, make_schedule, max_phase, q_sample, segment_bounds, tns_levels, tns_noise
from .exceptions import ConfigError, MotionIOError, NonFiniteLossError, ShapeError, TruncatedPayloadError, BadMagicError
from .motion import (CONTACT_SLICE, FOOT_JOINTS, POSE_DIM, GroupMotion, MusicTrack, Skeleton, joint_positions_tensor,
                     load_skeleton, motion_joint_positions)
from .motion_io import atomic_write
from .numerics import Linear, Module, RngStream, Tensor
from .spatial import SpatialBlock
from .temporal import SwapEmbedding, TemporalStack, TimestepEmbedding, swap_sequence, timestep_embed
from .utils import StepCallbackSystem, TrainingHistoryManager

logger = logging.getLogger(__name__)

LOSS_NAMES = ('simple', 'vel', 'fk', 'contact', 'dist')


# ================================================================ 解码器

class GroupFusion(Module):
    """沿通道拼接全部舞者后经两层 MLP 再拆回，显式混合舞者间信息"""

    def __init__(self, dancers: int, d_in: int, d: int, rng: RngStream):
        self.dancers = dancers
        self.d = d
        self.hidden = Linear(dancers * d_in, dancers * d, rng.substream(0))
        self.output = Linear(dancers * d, dancers * d, rng.substream(1))

    def forward(self, x: Tensor) -> Tensor:
        lead, n = x.shape[:-2], x.shape[-2]
        if n != self.dancers:
            raise ShapeError("group_fusion", x.shape, (-1, self.dancers, -1), detail="舞者人数与参数不符")
        flat = ops.reshape(x, lead + (n * x.shape[-1],))
        return ops.reshape(self.output(ops.relu(self.hidden(flat))), lead + (n, self.d))


def group_fusion(x: Tensor, fusion: GroupFusion) -> Tensor:
    """函数式入口：L × N × d_in -> L × N × d"""
    return fusion(x)


def quantize_parameters(module: Module):
    """参数统一取 float32 可表示值，检查点往返逐位一致"""
    for name, parameter in module.named_parameters():
        module.set_parameter(name, parameter.data.astype(np.float32).astype(np.float64))


class GroupDanceDecoder(Module):
    """
    输入投影 -> 群体融合 -> 空间块 -> 逐舞者时间栈（时间步 + 换位条件、音乐交叉注意力）-> 输出投影

    forward 接受 (L, N, 151) 单条或 (B, L, N, 151) 批量输入。
    """

    def __init__(self, config: DecoderConfig, dancers: int, rng: RngStream, steps: int = 1000):
        self.config = config
        self.dancers = dancers
        self.steps = steps
        d = config.d
        self.input = Linear(POSE_DIM, d, rng.substream(0))
        self.fusion = GroupFusion(dancers, d, d, rng.substream(1))
        self.spatial = SpatialBlock(d, config.gcn_layers, rng.substream(2), k=config.graph_k, eps=config.graph_eps,
                                    d_min=config.graph_d_min, mask_mode=config.graph_mask_mode) if config.use_smb else None
        self.time_embed = TimestepEmbedding(d, steps, rng.substream(3))
        self.swap_embed = SwapEmbedding(dancers, d, rng.substream(4))
        self.music = Linear(config.music_dim, d, rng.substream(5))
        self.temporal = TemporalStack(d, config.temporal_layers, config.ssm_state_dim, rng.substream(6),
                                      window=config.window, mode=config.aam_mode, use_aam=config.use_aam,
                                      lambda_init=config.lambda_init, prune_tau=config.prune_tau,
                                      self_window=config.self_window, selective=config.selective_ssm,
                                      ssm_mode=config.ssm_mode)
        self.output = Linear(d, POSE_DIM, rng.substream(7))
        quantize_parameters(self)

    def forward(self, x_t, t_frames: np.ndarray, music: np.ndarray, swap_codes: np.ndarray,
                roots: Optional[np.ndarray] = None) -> Tensor:
        """
        Args:
            x_t: (B, L, N, 151) 或 (L, N, 151)
            t_frames: (B, L) 或 (L,) 逐帧时间步
            music: (B, L, d_m) 或 (L, d_m)
            swap_codes: (B, 2N) 或 (2N,)
            roots: 构图用根位置，默认取 x_t 的根通道 (x, y)

        Returns:
            Tensor: 与 x_t 同形状的 x̂0
        """
        x = ops.as_tensor(x_t)
        batched = x.ndim == 4
        if not batched:
            x = ops.reshape(x, (1,) + x.shape)
            t_frames, music, swap_codes = (np.asarray(v)[None] for v in (t_frames, music, swap_codes))
            roots = None if roots is None else np.asarray(roots)[None]
        if x.ndim != 4 or x.shape[-1] != POSE_DIM or x.shape[2] != self.dancers:
            raise ShapeError("decoder_forward", x.shape, (-1, -1, self.dancers, POSE_DIM))
        batch, length, n, _ = x.shape
        music = np.asarray(music, dtype=np.float64)
        if music.shape[:2] != (batch, length) or np.asarray(t_frames).shape != (batch, length):
            raise ShapeError("decoder_forward", x.shape, music.shape, np.asarray(t_frames).shape)
        if roots is None:
            roots = x.data[..., 148:150]

        h = group_fusion(self.input(x), self.fusion)
        if self.spatial is not None:
            h = self.spatial(h, roots)
        d = self.config.d
        h = ops.reshape(ops.transpose(h, (0, 2, 1, 3)), (batch * n, length, d))

        repeat = np.repeat(np.arange(batch), n)
        time_cond = ops.gather(timestep_embed(np.asarray(t_frames), self.time_embed), repeat, axis=0)
        swap_cond = ops.reshape(ops.gather(self.swap_embed(swap_codes), repeat, axis=0), (batch * n, 1, d))
        h = h + time_cond + swap_cond
        h = self.temporal(h, self.music(Tensor(music)), repeat)

        out = ops.transpose(ops.reshape(self.output(h), (batch, n, length, POSE_DIM)), (0, 2, 1, 3))
        return out if batched else ops.reshape(out, (length, n, POSE_DIM))


def decoder_forward(decoder: GroupDanceDecoder, x_t, t_frames, music, swap, roots=None) -> Tensor:
    """函数式入口"""
    return decoder(x_t, t_frames, music, swap, roots)


# ================================================================ 损失

@dataclass
class LossBreakdown:
    """五项损失与加权总和"""
    simple: float
    vel: float
    fk: float
    contact: float
    dist: float
    total: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def _frame_diff(x: Tensor) -> Tensor:
    """沿帧轴（倒数第 3 维）的一阶差分"""
    return x[..., 1:, :, :] - x[..., :-1, :, :]


def _zero() -> Tensor:
    return Tensor(0.0)


def loss_terms(prediction: Tensor, target: np.ndarray, skeleton: Optional[Skeleton] = None) -> Dict[str, Tensor]:
    """
    五项损失（均为可微标量）

    simple: 全通道 MSE
    vel: 帧差分 MSE
    fk: FK 关节位置 MSE
    contact: 逐帧 Σ‖(预测足部位移) ⊙ 预测触地概率‖² 的均值
    dist: 逐帧、逐无序舞者对的相对根位置 (x, y) 误差平方和的均值
    """
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape or prediction.ndim < 3:
        raise ShapeError("compute_losses", prediction.shape, target.shape)
    skeleton = skeleton or load_skeleton()
    length, dancers = target.shape[-3], target.shape[-2]
    terms: Dict[str, Tensor] = {'simple': ops.mean(ops.square(prediction - target))}

    joints = joint_positions_tensor(prediction, skeleton)
    true_joints = motion_joint_positions(target, skeleton)
    terms['fk'] = ops.mean(ops.square(joints - true_joints))

    if length >= 2:
        terms['vel'] = ops.mean(ops.square(_frame_diff(prediction) - np.diff(target, axis=-3)))
        feet = ops.gather(joints, np.array(FOOT_JOINTS), axis=-2)                 # (..., L, N, 4, 3)
        foot_motion = feet[..., 1:, :, :, :] - feet[..., :-1, :, :, :]
        gate = ops.reshape(prediction[..., :-1, :, CONTACT_SLICE], foot_motion.shape[:-1] + (1,))
        terms['contact'] = ops.mean(ops.sum(ops.square(foot_motion * gate), axis=(-2, -1)))
    else:
        terms['vel'], terms['contact'] = _zero(), _zero()

    if dancers >= 2:
        first, second = np.triu_indices(dancers, k=1)
        roots = prediction[..., 148:150]
        relative = ops.gather(roots, first, axis=-2) - ops.gather(roots, second, axis=-2)
        true_roots = target[..., 148:150]
        true_relative = true_roots[..., first, :] - true_roots[..., second, :]
        terms['dist'] = ops.mean(ops.sum(ops.square(relative - true_relative), axis=-1))
    else:
        terms['dist'] = _zero()
    return terms


def combine_losses(terms: Dict[str, Tensor], weights: Dict[str, float]) -> Tensor:
    """加权总损失 Σ λ_k · L_k"""
    total = _zero()
    for name in LOSS_NAMES:
        if weights.get(name, 0.0) < 0:
            raise ConfigError(f"损失权重必须非负: {name}={weights[name]}", key=f'decoder.loss_weights.{name}')
        total = total + ops.scale(terms[name], float(weights.get(name, 0.0)))
    return total


def breakdown(terms: Dict[str, Tensor], total: Tensor) -> LossBreakdown:
    return LossBreakdown(**{name: terms[name].item() for name in LOSS_NAMES}, total=total.item())


def compute_losses(prediction, target: np.ndarray, skeleton: Optional[Skeleton] = None,
                   weights: Optional[Dict[str, float]] = None) -> LossBreakdown:
    """计算损失分解（不保留梯度）"""
    weights = weights or DecoderConfig().loss_weights
    with ops.no_grad():
        terms = loss_terms(ops.as_tensor(prediction), target, skeleton)
        return breakdown(terms, combine_losses(terms, weights))


# ================================================================ 优化器

class Adam:
    """Adam（无权重衰减），按参数名维护一阶/二阶矩"""

    def __init__(self, lr: float = 5e-5, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.first: Dict[str, np.ndarray] = {}
        self.second: Dict[str, np.ndarray] = {}

    def step(self, module: Module):
        self.step_count += 1
        beta1, beta2 = self.betas
        for name, parameter in module.named_parameters():
            grad = parameter.grad if parameter.grad is not None else np.zeros(parameter.shape)
            first = beta1 * self.first.get(name, 0.0) + (1.0 - beta1) * grad
            second = beta2 * self.second.get(name, 0.0) + (1.0 - beta2) * grad * grad
            self.first[name], self.second[name] = first, second
            first_hat = first / (1.0 - beta1 ** self.step_count)
            second_hat = second / (1.0 - beta2 ** self.step_count)
            updated = parameter.data - self.lr * first_hat / (np.sqrt(second_hat) + self.eps)
            module.set_parameter(name, updated.astype(np.float32).astype(np.float64))


# ================================================================ 训练

@dataclass
class TrainingBatch:
    x0: np.ndarray          # (B, L, N, 151)
    x_t: np.ndarray
    t_frames: np.ndarray    # (B, L)
    music: np.ndarray       # (B, L, d_m)
    swaps: np.ndarray       # (B, 2N)


def sequence_swap(motion: GroupMotion) -> np.ndarray:
    """整段的换位编码：首帧与末帧根位置"""
    roots = motion.roots_xy()
    return swap_sequence(roots[0], roots[-1])


def make_batch(dataset: Sequence[Tuple[GroupMotion, MusicTrack]], indices: Sequence[int], schedule: Schedule,
               segment_len: int, rng: RngStream, use_tns: bool = True) -> TrainingBatch:
    """
    采样噪声水平并加噪

    use_tns=True 时每条序列独立均匀采样相位 p 并按三角计划逐段加噪（水平 0 的段保持干净作为历史上下文）；
    否则整段使用同一个均匀采样的 t ∈ [1, T]。
    """
    x0 = np.stack([dataset[i][0].poses for i in indices])
    music = np.stack([dataset[i][1].features[:x0.shape[1]] for i in indices])
    swaps = np.stack([sequence_swap(dataset[i][0]) for i in indices])
    length = x0.shape[1]
    noised, levels = [], []
    for b in range(len(indices)):
        stream = rng.substream(b)
        if use_tns:
            segments = len(segment_bounds(length, segment_len))
            phase = int(stream.substream(0).generator.integers(0, max_phase(segments, schedule.T) + 1))
            plan = tns_levels(phase, segments, schedule.T, segment_len=segment_len)
            noised.append(tns_noise(x0[b], plan, stream.substream(1), schedule))
            levels.append(frame_levels(plan, length))
        else:
            t = int(stream.substream(0).generator.integers(1, schedule.T + 1))
            noise = stream.substream(1).generator.standard_normal(x0[b].shape)
            noised.append(q_sample(x0[b], t, noise, schedule))
            levels.append(np.full(length, t, dtype=np.int64))
    return TrainingBatch(x0, np.stack(noised), np.stack(levels), music, swaps)


def batch_loss(decoder: GroupDanceDecoder, batch: TrainingBatch, weights: Dict[str, float],
               skeleton: Optional[Skeleton] = None) -> Tuple[Tensor, Dict[str, Tensor]]:
    prediction = decoder_forward(decoder, Tensor(batch.x_t), batch.t_frames, batch.music, batch.swaps)
    terms = loss_terms(prediction, batch.x0, skeleton)
    return combine_losses(terms, weights), terms


def train_step(decoder: GroupDanceDecoder, optimizer: Adam, batch: TrainingBatch, weights: Dict[str, float],
               step: int = 0, skeleton: Optional[Skeleton] = None) -> LossBreakdown:
    """单步：前向、损失检查、反向与 Adam 更新"""
    decoder.zero_grad()
    total, terms = batch_loss(decoder, batch, weights, skeleton)
    for name in LOSS_NAMES + ('total',):
        value = total.item() if name == 'total' else terms[name].item()
        if not np.isfinite(value):
            raise NonFiniteLossError(step, name, value)
    total.backward()
    optimizer.step(decoder)
    return breakdown(terms, total)


@dataclass
class TrainResult:
    decoder: GroupDanceDecoder
    optimizer: Adam
    history: TrainingHistoryManager
    schedule: Schedule

    @property
    def losses(self) -> pd.DataFrame:
        return self.history.to_frame()


def build_decoder(run_config: RunConfig, dancers: int, seed: int) -> GroupDanceDecoder:
    return GroupDanceDecoder(run_config.decoder, dancers, RngStream(seed).substream(1), run_config.schedule.T)


def train_loop(dataset: Sequence[Tuple[GroupMotion, MusicTrack]], run_config: RunConfig, seed: int,
               callback_system: Optional[StepCallbackSystem] = None,
               decoder: Optional[GroupDanceDecoder] = None, optimizer: Optional[Adam] = None,
               start_step: int = 0) -> TrainResult:
    """
    训练循环

    Args:
        dataset: (GroupMotion, MusicTrack) 列表，动作已重排
        run_config: 运行配置
        seed: 随机种子（初始化子流 1，第 k 步批次子流 (2, k)）
        callback_system: 进度事件分发器

    Raises:
        NonFiniteLossError: 某步损失非有限
    """
    if not dataset:
        raise ConfigError("训练数据集为空", key='dataset.count')
    train: TrainConfig = run_config.train
    dancers = dataset[0][0].dancers
    batch_size = resolve_batch_size(train, dancers, len(dataset))
    schedule = make_schedule(run_config.schedule.T, run_config.schedule.kind)
    decoder = decoder or build_decoder(run_config, dancers, seed)
    optimizer = optimizer or Adam(train.lr, tuple(train.betas))
    skeleton = load_skeleton()
    weights = run_config.decoder.loss_weights
    history = TrainingHistoryManager()
    root = RngStream(seed)
    logger.info(f"开始训练: N={dancers}, 批大小={batch_size}, 步数={train.steps}, "
                f"参数量={decoder.parameter_count()}, TNS={'开' if train.use_tns else '关'}")

    for step in range(start_step, start_step + train.steps):
        stream = root.substream(2, step)
        indices = stream.substream(0).generator.choice(len(dataset), size=batch_size, replace=False)
        batch = make_batch(dataset, indices, schedule, run_config.schedule.segment_len, stream.substream(1),
                           train.use_tns)
        losses = train_step(decoder, optimizer, batch, weights, step, skeleton)
        history.add_step(step, losses.as_dict())
        if train.log_every and (step + 1) % train.log_every == 0:
            logger.info(f"第 {step + 1} 步: total={losses.total:.5f} simple={losses.simple:.5f} "
                        f"vel={losses.vel:.5f} fk={losses.fk:.5f} contact={losses.contact:.5f} dist={losses.dist:.5f}")
            if callback_system:
                callback_system.emit_json({'step': step + 1, **losses.as_dict()}, "训练损失")
    if callback_system:
        callback_system.emit_text(f"训练完成，最终总损失 {history.recent_mean(1):.5f}", "训练", status="success")
    return TrainResult(decoder, optimizer, history, schedule)


# ================================================================ 检查点

CHECKPOINT_COUNT = struct.Struct('<4sI')


def encode_checkpoint(module: Module) -> bytes:
    """GDCK | u32 参数个数 | 逐参数: u16 名称长度, 名称, u8 阶数, u32 各维, float32 负载"""
    parameters = module.named_parameters()
    chunks = [CHECKPOINT_COUNT.pack(get_config('CHECKPOINT_MAGIC'), len(parameters))]
    for name, parameter in parameters:
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<H', len(encoded)) + encoded)
        chunks.append(struct.pack(f'<B{parameter.ndim}I', parameter.ndim, *parameter.shape))
        chunks.append(parameter.data.astype('<f4').tobytes(order='C'))
    return b''.join(chunks)


def decode_checkpoint(payload: bytes, path: str = '<bytes>') -> Dict[str, np.ndarray]:
    def take(offset: int, size: int) -> bytes:
        if offset + size > len(payload):
            raise TruncatedPayloadError("检查点数据不完整", path=path)
        return payload[offset:offset + size]

    magic, count = CHECKPOINT_COUNT.unpack(take(0, CHECKPOINT_COUNT.size))
    if magic != get_config('CHECKPOINT_MAGIC'):
        raise BadMagicError(f"检查点魔数错误: {magic!r}", path=path)
    offset, mapping = CHECKPOINT_COUNT.size, {}
    for _ in range(count):
        (name_length,) = struct.unpack('<H', take(offset, 2))
        name = take(offset + 2, name_length).decode('utf-8')
        offset += 2 + name_length
        (rank,) = struct.unpack('<B', take(offset, 1))
        shape = struct.unpack(f'<{rank}I', take(offset + 1, 4 * rank))
        offset += 1 + 4 * rank
        size = int(np.prod(shape, dtype=np.int64)) * 4
        mapping[name] = np.frombuffer(take(offset, size), dtype='<f4').astype(np.float64).reshape(shape)
        offset += size
    return mapping


def save_checkpoint(path: str, decoder: GroupDanceDecoder, run_config: Optional[RunConfig] = None,
                    step: Optional[int] = None):
    """写入参数文件与同名 .json 元数据（结构配置、舞者数、T）"""
    atomic_write(path, encode_checkpoint(decoder))
    meta = {
        'dancers': decoder.dancers,
        'T': decoder.steps,
        'decoder': asdict(decoder.config),
        'step': step,
        'run_config': run_config.to_dict() if run_config else None,
    }
    atomic_write(path + '.json', json.dumps(meta, ensure_ascii=False, indent=2))
    logger.info(f"检查点已写入: {path} ({decoder.parameter_count()} 个参数)")


def read_checkpoint_meta(path: str) -> Dict[str, Any]:
    """读取检查点旁的 .json 元数据"""
    try:
        with open(path + '.json', 'r', encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError:
        raise MotionIOError("检查点元数据不存在", path=path + '.json') from None


def load_checkpoint(path: str, decoder: Optional[GroupDanceDecoder] = None) -> GroupDanceDecoder:
    """读取检查点；未给定解码器时根据元数据重建"""
    try:
        with open(path, 'rb') as f:
            mapping = decode_checkpoint(f.read(), path)
    except FileNotFoundError:
        raise MotionIOError("检查点文件不存在", path=path) from None
    if decoder is None:
        meta = read_checkpoint_meta(path)
        decoder = GroupDanceDecoder(DecoderConfig(**meta['decoder']), meta['dancers'], RngStream(0), meta['T'])
    decoder.load_parameters(mapping)
    return decoder
