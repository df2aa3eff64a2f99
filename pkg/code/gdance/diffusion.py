"""
扩散模块
噪声调度、前向加噪、分段三角噪声调度（TNS）、DDPM 反向一步、离线/TNS 采样与流式分段引擎

时间步索引 0 表示干净数据（β_0 = 0，ᾱ_0 = 1），1..T 为加噪步。
去噪器一律预测 x̂0，接口为 denoiser(x_t (L, N, 151), t_frames (L,), cond) -> x̂0。
"""

import math
import time
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, Iterable, Iterator, List, Optional, Union

import numpy as np

from .exceptions import InvalidTimestepError, ScheduleError, ShapeError, StreamError
from .motion import POSE_DIM, GroupMotion, MusicTrack
from .numerics import RngStream, no_grad
from .temporal import SwapCode

logger = logging.getLogger(__name__)

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


# ================================================================ 调度

@dataclass
class Schedule:
    """长度为 T+1 的调度表，下标 0 对应干净数据"""
    T: int
    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def posterior_coefficients(self, t: np.ndarray):
        """x0 参数化后验 q(x_{t-1} | x_t, x0) 的 (x0 系数, x_t 系数, 方差 β̃)"""
        t = np.asarray(t, dtype=np.int64)
        previous = self.alpha_bars[np.maximum(t - 1, 0)]
        current = self.alpha_bars[t]
        denom = np.where(t > 0, 1.0 - current, 1.0)
        coef_x0 = np.sqrt(previous) * self.betas[t] / denom
        coef_xt = np.sqrt(self.alphas[t]) * (1.0 - previous) / denom
        variance = (1.0 - previous) / denom * self.betas[t]
        return coef_x0, coef_xt, variance


def make_schedule(T: int, kind: str = 'linear') -> Schedule:
    """
    构造噪声调度

    linear: β 从 1e-4 线性增至 0.02
    cosine: ᾱ(t) = cos²(((t/T + s)/(1 + s))·π/2) / ᾱ(0)，β 截断到 0.999
    """
    if T < 1:
        raise ScheduleError(f"扩散步数 T 必须 ≥ 1: {T}")
    if kind == 'linear':
        betas = np.linspace(1e-4, 0.02, T) if T > 1 else np.array([1e-4])
    elif kind == 'cosine':
        steps = np.arange(T + 1, dtype=np.float64) / T
        curve = np.cos((steps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * np.pi / 2.0) ** 2
        curve = curve / curve[0]
        betas = np.clip(1.0 - curve[1:] / curve[:-1], 1e-12, MAX_BETA)
    else:
        raise ScheduleError(f"未知的调度类型: {kind}")
    betas = np.concatenate([[0.0], betas])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return Schedule(T, kind, betas, alphas, alpha_bars)


def _check_timesteps(t: np.ndarray, schedule: Schedule):
    if t.size and (t.min() < 0 or t.max() > schedule.T):
        raise InvalidTimestepError(f"时间步超出 [0, {schedule.T}]: [{t.min()}, {t.max()}]")


def _per_frame(t: np.ndarray, ndim: int) -> np.ndarray:
    return t.reshape(t.shape + (1,) * (ndim - t.ndim))


def q_sample(x0: np.ndarray, t: Union[int, np.ndarray], noise: np.ndarray, schedule: Schedule) -> np.ndarray:
    """
    x_t = √ᾱ_t x0 + √(1-ᾱ_t) ε

    t 可以是标量，也可以是 x0 前导维度上的逐帧数组；t = 0 的位置与 x0 逐位相同。
    """
    x0, noise = np.asarray(x0, dtype=np.float64), np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ShapeError("q_sample", x0.shape, noise.shape)
    t = np.asarray(t, dtype=np.int64)
    if t.ndim > x0.ndim or x0.shape[:t.ndim] != t.shape:
        raise ShapeError("q_sample", x0.shape, t.shape, detail="时间步须与前导维度一致")
    _check_timesteps(t, schedule)
    t = _per_frame(t, x0.ndim)
    alpha_bar = schedule.alpha_bars[t]
    noised = np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * noise
    return np.where(t == 0, x0, noised)


# ================================================================ 三角噪声调度

@dataclass
class NoisePlan:
    """各段共享噪声水平的三角计划"""
    segments: int
    segment_len: int
    phase: int
    levels: np.ndarray     # (S,) 随段号不减
    kappa: int


def segment_kappa(T: int, segments: int) -> int:
    return math.ceil(T / segments)


def tns_levels(phase: int, segments: int, T: int, kappa: Optional[int] = None,
               segment_len: int = 0) -> NoisePlan:
    """
    τ_s = clamp(p - (S-1-s)·κ, 0, T)，κ 默认为 ceil(T/S)

    Raises:
        ScheduleError: p 超出 [0, T + (S-1)·κ]
    """
    if segments < 1 or T < 1:
        raise ScheduleError(f"段数与 T 必须 ≥ 1: S={segments}, T={T}")
    kappa = kappa or segment_kappa(T, segments)
    upper = T + (segments - 1) * kappa
    if not 0 <= phase <= upper:
        raise ScheduleError(f"相位 p={phase} 超出 [0, {upper}]")
    levels = np.clip(phase - (segments - 1 - np.arange(segments)) * kappa, 0, T).astype(np.int64)
    return NoisePlan(segments, segment_len, int(phase), levels, kappa)


def max_phase(segments: int, T: int, kappa: Optional[int] = None) -> int:
    return T + (segments - 1) * (kappa or segment_kappa(T, segments))


def segment_bounds(length: int, segment_len: int) -> List[slice]:
    """按段长切分序列，最后一段可能较短"""
    if segment_len < 1:
        raise ScheduleError(f"段长必须 ≥ 1: {segment_len}")
    return [slice(start, min(start + segment_len, length)) for start in range(0, length, segment_len)]


def frame_levels(plan: NoisePlan, length: int) -> np.ndarray:
    """把段级噪声水平展开为逐帧时间步"""
    bounds = segment_bounds(length, plan.segment_len)
    if len(bounds) != plan.segments:
        raise ShapeError("frame_levels", (length,), (plan.segments, plan.segment_len), detail="段数与序列长度不符")
    t = np.zeros(length, dtype=np.int64)
    for level, bound in zip(plan.levels, bounds):
        t[bound] = level
    return t


def tns_noise(x0: np.ndarray, plan: NoisePlan, rng: RngStream, schedule: Schedule) -> np.ndarray:
    """
    逐段以各自水平加噪，每段使用独立子流噪声；水平为 0 的段与 x0 逐位相同

    Args:
        x0: (L, N, 151)
    """
    x0 = np.asarray(x0, dtype=np.float64)
    t = frame_levels(plan, x0.shape[0])
    noise = np.concatenate([rng.substream(s).generator.standard_normal((bound.stop - bound.start,) + x0.shape[1:])
                            for s, bound in enumerate(segment_bounds(x0.shape[0], plan.segment_len))])
    return q_sample(x0, t, noise, schedule)


# ================================================================ 去噪器

@dataclass
class Conditioning:
    """一次去噪调用的条件：音乐特征、换位编码、对应的绝对帧号"""
    music: np.ndarray           # (L, d_m)
    swap: np.ndarray            # (2N,)
    frames: np.ndarray          # (L,)


Denoiser = Callable[[np.ndarray, np.ndarray, Conditioning], np.ndarray]


class OracleDenoiser:
    """总是返回真实 x0 的去噪器，用于采样器验收"""

    def __init__(self, x0: np.ndarray):
        self.x0 = np.asarray(x0, dtype=np.float64)

    def __call__(self, x_t: np.ndarray, t_frames: np.ndarray, cond: Conditioning) -> np.ndarray:
        return self.x0[np.asarray(cond.frames)]


class DecoderDenoiser:
    """把解码器包装为无梯度的 numpy 去噪器"""

    def __init__(self, decoder):
        self.decoder = decoder

    def __call__(self, x_t: np.ndarray, t_frames: np.ndarray, cond: Conditioning) -> np.ndarray:
        with no_grad():
            return self.decoder(x_t, t_frames, cond.music, cond.swap).numpy()


def _swap_sequence(swap: Union[SwapCode, np.ndarray]) -> np.ndarray:
    return np.asarray(swap.index_sequence if isinstance(swap, SwapCode) else swap, dtype=np.int64)


# ================================================================ 反向一步

def ddpm_step(denoiser: Denoiser, x_t: np.ndarray, t_frames: np.ndarray, cond: Conditioning,
              rng: Optional[RngStream], schedule: Schedule, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """
    逐帧 DDPM 反向一步

    t = 1 的帧直接取 x̂0（不加噪），t = 0 的帧原样保留作为历史上下文，
    其余帧取后验均值并加 β̃_t 方差的噪声。

    Raises:
        InvalidTimestepError: 所有帧 t 都为 0 或时间步越界
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    t_frames = np.asarray(t_frames, dtype=np.int64)
    if t_frames.shape != x_t.shape[:1]:
        raise ShapeError("ddpm_step", x_t.shape, t_frames.shape)
    _check_timesteps(t_frames, schedule)
    if not np.any(t_frames > 0):
        raise InvalidTimestepError("ddpm_step 的输入已全部为干净帧 (t = 0)")
    x0_hat = np.asarray(denoiser(x_t, t_frames, cond), dtype=np.float64)
    if x0_hat.shape != x_t.shape:
        raise ShapeError("ddpm_step", x_t.shape, x0_hat.shape, detail="去噪器输出形状不符")

    coef_x0, coef_xt, variance = schedule.posterior_coefficients(t_frames)
    coef_x0, coef_xt, variance = (_per_frame(v, x_t.ndim) for v in (coef_x0, coef_xt, variance))
    if noise is None:
        noise = rng.generator.standard_normal(x_t.shape)
    mean = coef_x0 * x0_hat + coef_xt * x_t
    t = _per_frame(t_frames, x_t.ndim)
    stepped = np.where(t > 1, mean + np.sqrt(variance) * noise, mean)
    stepped = np.where(t == 1, x0_hat, stepped)
    return np.where(t == 0, x_t, stepped)


# ================================================================ 采样

@dataclass
class SampleResult:
    """采样结果与耗时"""
    motion: GroupMotion
    seconds: float
    steps: int
    poses: Optional[np.ndarray] = None     # 未经接触截断的原始输出


def _music_features(music: Union[MusicTrack, np.ndarray]) -> np.ndarray:
    return music.features if isinstance(music, MusicTrack) else np.asarray(music, dtype=np.float64)


def sample_offline(denoiser: Denoiser, music: Union[MusicTrack, np.ndarray], swap: Union[SwapCode, np.ndarray],
                   length: int, schedule: Schedule, rng: RngStream, fps: float = 30.0) -> SampleResult:
    """
    整段统一时间步的祖先采样

    初始噪声使用子流 (2, 0)，第 t 步噪声使用子流 (3, t)。
    """
    features = _music_features(music)
    sequence = _swap_sequence(swap)
    if features.shape[0] < length:
        raise ShapeError("sample_offline", features.shape, (length,), detail="音乐帧数不足")
    dancers = sequence.shape[0] // 2
    cond = Conditioning(features[:length], sequence, np.arange(length))
    start = time.perf_counter()
    x = rng.substream(2, 0).generator.standard_normal((length, dancers, POSE_DIM))
    for t in range(schedule.T, 0, -1):
        x = ddpm_step(denoiser, x, np.full(length, t), cond, rng.substream(3, t), schedule)
    seconds = time.perf_counter() - start
    logger.info(f"离线采样完成: L={length}, N={dancers}, T={schedule.T}, 耗时 {seconds:.3f}s")
    return SampleResult(GroupMotion(x, fps), seconds, schedule.T, x)


def _init_segment_noise(rng: RngStream, index: int, frames: int, dancers: int) -> np.ndarray:
    return rng.substream(0, index).generator.standard_normal((frames, dancers, POSE_DIM))


def _step_segment_noise(rng: RngStream, index: int, level: int, frames: int, dancers: int) -> np.ndarray:
    return rng.substream(1, index, level).generator.standard_normal((frames, dancers, POSE_DIM))


def sample_tns(denoiser: Denoiser, music: Union[MusicTrack, np.ndarray], swap: Union[SwapCode, np.ndarray],
               length: int, schedule: Schedule, rng: RngStream, segment_len: int, window_segments: int,
               fps: float = 30.0) -> SampleResult:
    """
    三角调度的离线推演，与流式引擎使用相同的噪声子流

    以 κ = ceil(T / S_window) 为间隔依次引入各段；每个单位步中，已引入且未完成的段
    各下降一级。去噪器看到的是从第 0 帧到最后一个已引入段末尾的整段前缀。
    """
    features = _music_features(music)
    sequence = _swap_sequence(swap)
    if features.shape[0] < length:
        raise ShapeError("sample_tns", features.shape, (length,), detail="音乐帧数不足")
    dancers = sequence.shape[0] // 2
    bounds = segment_bounds(length, segment_len)
    kappa = segment_kappa(schedule.T, window_segments)
    levels = np.full(len(bounds), schedule.T, dtype=np.int64)
    x = np.concatenate([_init_segment_noise(rng, s, b.stop - b.start, dancers) for s, b in enumerate(bounds)])

    start = time.perf_counter()
    total_units = (len(bounds) - 1) * kappa + schedule.T
    for unit in range(total_units):
        entered = min(unit // kappa + 1, len(bounds))
        active = [s for s in range(entered) if levels[s] > 0]
        if not active:
            continue
        end = bounds[entered - 1].stop
        t_frames = np.zeros(end, dtype=np.int64)
        noise = np.zeros((end, dancers, POSE_DIM))
        for s in active:
            t_frames[bounds[s]] = levels[s]
            noise[bounds[s]] = _step_segment_noise(rng, s, int(levels[s]), bounds[s].stop - bounds[s].start, dancers)
        cond = Conditioning(features[:end], sequence, np.arange(end))
        x[:end] = ddpm_step(denoiser, x[:end], t_frames, cond, None, schedule, noise=noise)
        levels[active] -= 1
    seconds = time.perf_counter() - start
    logger.info(f"TNS 采样完成: L={length}, 段数={len(bounds)}, κ={kappa}, 耗时 {seconds:.3f}s")
    return SampleResult(GroupMotion(x, fps), seconds, total_units, x)


# ================================================================ 流式引擎

@dataclass
class ActiveSegment:
    index: int
    start_frame: int
    x: np.ndarray
    music: np.ndarray
    level: int
    admitted_at: float


@dataclass
class EmittedSegment:
    """已完成去噪的段"""
    index: int
    start_frame: int
    poses: np.ndarray         # (l, N, 151)
    latency: float            # 从引入到发射的耗时（秒）
    tick: int


@dataclass
class StreamStats:
    ticks: int = 0
    units: int = 0
    emitted: int = 0
    latencies: List[float] = field(default_factory=list)


class StreamingEngine:
    """
    单一所有者的分段流式状态机

    每个 tick 引入至多一个新段（最高噪声 T），然后执行 κ 个单位步；
    最早的段到达 0 级即发射，发射过的段只作为只读历史上下文。
    """

    def __init__(self, denoiser: Denoiser, schedule: Schedule, swap: Union[SwapCode, np.ndarray],
                 rng: RngStream, window_segments: int = 4, context_segments: int = 1):
        if window_segments < 1:
            raise StreamError(f"窗口段数必须 ≥ 1: {window_segments}")
        self.denoiser = denoiser
        self.schedule = schedule
        self.swap = _swap_sequence(swap)
        self.dancers = self.swap.shape[0] // 2
        self.rng = rng
        self.kappa = segment_kappa(schedule.T, window_segments)
        self.window: Deque[ActiveSegment] = deque()
        self.context: Deque[EmittedSegment] = deque(maxlen=max(context_segments, 0) or None)
        self.context_segments = context_segments
        self.history_music: Deque[np.ndarray] = deque(maxlen=max(context_segments, 0) or None)
        self.next_index = 0
        self.next_frame = 0
        self.unit = 0
        self.stats = StreamStats()
        self.music_dim: Optional[int] = None

    @property
    def idle(self) -> bool:
        return not self.window

    def admit(self, segment: Union[MusicTrack, np.ndarray]):
        """引入一个新音乐段，动作以 T 级纯噪声开始"""
        features = _music_features(segment)
        if self.music_dim is None:
            self.music_dim = features.shape[1]
        elif features.shape[1] != self.music_dim:
            raise StreamError(f"音乐段维度变化: {self.music_dim} -> {features.shape[1]}")
        frames = features.shape[0]
        x = _init_segment_noise(self.rng, self.next_index, frames, self.dancers)
        self.window.append(ActiveSegment(self.next_index, self.next_frame, x, features, self.schedule.T,
                                         time.perf_counter()))
        logger.debug(f"引入第 {self.next_index} 段: {frames} 帧")
        self.next_index += 1
        self.next_frame += frames

    def _unit_step(self):
        context = list(self.context) if self.context_segments > 0 else []
        history = list(self.history_music) if self.context_segments > 0 else []
        pieces = [c.poses for c in context] + [s.x for s in self.window]
        music = np.concatenate(history + [s.music for s in self.window])
        frames = np.concatenate([np.arange(c.start_frame, c.start_frame + c.poses.shape[0]) for c in context]
                                + [np.arange(s.start_frame, s.start_frame + s.x.shape[0]) for s in self.window])
        t_frames = np.concatenate([np.zeros(c.poses.shape[0], dtype=np.int64) for c in context]
                                  + [np.full(s.x.shape[0], s.level, dtype=np.int64) for s in self.window])
        noise = np.concatenate([np.zeros_like(c.poses) for c in context]
                               + [_step_segment_noise(self.rng, s.index, s.level, s.x.shape[0], self.dancers)
                                  for s in self.window])
        stepped = ddpm_step(self.denoiser, np.concatenate(pieces), t_frames,
                            Conditioning(music, self.swap, frames), None, self.schedule, noise=noise)
        offset = sum(c.poses.shape[0] for c in context)
        for segment in self.window:
            segment.x = stepped[offset:offset + segment.x.shape[0]]
            segment.level -= 1
            offset += segment.x.shape[0]
        self.unit += 1
        self.stats.units += 1

    def tick(self) -> List[EmittedSegment]:
        """执行 κ 个单位步，返回本 tick 完成的段（按段号递增）"""
        emitted: List[EmittedSegment] = []
        for _ in range(self.kappa):
            if not self.window:
                break
            self._unit_step()
            while self.window and self.window[0].level == 0:
                emitted.append(self._emit(self.window.popleft()))
        self.stats.ticks += 1
        return emitted

    def _emit(self, segment: ActiveSegment) -> EmittedSegment:
        latency = time.perf_counter() - segment.admitted_at
        result = EmittedSegment(segment.index, segment.start_frame, segment.x, latency, self.stats.ticks)
        if self.context_segments > 0:
            self.context.append(result)
            self.history_music.append(segment.music)
        self.stats.emitted += 1
        self.stats.latencies.append(latency)
        logger.info(f"发射第 {segment.index} 段: {segment.x.shape[0]} 帧, 延迟 {latency * 1000:.1f} ms")
        return result


def stream_generate(denoiser: Denoiser, source: Iterable[Union[MusicTrack, np.ndarray]], schedule: Schedule,
                    window_segments: int, swap: Union[SwapCode, np.ndarray], rng: RngStream,
                    context_segments: int = 1, engine: Optional[StreamingEngine] = None) -> Iterator[EmittedSegment]:
    """
    逐段生成：每个 tick 从音乐源读取一段并推进引擎；音乐源耗尽后进入 flush 模式，
    不再引入新段，直到窗口内所有段完成

    Yields:
        EmittedSegment，按段号严格递增
    """
    engine = engine or StreamingEngine(denoiser, schedule, swap, rng, window_segments, context_segments)
    iterator = iter(source)
    exhausted = False
    while True:
        if not exhausted:
            segment = next(iterator, None)
            if segment is None:
                exhausted = True
                logger.info(f"音乐源结束，进入 flush 模式（窗口内剩余 {len(engine.window)} 段）")
            else:
                engine.admit(segment)
        if engine.idle:
            if exhausted:
                return
            continue
        for emitted in engine.tick():
            yield emitted


def assemble_stream(segments: Iterable[EmittedSegment], fps: float = 30.0) -> GroupMotion:
    """按顺序拼接发射段为完整动作"""
    ordered = list(segments)
    for expected, segment in enumerate(ordered):
        if segment.index != expected:
            raise StreamError(f"发射顺序错误: 期望第 {expected} 段，得到第 {segment.index} 段")
    return GroupMotion(np.concatenate([s.poses for s in ordered]), fps)


def schedule_summary(schedule: Schedule) -> Dict[str, float]:
    return {
        'T': schedule.T,
        'kind': schedule.kind,
        'beta_1': float(schedule.betas[1]),
        'beta_T': float(schedule.betas[-1]),
        'alpha_bar_T': float(schedule.alpha_bars[-1]),
    }
