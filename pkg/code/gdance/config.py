"""
配置文件
统一的全局配置管理：进程级 CONFIG 字典 + 各模块 dataclass 配置 + JSON 运行配置加载
"""

import os
import json
import math
import logging
from dataclasses import dataclass, field, fields, asdict, is_dataclass
from typing import Dict, Any, Optional, List, Tuple

from dotenv import load_dotenv

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

# 五项损失的默认权重
DEFAULT_LOSS_WEIGHTS = {
    'simple': 0.636,
    'vel': 2.964,
    'fk': 0.646,
    'contact': 10.942,
    'dist': 100.0,
}

# 按舞者人数的默认批大小
BATCH_SIZE_BY_DANCERS = {2: 64, 3: 32, 4: 24, 5: 8}


@dataclass
class DecoderConfig:
    """解码器 D(x_t, t, M, S) 的结构配置"""
    d: int = 64                        # 隐层宽度
    temporal_layers: int = 4
    gcn_layers: int = 2
    ssm_state_dim: int = 16
    window: int = 30                   # AAM 半径 w（帧）
    aam_mode: str = 'symmetric'        # symmetric | causal
    self_window: Optional[int] = None  # DiffAttn 带宽 s，None 为全注意力
    lambda_init: float = 0.5
    prune_tau: float = 0.0
    selective_ssm: bool = True
    ssm_mode: str = 'scan'             # scan | kernel
    music_dim: int = 35
    graph_k: Optional[float] = None    # 整数为条数，小数为比例，None 为 ceil(0.5(N-1))
    graph_eps: float = 1e-6
    graph_d_min: float = 0.05
    graph_mask_mode: str = 'clamp'     # clamp | drop
    use_smb: bool = True
    use_aam: bool = True
    loss_weights: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LOSS_WEIGHTS))

    @property
    def causal(self) -> bool:
        return self.aam_mode == 'causal'


@dataclass
class ScheduleConfig:
    """扩散调度配置"""
    T: int = 1000
    kind: str = 'linear'               # linear | cosine
    segment_len: int = 30


@dataclass
class DatasetConfig:
    """合成数据集配置"""
    dancers: int = 3
    frames: int = 60
    fps: float = 30.0
    count: int = 8
    music_dim: int = 35
    spacing: float = 2.0               # 相邻舞者中心间距（米）
    radius: float = 0.5                # 路径半径（米）
    beat_periods: List[int] = field(default_factory=lambda: [10, 12, 15, 20])


@dataclass
class StreamConfig:
    """流式生成配置"""
    window_segments: int = 4           # S_window
    context_segments: int = 1          # 作为历史上下文保留的已发射段数


@dataclass
class TrainConfig:
    """训练配置"""
    steps: int = 2000
    lr: float = 5e-5
    batch_size: Optional[int] = None   # None 时按舞者人数查表
    log_every: int = 10
    use_tns: bool = True
    betas: Tuple[float, float] = (0.9, 0.999)


@dataclass
class BenchConfig:
    """效率基准配置"""
    axis: str = 'L'                    # L | N
    sizes: List[int] = field(default_factory=lambda: [120, 240, 480, 960])
    dancers: int = 3
    frames: int = 120
    repeats: int = 5
    warmup: int = 1
    plot: bool = False


@dataclass
class RunConfig:
    """一次命令运行的完整配置"""
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    seed: Optional[int] = None
    mode: str = 'offline'              # offline | streaming
    paths: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# 全局配置字典
CONFIG = {
    # 日志配置
    'LOG_LEVEL': 'INFO',
    'LOG_FORMAT': '%(asctime)s - %(name)s - %(levelname)s - %(message)s',

    # 并行配置
    'GDANCE_THREADS': 1,

    # 文件格式
    'MOTION_MAGIC': b'GDM1',
    'MUSIC_MAGIC': b'GDMU',
    'CHECKPOINT_MAGIC': b'GDCK',

    # 基准计时的最小可信时长（秒）
    'TIMER_RESOLUTION': 1e-4,
}

# 环境特定配置覆盖
ENVIRONMENT_CONFIGS = {
    'development': {
        'LOG_LEVEL': 'DEBUG'
    },
    'production': {
        'LOG_LEVEL': 'WARNING'
    },
    'testing': {
        'LOG_LEVEL': 'DEBUG',
        'GDANCE_THREADS': 1
    }
}

_ALLOWED_CHOICES = {
    'decoder.aam_mode': ('symmetric', 'causal'),
    'decoder.ssm_mode': ('scan', 'kernel'),
    'decoder.graph_mask_mode': ('clamp', 'drop'),
    'schedule.kind': ('linear', 'cosine'),
    'bench.axis': ('L', 'N'),
    'mode': ('offline', 'streaming'),
}


def get_config(key: str = None, default=None):
    """获取配置值"""
    if key is None:
        return CONFIG
    return CONFIG.get(key, default)


def set_config(key: str, value):
    """设置配置值"""
    CONFIG[key] = value


def update_config(updates: Dict[str, Any]):
    """批量更新配置"""
    CONFIG.update(updates)


def validate_config() -> Dict[str, Any]:
    """验证全局配置"""
    issues = []

    if not isinstance(CONFIG['GDANCE_THREADS'], int) or CONFIG['GDANCE_THREADS'] < 1:
        issues.append('GDANCE_THREADS 必须为正整数')

    if CONFIG['LOG_LEVEL'] not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
        issues.append(f"LOG_LEVEL 非法: {CONFIG['LOG_LEVEL']}")

    return {
        'valid': len(issues) == 0,
        'issues': issues
    }


def init_environment_config():
    """根据环境变量（含 .env 文件）初始化配置"""
    load_dotenv()
    env = os.getenv('ENVIRONMENT', 'development').lower()
    env_config = ENVIRONMENT_CONFIGS.get(env, {})
    CONFIG.update(env_config)

    threads = os.getenv('GDANCE_THREADS')
    if threads:
        try:
            CONFIG['GDANCE_THREADS'] = max(1, int(threads))
        except ValueError:
            logger.warning(f"GDANCE_THREADS 不是整数，忽略: {threads}")


# ---------------------------------------------------------------- 运行配置

def _apply_section(target: Any, values: Dict[str, Any], prefix: str):
    known = {f.name: f for f in fields(target)}
    for key, value in values.items():
        dotted = f"{prefix}{key}"
        if key not in known:
            raise ConfigError("未知配置项", key=dotted)
        current = getattr(target, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError("配置段必须是 JSON 对象", key=dotted)
            _apply_section(current, value, f"{dotted}.")
        elif isinstance(current, dict) and isinstance(value, dict):
            setattr(target, key, {**current, **value})
        elif isinstance(current, tuple) and isinstance(value, list):
            setattr(target, key, tuple(value))
        else:
            setattr(target, key, value)


def apply_overrides(run_config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """
    以点号路径覆盖配置项（命令行参数使用）

    Args:
        run_config: 待修改的配置
        overrides: 例如 {'dataset.dancers': 3, 'seed': 7}，值为 None 的项忽略
    """
    for dotted, value in overrides.items():
        if value is None:
            continue
        target: Any = run_config
        parts = dotted.split('.')
        for part in parts[:-1]:
            if not hasattr(target, part):
                raise ConfigError("未知配置项", key=dotted)
            target = getattr(target, part)
        if not hasattr(target, parts[-1]):
            raise ConfigError("未知配置项", key=dotted)
        setattr(target, parts[-1], value)
    return run_config


def validate_run_config(run_config: RunConfig) -> RunConfig:
    """校验取值范围，失败时抛出 ConfigError 并指明 key"""
    dec, sch, data = run_config.decoder, run_config.schedule, run_config.dataset
    stream, train, bench = run_config.stream, run_config.train, run_config.bench

    def require(condition: bool, key: str, message: str):
        if not condition:
            raise ConfigError(message, key=key)

    for key, choices in _ALLOWED_CHOICES.items():
        section, _, name = key.rpartition('.')
        value = getattr(getattr(run_config, section) if section else run_config, name)
        require(value in choices, key, f"取值必须属于 {list(choices)}，实际为 {value!r}")

    for name in ('d', 'temporal_layers', 'gcn_layers', 'ssm_state_dim', 'music_dim'):
        require(isinstance(getattr(dec, name), int) and getattr(dec, name) >= 1,
                f"decoder.{name}", "必须为正整数")
    require(dec.d % 2 == 0, 'decoder.d', "时间步正弦嵌入要求宽度为偶数")
    require(dec.window >= 0, 'decoder.window', "AAM 窗口不能为负")
    require(dec.self_window is None or dec.self_window >= 0, 'decoder.self_window', "自注意力带宽不能为负")
    require(math.isfinite(dec.lambda_init), 'decoder.lambda_init', "λ 初值必须有限")
    require(dec.prune_tau >= 0, 'decoder.prune_tau', "剪枝阈值不能为负")
    require(dec.graph_eps > 0, 'decoder.graph_eps', "eps 必须为正")
    require(dec.graph_d_min >= 0, 'decoder.graph_d_min', "d_min 不能为负")
    require(dec.graph_k is None or dec.graph_k > 0, 'decoder.graph_k', "k 必须为正")
    unknown_weights = set(dec.loss_weights) - set(DEFAULT_LOSS_WEIGHTS)
    require(not unknown_weights, 'decoder.loss_weights', f"未知损失项 {sorted(unknown_weights)}")
    require(all(v >= 0 for v in dec.loss_weights.values()), 'decoder.loss_weights', "损失权重不能为负")

    require(sch.T >= 1, 'schedule.T', "T 必须 ≥ 1")
    require(sch.segment_len >= 2, 'schedule.segment_len', "段长必须 ≥ 2（单帧段无法写成动作文件）")

    require(2 <= data.dancers <= 5, 'dataset.dancers', "舞者人数必须在 [2, 5]")
    require(data.frames >= 2, 'dataset.frames', "帧数必须 ≥ 2")
    require(data.fps == 30, 'dataset.fps', "帧率固定为 30")
    require(data.count >= 1, 'dataset.count', "样本数必须 ≥ 1")
    require(data.music_dim >= 2, 'dataset.music_dim', "音乐特征维度必须 ≥ 2")
    require(all(p >= 2 for p in data.beat_periods), 'dataset.beat_periods', "节拍周期必须 ≥ 2 帧")

    require(stream.window_segments >= 1, 'stream.window_segments', "窗口段数必须 ≥ 1")
    require(stream.context_segments >= 0, 'stream.context_segments', "上下文段数不能为负")

    require(train.steps >= 0, 'train.steps', "步数不能为负")
    require(train.lr > 0, 'train.lr', "学习率必须为正")
    require(train.batch_size is None or train.batch_size >= 1, 'train.batch_size', "批大小必须 ≥ 1")
    require(train.log_every >= 1, 'train.log_every', "日志间隔必须 ≥ 1")

    require(len(bench.sizes) >= 4, 'bench.sizes', "缩放拟合至少需要 4 个规模点")
    require(all(a < b for a, b in zip(bench.sizes, bench.sizes[1:])), 'bench.sizes', "规模必须严格递增")
    require(bench.repeats >= 5, 'bench.repeats', "重复次数必须 ≥ 5")
    require(bench.warmup >= 0, 'bench.warmup', "预热次数不能为负")

    require(run_config.seed is None or (isinstance(run_config.seed, int) and 0 <= run_config.seed < 2 ** 64),
            'seed', "种子必须是 u64 整数")
    return run_config


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    读取单一 JSON 运行配置，拒绝未知 key，应用覆盖项后校验

    Args:
        path: JSON 文件路径，None 时使用全部默认值
        overrides: 点号路径覆盖（命令行参数）

    Returns:
        RunConfig: 校验通过的配置
    """
    run_config = RunConfig()
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                document = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"配置文件不存在: {path}", key='--config') from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"配置文件不是合法 JSON: {path} ({e})", key='--config') from None
        if not isinstance(document, dict):
            raise ConfigError("配置文件顶层必须是 JSON 对象", key='--config')
        _apply_section(run_config, document, '')
        logger.debug(f"已加载运行配置: {path}")
    apply_overrides(run_config, overrides or {})
    return validate_run_config(run_config)


def resolve_batch_size(train: TrainConfig, dancers: int, dataset_size: int) -> int:
    """未显式给出批大小时按舞者人数查表，并截断到数据集大小"""
    size = train.batch_size or BATCH_SIZE_BY_DANCERS.get(dancers, 8)
    return max(1, min(size, dataset_size))


# 初始化环境配置
init_environment_config()
