"""
动作表示模块
姿态打包、6D 旋转、正向运动学、舞者重排与合成数据生成

世界坐标系 z 轴向上，(x, y) 为地面平面。
单帧单人姿态为 151 维向量：[24×6 旋转 | 4 触地 | 3 根位置]。
"""

import os
import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import numerics as ops
from .config import DatasetConfig
from .exceptions import ConfigError, DegenerateRotationError, NumericError, ShapeError
from .numerics import RngStream, Tensor

logger = logging.getLogger(__name__)

NUM_JOINTS = 24
ROT_DIM = NUM_JOINTS * 6
POSE_DIM = 151
ROT_SLICE = slice(0, ROT_DIM)
CONTACT_SLICE = slice(144, 148)
ROOT_SLICE = slice(148, 151)

# 触地通道顺序：左踝(脚跟)、右踝、左脚尖、右脚尖
FOOT_JOINTS = (7, 8, 10, 11)
DEGENERATE_NORM = 1e-8
DEFAULT_FPS = 30.0

SKELETON_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'data', 'skeleton_smpl24.json')


@dataclass(frozen=True)
class Skeleton:
    """固定偏移的 24 关节运动学树"""
    parents: Tuple[int, ...]
    offsets: np.ndarray
    names: Tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.parents) != NUM_JOINTS or self.offsets.shape != (NUM_JOINTS, 3):
            raise ConfigError(f"骨架必须有 {NUM_JOINTS} 个关节", key='parents')
        if self.parents[0] != -1:
            raise ConfigError("关节 0 必须是根节点", key='parents')
        for child, parent in enumerate(self.parents[1:], start=1):
            if not 0 <= parent < child:
                raise ConfigError(f"关节 {child} 的父节点 {parent} 非法（必须小于子节点）", key='parents')


@lru_cache(maxsize=4)
def load_skeleton(path: str = SKELETON_PATH) -> Skeleton:
    """加载骨架数据文件"""
    with open(path, 'r', encoding='utf-8') as f:
        document = json.load(f)
    offsets = np.asarray(document['offsets'], dtype=np.float64)
    offsets.setflags(write=False)
    return Skeleton(tuple(document['parents']), offsets, tuple(document.get('joints', ())))


@dataclass
class Pose:
    """单人单帧姿态"""
    rot6d: np.ndarray     # (24, 6)
    contacts: np.ndarray  # (4,)
    root: np.ndarray      # (3,)

    def __post_init__(self):
        self.rot6d = np.asarray(self.rot6d, dtype=np.float64).reshape(NUM_JOINTS, 6)
        self.contacts = np.clip(np.asarray(self.contacts, dtype=np.float64).reshape(4), 0.0, 1.0)
        self.root = np.asarray(self.root, dtype=np.float64).reshape(3)


def pack_pose(pose: Pose) -> np.ndarray:
    return np.concatenate([pose.rot6d.reshape(-1), pose.contacts, pose.root])


def unpack_pose(vector: np.ndarray) -> Pose:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (POSE_DIM,):
        raise ShapeError("unpack_pose", vector.shape, (POSE_DIM,))
    return Pose(vector[ROT_SLICE].reshape(NUM_JOINTS, 6), vector[CONTACT_SLICE], vector[ROOT_SLICE])


@dataclass
class GroupMotion:
    """群舞动作 L × N × 151"""
    poses: np.ndarray
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        poses = np.array(self.poses, dtype=np.float64)
        if poses.ndim != 3 or poses.shape[-1] != POSE_DIM:
            raise ShapeError("GroupMotion", poses.shape, (-1, -1, POSE_DIM))
        if poses.shape[0] < 2 or poses.shape[1] < 1:
            raise ShapeError("GroupMotion", poses.shape, detail="要求 L ≥ 2 且 N ≥ 1")
        if not np.isfinite(poses).all():
            raise NumericError("群舞动作包含非有限值")
        poses[..., CONTACT_SLICE] = np.clip(poses[..., CONTACT_SLICE], 0.0, 1.0)
        self.poses = poses
        self.fps = float(self.fps)

    @property
    def frames(self) -> int:
        return self.poses.shape[0]

    @property
    def dancers(self) -> int:
        return self.poses.shape[1]

    @property
    def roots(self) -> np.ndarray:
        return self.poses[..., ROOT_SLICE]

    def roots_xy(self) -> np.ndarray:
        return self.poses[..., 148:150]

    def dancer(self, index: int) -> np.ndarray:
        """单个舞者的 L × 151 序列"""
        return self.poses[:, index]


@dataclass
class MusicTrack:
    """逐帧音乐特征 L × d_m"""
    features: np.ndarray
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
            raise ShapeError("MusicTrack", features.shape, detail="要求 L × d_m")
        if not np.isfinite(features).all():
            raise NumericError("音乐特征包含非有限值")
        self.features = features
        self.fps = float(self.fps)

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


# ================================================================ 旋转

def _check_degenerate(a1: np.ndarray, a2: np.ndarray):
    n1 = np.linalg.norm(a1, axis=-1)
    if np.any(n1 <= DEGENERATE_NORM):
        raise DegenerateRotationError('a1', float(np.min(n1)))
    b1 = a1 / n1[..., None]
    u = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u, axis=-1)
    if np.any(n2 <= DEGENERATE_NORM):
        raise DegenerateRotationError('a2', float(np.min(n2)))
    return b1, u / n2[..., None]


def rot6d_to_matrix(r: np.ndarray) -> np.ndarray:
    """
    6D 表示 (a1, a2) 经 Gram-Schmidt 转为旋转矩阵，列为 [b1 b2 b3]

    Args:
        r: (..., 6)

    Returns:
        np.ndarray: (..., 3, 3)
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise ShapeError("rot6d_to_matrix", r.shape, (6,))
    b1, b2 = _check_degenerate(r[..., 0:3], r[..., 3:6])
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(matrix: np.ndarray) -> np.ndarray:
    """取旋转矩阵前两列"""
    matrix = np.asarray(matrix, dtype=np.float64)
    return np.concatenate([matrix[..., :, 0], matrix[..., :, 1]], axis=-1)


def axis_angle_to_matrix(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rodrigues 公式；axis 为单位向量 (3,)，angle 任意形状"""
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    k = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    s, c = np.sin(angle)[..., None, None], np.cos(angle)[..., None, None]
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def identity_rot6d() -> np.ndarray:
    return np.tile(np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]), NUM_JOINTS)


def rot6d_to_matrix_tensor(r: Tensor) -> Tensor:
    """可微版本：(..., 6) -> (..., 3, 3)"""
    _check_degenerate(r.data[..., 0:3], r.data[..., 3:6])
    a1, a2 = r[..., 0:3], r[..., 3:6]
    b1 = a1 / ops.sqrt(ops.sum(a1 * a1, axis=-1, keepdims=True))
    u = a2 - ops.sum(b1 * a2, axis=-1, keepdims=True) * b1
    b2 = u / ops.sqrt(ops.sum(u * u, axis=-1, keepdims=True))
    x1, y1, z1 = b1[..., 0:1], b1[..., 1:2], b1[..., 2:3]
    x2, y2, z2 = b2[..., 0:1], b2[..., 1:2], b2[..., 2:3]
    b3 = ops.concat([y1 * z2 - z1 * y2, z1 * x2 - x1 * z2, x1 * y2 - y1 * x2], axis=-1)
    return ops.stack([b1, b2, b3], axis=-1)


# ================================================================ 正向运动学

def joint_positions(rot6d: np.ndarray, root: np.ndarray, skeleton: Optional[Skeleton] = None) -> np.ndarray:
    """
    批量正向运动学

    Args:
        rot6d: (..., 24, 6)
        root: (..., 3)

    Returns:
        np.ndarray: (..., 24, 3) 关节世界坐标
    """
    skeleton = skeleton or load_skeleton()
    rotations = rot6d_to_matrix(rot6d)
    global_rot: List[np.ndarray] = [rotations[..., 0, :, :]]
    positions: List[np.ndarray] = [np.asarray(root, dtype=np.float64)]
    for joint in range(1, NUM_JOINTS):
        parent = skeleton.parents[joint]
        global_rot.append(global_rot[parent] @ rotations[..., joint, :, :])
        positions.append(positions[parent] + np.einsum('...ab,b->...a', global_rot[parent], skeleton.offsets[joint]))
    return np.stack(positions, axis=-2)


def forward_kinematics(pose, skeleton: Optional[Skeleton] = None) -> np.ndarray:
    """单帧正向运动学；pose 可以是 Pose 或 151 维向量，返回 24 × 3"""
    if not isinstance(pose, Pose):
        pose = unpack_pose(pose)
    return joint_positions(pose.rot6d, pose.root, skeleton)


def motion_joint_positions(poses: np.ndarray, skeleton: Optional[Skeleton] = None) -> np.ndarray:
    """(..., 151) 姿态数组 -> (..., 24, 3)"""
    poses = np.asarray(poses, dtype=np.float64)
    lead = poses.shape[:-1]
    return joint_positions(poses[..., ROT_SLICE].reshape(lead + (NUM_JOINTS, 6)), poses[..., ROOT_SLICE], skeleton)


def joint_positions_tensor(x: Tensor, skeleton: Optional[Skeleton] = None) -> Tensor:
    """可微正向运动学：(..., 151) -> (..., 24, 3)，供损失函数使用"""
    skeleton = skeleton or load_skeleton()
    lead = x.shape[:-1]
    rotations = rot6d_to_matrix_tensor(ops.reshape(x[..., ROT_SLICE], lead + (NUM_JOINTS, 6)))
    global_rot: List[Tensor] = [rotations[..., 0, :, :]]
    positions: List[Tensor] = [x[..., ROOT_SLICE]]
    for joint in range(1, NUM_JOINTS):
        parent = skeleton.parents[joint]
        global_rot.append(ops.matmul(global_rot[parent], rotations[..., joint, :, :]))
        offset = Tensor(skeleton.offsets[joint].reshape(3, 1))
        step = ops.reshape(ops.matmul(global_rot[parent], offset), lead + (3,))
        positions.append(positions[parent] + step)
    return ops.stack(positions, axis=-2)


# ================================================================ 重排

def rearrange_dancers(motion: GroupMotion) -> Tuple[GroupMotion, np.ndarray]:
    """
    按首帧根位置 x 升序重排舞者，x 相同看 y，再看原索引

    Returns:
        (重排后的动作, permutation)，permutation[i] 为新位置 i 的原舞者编号
    """
    first = motion.roots_xy()[0]
    permutation = np.lexsort((np.arange(motion.dancers), first[:, 1], first[:, 0]))
    return GroupMotion(motion.poses[:, permutation], motion.fps), permutation


def invert_permutation(permutation: np.ndarray) -> np.ndarray:
    inverse = np.empty_like(permutation)
    inverse[permutation] = np.arange(len(permutation))
    return inverse


# ================================================================ 合成数据

# 随节拍摆动的关节：关节 -> (旋转轴, 基础幅度)
BEAT_JOINTS: Dict[int, Tuple[Tuple[float, float, float], float]] = {
    1: ((1.0, 0.0, 0.0), 0.45),
    2: ((1.0, 0.0, 0.0), -0.45),
    3: ((0.0, 1.0, 0.0), 0.15),
    4: ((1.0, 0.0, 0.0), -0.55),
    5: ((1.0, 0.0, 0.0), 0.55),
    6: ((0.0, 0.0, 1.0), 0.20),
    16: ((0.0, 1.0, 0.0), 0.60),
    17: ((0.0, 1.0, 0.0), -0.60),
    18: ((0.0, 0.0, 1.0), 0.70),
    19: ((0.0, 0.0, 1.0), -0.70),
}
CONTACT_SPEED = 1.5    # m/s，超过该水平速度时触地概率降为 0
MIN_CLEARANCE = 0.3    # m，舞者之间的最小距离
ROOT_HEIGHT = 0.93


@dataclass
class SyntheticSequence:
    """合成序列的生成参数，用于测试与复现"""
    motion: GroupMotion
    music: MusicTrack
    beat_period: int
    beat_offset: int

    @property
    def beat_frames(self) -> np.ndarray:
        frames = np.arange(self.motion.frames)
        return frames[(frames - self.beat_offset) % self.beat_period == 0]


def beat_music(frames: int, dim: int, period: int, offset: int) -> np.ndarray:
    """通道 0 为节拍脉冲，其余为与节拍同相位的正弦族"""
    t = np.arange(frames, dtype=np.float64) - offset
    features = np.zeros((frames, dim))
    features[:, 0] = (np.mod(t, period) == 0).astype(np.float64)
    for k in range(1, dim):
        harmonic = 0.5 * k
        features[:, k] = 0.5 * np.cos(2.0 * np.pi * harmonic * t / period)
    return features


def _dancer_path(kind: str, center: np.ndarray, radius: float, omega: float,
                 phase: float, t: np.ndarray) -> np.ndarray:
    angle = omega * t + phase
    if kind == 'circle':
        offset = np.stack([np.cos(angle), np.sin(angle)], axis=-1)
    else:
        # Gerono 双纽线，始终位于半径 radius 的圆内
        offset = np.stack([np.cos(angle), np.sin(angle) * np.cos(angle)], axis=-1)
    return center + radius * offset


def synth_sequence(config: DatasetConfig, rng: RngStream) -> SyntheticSequence:
    """生成单条合成群舞序列"""
    generator = rng.generator
    n, frames = config.dancers, config.frames
    t = np.arange(frames, dtype=np.float64)
    period = int(generator.choice(config.beat_periods))
    offset = int(generator.integers(0, period))
    beat_phase = np.pi * (t - offset) / period

    shift = generator.uniform(-0.5, 0.5, size=2)
    poses = np.zeros((frames, n, POSE_DIM))
    for dancer in range(n):
        center = shift + np.array([(dancer - (n - 1) / 2.0) * config.spacing, generator.uniform(-0.2, 0.2)])
        kind = 'circle' if generator.random() < 0.5 else 'lemniscate'
        loop_beats = int(generator.integers(4, 9))
        omega = float(generator.choice([-1.0, 1.0])) * 2.0 * np.pi / (period * loop_beats)
        path = _dancer_path(kind, center, config.radius, omega, generator.uniform(0, 2 * np.pi), t)

        rotations = np.tile(np.eye(3), (frames, NUM_JOINTS, 1, 1))
        rotations[:, 0] = axis_angle_to_matrix(np.array([0.0, 0.0, 1.0]), np.full(frames, generator.uniform(-np.pi, np.pi)))
        gain = generator.uniform(0.6, 1.0)
        for joint, (axis, amplitude) in BEAT_JOINTS.items():
            rotations[:, joint] = axis_angle_to_matrix(np.array(axis), gain * amplitude * np.sin(beat_phase))

        poses[:, dancer, ROT_SLICE] = matrix_to_rot6d(rotations).reshape(frames, ROT_DIM)
        poses[:, dancer, 148:150] = path
        poses[:, dancer, 150] = ROOT_HEIGHT + 0.02 * np.abs(np.cos(beat_phase))

    joints = motion_joint_positions(poses)
    feet = joints[:, :, FOOT_JOINTS, :2]
    speed = np.linalg.norm(np.diff(feet, axis=0), axis=-1) * config.fps
    speed = np.concatenate([speed[:1], speed], axis=0)
    poses[..., CONTACT_SLICE] = np.clip(1.0 - speed / CONTACT_SPEED, 0.0, 1.0)

    music = beat_music(frames, config.music_dim, period, offset)
    return SyntheticSequence(GroupMotion(poses, config.fps), MusicTrack(music, config.fps), period, offset)


def synth_dataset(config: DatasetConfig, seed: int, with_metadata: bool = False) -> List:
    """
    生成确定性的合成群舞数据集

    舞者沿互不相交的参数路径（圆或双纽线）运动，关节角按节拍正弦摆动，
    角速度峰值与节拍脉冲同帧。

    Args:
        config: 数据集配置
        seed: 随机种子
        with_metadata: 为 True 时返回 SyntheticSequence 列表

    Returns:
        List: (GroupMotion, MusicTrack) 列表，动作已按首帧位置重排
    """
    if not 2 <= config.dancers <= 5:
        raise ConfigError(f"舞者人数必须在 [2, 5]，实际为 {config.dancers}", key='dataset.dancers')
    if config.fps != DEFAULT_FPS:
        raise ConfigError(f"合成数据帧率固定为 30，实际为 {config.fps}", key='dataset.fps')
    if config.frames < 2:
        raise ConfigError("帧数必须 ≥ 2", key='dataset.frames')
    if config.spacing - 2.0 * config.radius <= MIN_CLEARANCE:
        raise ConfigError(
            f"起始位置重叠: 间距 {config.spacing} 减去两倍半径 {config.radius} 不大于 {MIN_CLEARANCE} m",
            key='dataset.spacing')

    root = RngStream(seed)
    sequences = []
    for index in range(config.count):
        item = synth_sequence(config, root.substream(index))
        motion, _ = rearrange_dancers(item.motion)
        item = SyntheticSequence(motion, item.music, item.beat_period, item.beat_offset)
        sequences.append(item if with_metadata else (item.motion, item.music))
    logger.info(f"合成数据集完成: {config.count} 条, N={config.dancers}, L={config.frames}, seed={seed}")
    return sequences


def angular_speed(poses: np.ndarray) -> np.ndarray:
    """
    逐帧关节角速度之和（中心差分，首尾帧为 0）

    Args:
        poses: (L, 151) 单人序列

    Returns:
        np.ndarray: (L,)
    """
    rotations = rot6d_to_matrix(poses[:, ROT_SLICE].reshape(-1, NUM_JOINTS, 6))
    relative = np.einsum('ljba,ljbc->ljac', rotations[:-2], rotations[2:])
    cos_angle = np.clip((np.trace(relative, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    speed = np.zeros(poses.shape[0])
    speed[1:-1] = np.arccos(cos_angle).sum(axis=-1) / 2.0
    return speed
