"""
评测指标模块
群体指标 GMR / GMC / TIF 与单人指标 FID / Div / PFC，以及目录级批量评测

特征提取器为手工运动学特征，数值与使用学习特征的公开结果不可直接比较。
"""

import os
import glob
import time
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.spatial.distance import pdist

from .config import get_config
from .exceptions import MotionIOError, NumericError, ShapeError
from .motion import FOOT_JOINTS, GroupMotion, Skeleton, load_skeleton, motion_joint_positions
from .motion_io import read_motion

logger = logging.getLogger(__name__)

COVARIANCE_EPS = 1e-6
GMC_MAX_LAG = 5

# 单人特征布局：局部关节位置均值/标准差 (72 + 72)，关节速度均值/标准差 (24 + 24)，根轨迹统计 (5)
ROOT_STATS = slice(192, 197)


# ================================================================ 特征

def kinematic_features(poses: np.ndarray, skeleton: Optional[Skeleton] = None, fps: float = 30.0) -> np.ndarray:
    """
    单人运动学特征向量

    根轨迹统计为：水平速度均值、水平速度标准差、x 跨度、y 跨度、水平路径总长。

    Args:
        poses: (L, 151) 单人序列
    """
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim != 2 or poses.shape[0] < 2:
        raise ShapeError("kinematic_features", poses.shape, detail="要求 L ≥ 2 的单人序列")
    joints = motion_joint_positions(poses, skeleton)                     # (L, 24, 3)
    local = joints - joints[:, :1]
    speed = np.linalg.norm(np.diff(joints, axis=0), axis=-1) * fps       # (L-1, 24)
    root = poses[:, 148:150]
    step = np.linalg.norm(np.diff(root, axis=0), axis=-1)
    root_stats = np.array([
        np.mean(step) * fps,
        np.std(step) * fps,
        np.ptp(root[:, 0]),
        np.ptp(root[:, 1]),
        np.sum(step),
    ])
    return np.concatenate([
        local.mean(axis=0).ravel(), local.std(axis=0).ravel(),
        speed.mean(axis=0), speed.std(axis=0),
        root_stats,
    ])


def group_features(motion: GroupMotion, fps: Optional[float] = None) -> np.ndarray:
    """
    编队特征：各舞者对的距离均值/标准差与相对位置均值、队形质心速度与离散度统计

    维度取决于 N，只能在相同人数之间比较。
    """
    fps = fps or motion.fps
    roots = motion.roots_xy()                                            # (L, N, 2)
    first, second = np.triu_indices(motion.dancers, k=1)
    relative = roots[:, first] - roots[:, second]
    distance = np.linalg.norm(relative, axis=-1)
    centroid = roots.mean(axis=1)
    centroid_speed = np.linalg.norm(np.diff(centroid, axis=0), axis=-1) * fps
    spread = np.linalg.norm(roots - centroid[:, None], axis=-1).mean(axis=1)
    return np.concatenate([
        distance.mean(axis=0), distance.std(axis=0),
        relative.mean(axis=0).ravel(),
        [centroid_speed.mean(), centroid_speed.std(), spread.mean(), spread.std()],
    ])


# ================================================================ 分布距离

def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def _statistics(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mu = features.mean(axis=0)
    sigma = np.atleast_2d(np.cov(features, rowvar=False))
    return mu, sigma + COVARIANCE_EPS * np.eye(sigma.shape[0])


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """
    ‖μ_A - μ_B‖² + tr(Σ_A + Σ_B - 2(Σ_A Σ_B)^{1/2})

    tr((Σ_A Σ_B)^{1/2}) 取 Σ_A^{1/2} Σ_B^{1/2} 的奇异值之和（特征分解求对称平方根）。
    """
    feats_a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    feats_b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if feats_a.shape[1] != feats_b.shape[1]:
        raise ShapeError("frechet_distance", feats_a.shape, feats_b.shape, detail="特征维度不一致")
    if feats_a.shape[0] < 2 or feats_b.shape[0] < 2:
        raise NumericError(f"每组至少需要 2 个特征向量: {feats_a.shape[0]}, {feats_b.shape[0]}")
    mu_a, sigma_a = _statistics(feats_a)
    mu_b, sigma_b = _statistics(feats_b)
    diff = mu_a - mu_b
    cross = np.sum(linalg.svdvals(_psd_sqrt(sigma_a) @ _psd_sqrt(sigma_b)))
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * cross)
    return max(value, 0.0)


def diversity(features: np.ndarray) -> float:
    """特征向量两两欧氏距离的均值"""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[0] < 2:
        raise NumericError(f"多样性至少需要 2 个样本: {features.shape[0]}")
    return float(np.mean(pdist(features)))


# ================================================================ 群体指标

def speed_profiles(motion: GroupMotion, skeleton: Optional[Skeleton] = None) -> np.ndarray:
    """每个舞者的逐帧关节速度之和，(N, L-1)"""
    joints = motion_joint_positions(motion.poses, skeleton)             # (L, N, 24, 3)
    return np.linalg.norm(np.diff(joints, axis=0), axis=-1).sum(axis=-1).T


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a - a.mean(), b - b.mean()
    denom = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.sum(a * b) / denom) if denom > 1e-12 else 0.0


def lagged_correlation(a: np.ndarray, b: np.ndarray, max_lag: int = GMC_MAX_LAG) -> float:
    """|lag| ≤ max_lag 范围内重叠部分 Pearson 相关系数的最大值"""
    n = len(a)
    best = -1.0
    for lag in range(-min(max_lag, n - 2), min(max_lag, n - 2) + 1):
        if lag >= 0:
            value = _pearson(a[lag:], b[:n - lag])
        else:
            value = _pearson(a[:n + lag], b[-lag:])
        best = max(best, value)
    return best


def gmc(motion: GroupMotion, skeleton: Optional[Skeleton] = None) -> float:
    """群体动作相关度：舞者对速度曲线的最大滞后相关的均值 × 100"""
    if motion.dancers < 2:
        raise NumericError("GMC 需要至少 2 名舞者")
    if motion.frames < 3:
        raise ShapeError("gmc", motion.poses.shape, detail="要求 L ≥ 3")
    profiles = speed_profiles(motion, skeleton)
    pairs = [lagged_correlation(profiles[i], profiles[j])
             for i, j in zip(*np.triu_indices(motion.dancers, k=1))]
    return float(np.clip(100.0 * np.mean(pairs), -100.0, 100.0))


def _orientation(p: np.ndarray, q: np.ndarray, r: np.ndarray) -> np.ndarray:
    cross = (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])
    return np.sign(cross)


def _on_segment(p: np.ndarray, r: np.ndarray, q: np.ndarray) -> np.ndarray:
    """r 落在以 p、q 为对角的包围盒内"""
    return ((np.minimum(p[..., 0], q[..., 0]) <= r[..., 0]) & (r[..., 0] <= np.maximum(p[..., 0], q[..., 0]))
            & (np.minimum(p[..., 1], q[..., 1]) <= r[..., 1]) & (r[..., 1] <= np.maximum(p[..., 1], q[..., 1])))


def segments_intersect(p1: np.ndarray, q1: np.ndarray, p2: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """二维线段相交测试（真相交与端点接触都算），支持任意前导维度"""
    o1, o2 = _orientation(p1, q1, p2), _orientation(p1, q1, q2)
    o3, o4 = _orientation(p2, q2, p1), _orientation(p2, q2, q1)
    proper = (o1 * o2 < 0) & (o3 * o4 < 0)
    touching = (((o1 == 0) & _on_segment(p1, p2, q1)) | ((o2 == 0) & _on_segment(p1, q2, q1))
                | ((o3 == 0) & _on_segment(p2, p1, q2)) | ((o4 == 0) & _on_segment(p2, q1, q2)))
    return proper | touching


def tif_count(motion: GroupMotion) -> int:
    """所有帧步与舞者对上根位移线段的相交次数"""
    roots = motion.roots_xy()
    if motion.dancers < 2 or motion.frames < 2:
        return 0
    first, second = np.triu_indices(motion.dancers, k=1)
    start, end = roots[:-1], roots[1:]
    hits = segments_intersect(start[:, first], end[:, first], start[:, second], end[:, second])
    return int(np.sum(hits))


def tif(motion: GroupMotion) -> float:
    """轨迹相交频率：相交次数 / (舞者对数 × 帧步数)"""
    pairs = motion.dancers * (motion.dancers - 1) // 2
    steps = motion.frames - 1
    if pairs == 0 or steps == 0:
        return 0.0
    return tif_count(motion) / float(pairs * steps)


# ================================================================ 物理合理性

def pfc_from_joints(joints: np.ndarray) -> float:
    """
    足部接触物理合理性

    根（关节 0）水平加速度按序列最大值归一化后，乘以左右脚各自（足跟/足尖较小者）水平位移之积，取均值。
    """
    joints = np.asarray(joints, dtype=np.float64)
    if joints.ndim != 3 or joints.shape[0] < 3:
        raise ShapeError("pfc", joints.shape, detail="要求 L ≥ 3")
    root = joints[:, 0, :2]
    acceleration = np.linalg.norm(root[2:] - 2.0 * root[1:-1] + root[:-2], axis=-1)
    peak = acceleration.max()
    if peak <= 0:
        return 0.0
    feet = joints[:, list(FOOT_JOINTS), :2]                              # 左跟、右跟、左尖、右尖
    foot_speed = np.linalg.norm(feet[2:] - feet[1:-1], axis=-1)          # (L-2, 4)
    left = np.minimum(foot_speed[:, 0], foot_speed[:, 2])
    right = np.minimum(foot_speed[:, 1], foot_speed[:, 3])
    return float(np.mean(acceleration / peak * left * right))


def pfc(poses: np.ndarray, skeleton: Optional[Skeleton] = None) -> float:
    """单人序列 (L, 151) 的 PFC"""
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim != 2 or poses.shape[0] < 3:
        raise ShapeError("pfc", poses.shape, detail="要求 L ≥ 3")
    return pfc_from_joints(motion_joint_positions(poses, skeleton))


# ================================================================ 批量评测

@dataclass
class MetricReport:
    """评测报告"""
    gmr: float
    gmc: float
    tif: float
    fid: float
    div: float
    pfc: float
    count: int
    reference_count: int
    seconds: float
    per_file: List[Dict[str, Any]] = field(default_factory=list)

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def table(self) -> str:
        """对齐文本表格：汇总 + 每文件指标"""
        summary = pd.DataFrame([{k: getattr(self, k) for k in ('gmr', 'gmc', 'tif', 'fid', 'div', 'pfc')}])
        text = summary.to_string(index=False, float_format=lambda v: f"{v:.4f}")
        if self.per_file:
            text += "\n\n" + pd.DataFrame(self.per_file).to_string(index=False, float_format=lambda v: f"{v:.4f}")
        return text


@dataclass
class FileFeatures:
    name: str
    group: np.ndarray
    dancers: np.ndarray        # (N, D) 单人特征
    gmc: float
    tif: float
    pfc: float


def list_motion_files(directory: str) -> List[str]:
    if not os.path.isdir(directory):
        raise MotionIOError("目录不存在", path=directory)
    files = sorted(glob.glob(os.path.join(directory, '*.gdm')))
    if not files:
        raise MotionIOError("目录中没有 .gdm 动作文件", path=directory)
    return files


def file_features(path: str, skeleton: Optional[Skeleton] = None) -> FileFeatures:
    motion = read_motion(path)
    skeleton = skeleton or load_skeleton()
    dancers = np.stack([kinematic_features(motion.dancer(i), skeleton, motion.fps) for i in range(motion.dancers)])
    single_pfc = np.mean([pfc(motion.dancer(i), skeleton) for i in range(motion.dancers)]) if motion.frames >= 3 else 0.0
    group_gmc = gmc(motion, skeleton) if motion.dancers >= 2 and motion.frames >= 3 else 0.0
    return FileFeatures(os.path.basename(path), group_features(motion), dancers, group_gmc, tif(motion), float(single_pfc))


def _collect(files: Sequence[str], threads: int) -> List[FileFeatures]:
    if threads <= 1:
        return [file_features(path) for path in files]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(file_features, files))


def evaluate_directory(generated_dir: str, reference_dir: str, threads: Optional[int] = None) -> MetricReport:
    """
    对生成目录与参考目录中的 GDM1 文件计算全部指标

    Args:
        generated_dir: 生成动作目录
        reference_dir: 真实动作目录
        threads: 并行线程数，默认取 GDANCE_THREADS

    Returns:
        MetricReport
    """
    start = time.perf_counter()
    threads = threads or get_config('GDANCE_THREADS', 1)
    generated = _collect(list_motion_files(generated_dir), threads)
    reference = _collect(list_motion_files(reference_dir), threads)

    gen_single = np.concatenate([f.dancers for f in generated])
    ref_single = np.concatenate([f.dancers for f in reference])
    gen_group = np.stack([f.group for f in generated])
    ref_group = np.stack([f.group for f in reference])
    report = MetricReport(
        gmr=frechet_distance(gen_group, ref_group),
        gmc=float(np.mean([f.gmc for f in generated])),
        tif=float(np.mean([f.tif for f in generated])),
        fid=frechet_distance(gen_single, ref_single),
        div=diversity(gen_single),
        pfc=float(np.mean([f.pfc for f in generated])),
        count=len(generated),
        reference_count=len(reference),
        seconds=time.perf_counter() - start,
        per_file=[{'file': f.name, 'gmc': f.gmc, 'tif': f.tif, 'pfc': f.pfc} for f in generated],
    )
    logger.info(f"评测完成: {report.count} 个生成文件 / {report.reference_count} 个参考文件, "
                f"FID={report.fid:.4f}, GMR={report.gmr:.4f}, 耗时 {report.seconds:.2f}s")
    return report
