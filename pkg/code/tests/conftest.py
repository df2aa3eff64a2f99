"""
测试公共夹具
小规模解码器配置、骨架与合成数据
"""

import numpy as np
import pytest

from gdance.config import DatasetConfig, DecoderConfig, RunConfig
from gdance.motion import GroupMotion, MusicTrack, identity_rot6d, load_skeleton, POSE_DIM
from gdance.numerics import RngStream


@pytest.fixture
def skeleton():
    return load_skeleton()


@pytest.fixture
def tiny_decoder_config():
    """梯度检查与 FLOPs 对账使用的最小配置"""
    return DecoderConfig(d=16, temporal_layers=1, gcn_layers=1, ssm_state_dim=4, window=3, music_dim=5)


@pytest.fixture
def tiny_run_config(tiny_decoder_config):
    run_config = RunConfig(decoder=tiny_decoder_config)
    run_config.schedule.T = 20
    run_config.schedule.segment_len = 8
    run_config.dataset = DatasetConfig(dancers=2, frames=16, count=3, music_dim=5)
    run_config.train.steps = 2
    run_config.train.batch_size = 2
    run_config.stream.window_segments = 2
    return run_config


def random_poses(rng: RngStream, frames: int, dancers: int, spread: float = 2.0) -> np.ndarray:
    """随机但非退化的 (L, N, 151) 姿态"""
    generator = rng.generator
    poses = generator.standard_normal((frames, dancers, POSE_DIM)) * 0.1
    poses[..., :144] += identity_rot6d()
    poses[..., 144:148] = generator.uniform(0.0, 1.0, (frames, dancers, 4))
    poses[..., 148:150] += np.arange(dancers)[None, :, None] * spread
    poses[..., 150] += 0.9
    return poses


@pytest.fixture
def make_motion():
    def factory(seed: int = 0, frames: int = 8, dancers: int = 2) -> GroupMotion:
        return GroupMotion(random_poses(RngStream(seed), frames, dancers))
    return factory


@pytest.fixture
def make_music():
    def factory(seed: int = 0, frames: int = 8, dim: int = 5) -> MusicTrack:
        return MusicTrack(RngStream(seed).generator.standard_normal((frames, dim)))
    return factory
