"""
采样工具
从检查点与音乐文件生成群舞动作：离线采样、TNS 推演以及逐段流式发射
"""

import os
import logging
from typing import Any, Dict, Iterator, Optional

import numpy as np

from ..diffusion import (DecoderDenoiser, assemble_stream, make_schedule, sample_offline, sample_tns,
                         stream_generate)
from ..exceptions import ConfigError
from ..model import GroupDanceDecoder, load_checkpoint, sequence_swap
from ..motion import GroupMotion, MusicTrack, rearrange_dancers
from ..motion_io import iter_music_segments, read_motion, write_motion
from ..numerics import RngStream
from ..temporal import identity_swap
from .base_tool import BaseTool

logger = logging.getLogger(__name__)

# 采样使用根流的子流 3（初始化为 1，训练批次为 2）
SAMPLE_SUBSTREAM = 3


def rechunk_music(source: Iterator[MusicTrack], segment_len: int) -> Iterator[MusicTrack]:
    """
    把任意分块的音乐流重新切成 segment_len 帧的段，凑满即产出

    音乐源结束时剩余帧作为最后一段；只剩 1 帧时无法构成合法动作文件，丢弃并告警。
    """
    pending = None
    fps = 30.0
    for block in source:
        fps = block.fps
        pending = block.features if pending is None else np.concatenate([pending, block.features])
        while pending.shape[0] >= segment_len:
            yield MusicTrack(pending[:segment_len], fps)
            pending = pending[segment_len:]
    if pending is not None and pending.shape[0] >= 2:
        yield MusicTrack(pending, fps)
    elif pending is not None and pending.shape[0] == 1:
        logger.warning("音乐流末尾只剩 1 帧，已丢弃")


class SampleTool(BaseTool):
    """采样工具类"""

    title = "采样"

    def _load(self, checkpoint: str, swap_from: Optional[str]):
        decoder = load_checkpoint(checkpoint)
        if swap_from:
            reference = read_motion(swap_from)
            if reference.dancers != decoder.dancers:
                raise ConfigError(f"换位参考动作有 {reference.dancers} 名舞者，检查点为 {decoder.dancers}",
                                  key='--swap-from')
            swap = sequence_swap(rearrange_dancers(reference)[0])
        else:
            swap = identity_swap(decoder.dancers)
        return decoder, swap, make_schedule(decoder.steps, self.run_config.schedule.kind)

    @staticmethod
    def _require_causal(decoder: GroupDanceDecoder):
        """流式生成只接受 aam_mode=causal 的检查点"""
        if decoder.config.aam_mode != 'causal':
            raise ConfigError(f"流式生成需要 aam_mode=causal 的检查点，实际为 {decoder.config.aam_mode}",
                              key='decoder.aam_mode')

    @staticmethod
    def _check_music(decoder: GroupDanceDecoder, dim: int):
        if dim != decoder.config.music_dim:
            raise ConfigError(f"音乐特征维度 {dim} 与检查点 {decoder.config.music_dim} 不符", key='decoder.music_dim')

    def run(self, checkpoint: str, music_path: str, out_path: str, seed: Optional[int],
            frames: Optional[int] = None, mode: str = 'offline', swap_from: Optional[str] = None) -> Dict[str, Any]:
        """
        生成整段动作并写入单个 GDM1 文件

        Args:
            checkpoint: 检查点路径
            music_path: GDMU 音乐文件（可为多段拼接）
            out_path: 输出 .gdm 路径
            seed: 随机种子（必填）
            frames: 生成帧数，缺省为音乐长度
            mode: offline（整段统一时间步）| streaming（三角调度推演）
            swap_from: 提供换位编码的参考动作，缺省为恒等编码
        """
        try:
            seed = self.require_seed(seed)
            if mode not in ('offline', 'streaming'):
                raise ConfigError(f"未知的采样模式: {mode}", key='mode')
            decoder, swap, schedule = self._load(checkpoint, swap_from)
            if mode == 'streaming':
                self._require_causal(decoder)
            blocks = list(iter_music_segments(music_path))
            music = MusicTrack(np.concatenate([b.features for b in blocks]), blocks[0].fps)
            self._check_music(decoder, music.dim)
            length = frames or music.frames
            if length < 2 or length > music.frames:
                raise ConfigError(f"帧数必须在 [2, {music.frames}]: {length}", key='--frames')

            rng = RngStream(seed).substream(SAMPLE_SUBSTREAM)
            denoiser = DecoderDenoiser(decoder)
            self._emit_text(f"{mode} 采样: L={length}, N={decoder.dancers}, T={schedule.T}")
            if mode == 'offline':
                result = sample_offline(denoiser, music, swap, length, schedule, rng, music.fps)
            else:
                result = sample_tns(denoiser, music, swap, length, schedule, rng,
                                    self.run_config.schedule.segment_len, self.run_config.stream.window_segments,
                                    music.fps)
            write_motion(out_path, result.motion)
            summary = {"success": True, "out": out_path, "mode": mode, "frames": length,
                       "dancers": decoder.dancers, "seconds": result.seconds, "steps": result.steps}
            self._emit_json(summary, "success")
            return summary
        except Exception as e:
            return self._fail(e, out=out_path)

    def _checked(self, decoder: GroupDanceDecoder, source: Iterator[MusicTrack]) -> Iterator[MusicTrack]:
        for segment in source:
            self._check_music(decoder, segment.dim)
            yield segment


class StreamTool(SampleTool):
    """流式生成工具类"""

    title = "流式生成"

    def run(self, checkpoint: str, music_path: str, out_dir: str, seed: Optional[int],
            swap_from: Optional[str] = None) -> Dict[str, Any]:
        """
        逐段流式生成：每完成一段即写出 segment_XXXX.gdm，结束后写出拼接的 stream.gdm

        music_path 可以是普通文件或命名管道，按 GDMU 块逐段读取。
        """
        try:
            seed = self.require_seed(seed)
            decoder, swap, schedule = self._load(checkpoint, swap_from)
            self._require_causal(decoder)
            os.makedirs(out_dir, exist_ok=True)
            stream_config = self.run_config.stream
            source = rechunk_music(iter_music_segments(music_path), self.run_config.schedule.segment_len)
            rng = RngStream(seed).substream(SAMPLE_SUBSTREAM)

            emitted, files, fps = [], [], 30.0
            for segment in stream_generate(DecoderDenoiser(decoder), self._checked(decoder, source), schedule,
                                           stream_config.window_segments, swap, rng,
                                           stream_config.context_segments):
                path = os.path.join(out_dir, f"segment_{segment.index:04d}.gdm")
                write_motion(path, GroupMotion(segment.poses, fps))
                emitted.append(segment)
                files.append(path)
                self._emit_json({"segment": segment.index, "frames": int(segment.poses.shape[0]),
                                 "latency": segment.latency, "tick": segment.tick})
            if not emitted:
                raise ConfigError("音乐流为空", key='--music')

            assembled = os.path.join(out_dir, 'stream.gdm')
            write_motion(assembled, assemble_stream(emitted, fps))
            latencies = [s.latency for s in emitted]
            summary = {"success": True, "out": assembled, "segments": files, "count": len(emitted),
                       "latency_mean": float(np.mean(latencies)), "latency_max": float(np.max(latencies))}
            logger.info(f"流式生成完成: {len(emitted)} 段, 平均延迟 {summary['latency_mean'] * 1000:.1f} ms")
            self._emit_json({k: v for k, v in summary.items() if k != "segments"}, "success")
            return summary
        except Exception as e:
            return self._fail(e, out=out_dir)
