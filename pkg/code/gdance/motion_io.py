"""
动作/音乐文件读写模块
GDM1（动作）与 GDMU（音乐）二进制格式、JSON 镜像以及双向转换

GDM1: b'GDM1' | u32 L | u32 N | u32 D(=151) | f32 fps | L·N·D float32（帧、舞者、通道行主序）
GDMU: b'GDMU' | u32 L | u32 d_m | f32 fps | L·d_m float32
所有整数与浮点均为小端序。
"""

import os
import glob
import json
import struct
import logging
import tempfile
from typing import Any, BinaryIO, Dict, Iterator, List, Sequence, Tuple, Union

import numpy as np

from .config import get_config
from .exceptions import BadMagicError, HeaderMismatchError, MotionIOError, TruncatedPayloadError
from .motion import POSE_DIM, GroupMotion, MusicTrack

logger = logging.getLogger(__name__)

MOTION_HEADER = struct.Struct('<4sIIIf')
MUSIC_HEADER = struct.Struct('<4sIIf')
PAYLOAD_DTYPE = np.dtype('<f4')


def atomic_write(path: str, payload: Union[bytes, str]):
    """先写入同目录临时文件再原子替换，读者不会看到半写入的文件"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    mode = 'wb' if isinstance(payload, bytes) else 'w'
    fd, temp_path = tempfile.mkstemp(prefix='.tmp-', dir=directory)
    try:
        with os.fdopen(fd, mode, **({} if mode == 'wb' else {'encoding': 'utf-8'})) as f:
            f.write(payload)
        os.replace(temp_path, path)
    except OSError as e:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise MotionIOError(f"写入失败 ({e})", path=path) from None


def _read_exact(stream: BinaryIO, size: int, what: str, path: str) -> bytes:
    chunks, remaining = [], size
    while remaining > 0:
        chunk = stream.read(remaining)
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    data = b''.join(chunks)
    if len(data) != size:
        raise TruncatedPayloadError(f"{what} 长度不足: 期望 {size} 字节，实际 {len(data)} 字节", path=path)
    return data


# ================================================================ 动作

def encode_motion(motion: GroupMotion) -> bytes:
    frames, dancers, channels = motion.poses.shape
    header = MOTION_HEADER.pack(get_config('MOTION_MAGIC'), frames, dancers, channels, motion.fps)
    return header + motion.poses.astype(PAYLOAD_DTYPE).tobytes(order='C')


def read_motion_stream(stream: BinaryIO, path: str = '<stream>') -> GroupMotion:
    raw = stream.read(MOTION_HEADER.size)
    if len(raw) < 4 or raw[:4] != get_config('MOTION_MAGIC'):
        raise BadMagicError(f"动作文件魔数错误: {raw[:4]!r}", path=path)
    if len(raw) != MOTION_HEADER.size:
        raise TruncatedPayloadError("动作文件头不完整", path=path)
    _, frames, dancers, channels, fps = MOTION_HEADER.unpack(raw)
    if channels != POSE_DIM:
        raise HeaderMismatchError(f"通道数必须为 {POSE_DIM}，文件头为 {channels}", path=path)
    if frames < 2 or dancers < 1:
        raise HeaderMismatchError(f"文件头 L={frames}, N={dancers} 非法", path=path)
    payload = _read_exact(stream, frames * dancers * channels * PAYLOAD_DTYPE.itemsize, "动作数据", path)
    poses = np.frombuffer(payload, dtype=PAYLOAD_DTYPE).astype(np.float64).reshape(frames, dancers, channels)
    return GroupMotion(poses, fps)


def write_motion(path: str, motion: GroupMotion):
    """写入 GDM1 文件（float32 负载）"""
    atomic_write(path, encode_motion(motion))
    logger.debug(f"写入动作文件: {path} (L={motion.frames}, N={motion.dancers})")


def read_motion(path: str) -> GroupMotion:
    """读取 GDM1 文件"""
    try:
        with open(path, 'rb') as f:
            return read_motion_stream(f, path)
    except FileNotFoundError:
        raise MotionIOError("动作文件不存在", path=path) from None


# ================================================================ 音乐

def encode_music(music: MusicTrack) -> bytes:
    frames, dim = music.features.shape
    header = MUSIC_HEADER.pack(get_config('MUSIC_MAGIC'), frames, dim, music.fps)
    return header + music.features.astype(PAYLOAD_DTYPE).tobytes(order='C')


def _read_music_block(stream: BinaryIO, path: str, allow_eof: bool = False):
    raw = stream.read(MUSIC_HEADER.size)
    if allow_eof and not raw:
        return None
    if len(raw) < 4 or raw[:4] != get_config('MUSIC_MAGIC'):
        raise BadMagicError(f"音乐文件魔数错误: {raw[:4]!r}", path=path)
    if len(raw) != MUSIC_HEADER.size:
        raise TruncatedPayloadError("音乐文件头不完整", path=path)
    _, frames, dim, fps = MUSIC_HEADER.unpack(raw)
    if frames < 1 or dim < 1:
        raise HeaderMismatchError(f"文件头 L={frames}, d_m={dim} 非法", path=path)
    payload = _read_exact(stream, frames * dim * PAYLOAD_DTYPE.itemsize, "音乐数据", path)
    features = np.frombuffer(payload, dtype=PAYLOAD_DTYPE).astype(np.float64).reshape(frames, dim)
    return MusicTrack(features, fps)


def write_music(path: str, music: MusicTrack):
    """写入 GDMU 文件"""
    atomic_write(path, encode_music(music))


def read_music(path: str) -> MusicTrack:
    """读取单个 GDMU 块"""
    try:
        with open(path, 'rb') as f:
            return _read_music_block(f, path)
    except FileNotFoundError:
        raise MotionIOError("音乐文件不存在", path=path) from None


def iter_music_segments(source: Union[str, BinaryIO]) -> Iterator[MusicTrack]:
    """
    逐段读取连续的 GDMU 块（每段一个文件头），适用于普通文件与命名管道

    Args:
        source: 路径或已打开的二进制流

    Yields:
        MusicTrack: 每个音乐段
    """
    if isinstance(source, str):
        try:
            stream = open(source, 'rb')
        except FileNotFoundError:
            raise MotionIOError("音乐流不存在", path=source) from None
        path, owned = source, True
    else:
        stream, path, owned = source, getattr(source, 'name', '<stream>'), False
    try:
        while True:
            segment = _read_music_block(stream, path, allow_eof=True)
            if segment is None:
                return
            yield segment
    finally:
        if owned:
            stream.close()


def write_music_segments(path: str, segments):
    """将多个音乐段按 GDMU 分段格式写入同一文件"""
    atomic_write(path, b''.join(encode_music(segment) for segment in segments))


# ================================================================ JSON 镜像

def motion_to_json(motion: GroupMotion) -> Dict[str, Any]:
    """键名: format, frames, dancers, channels, fps, poses[L][N][151]"""
    return {
        'format': 'GDM1',
        'frames': motion.frames,
        'dancers': motion.dancers,
        'channels': POSE_DIM,
        'fps': motion.fps,
        'poses': motion.poses.tolist(),
    }


def motion_from_json(document: Dict[str, Any], path: str = '<json>') -> GroupMotion:
    if document.get('format') != 'GDM1':
        raise BadMagicError(f"JSON format 字段应为 GDM1: {document.get('format')!r}", path=path)
    poses = np.asarray(document.get('poses', []), dtype=np.float64)
    expected = (document.get('frames'), document.get('dancers'), document.get('channels'))
    if expected[2] != POSE_DIM or poses.shape != expected:
        raise HeaderMismatchError(f"JSON 形状 {list(poses.shape)} 与声明 {list(expected)} 不符", path=path)
    return GroupMotion(poses, document.get('fps', 30.0))


def music_to_json(music: MusicTrack) -> Dict[str, Any]:
    """键名: format, frames, dim, fps, features[L][d_m]"""
    return {
        'format': 'GDMU',
        'frames': music.frames,
        'dim': music.dim,
        'fps': music.fps,
        'features': music.features.tolist(),
    }


def music_from_json(document: Dict[str, Any], path: str = '<json>') -> MusicTrack:
    if document.get('format') != 'GDMU':
        raise BadMagicError(f"JSON format 字段应为 GDMU: {document.get('format')!r}", path=path)
    features = np.asarray(document.get('features', []), dtype=np.float64)
    if features.shape != (document.get('frames'), document.get('dim')):
        raise HeaderMismatchError(f"JSON 形状 {list(features.shape)} 与声明不符", path=path)
    return MusicTrack(features, document.get('fps', 30.0))


def write_json(path: str, document: Dict[str, Any]):
    atomic_write(path, json.dumps(document, ensure_ascii=False))


def read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError:
        raise MotionIOError("JSON 文件不存在", path=path) from None
    except json.JSONDecodeError as e:
        raise MotionIOError(f"JSON 解析失败 ({e})", path=path) from None


def sniff_format(path: str) -> str:
    """根据文件开头判断格式：GDM1、GDMU 或 json"""
    try:
        with open(path, 'rb') as f:
            head = f.read(4)
    except FileNotFoundError:
        raise MotionIOError("文件不存在", path=path) from None
    if head in (get_config('MOTION_MAGIC'), get_config('MUSIC_MAGIC')):
        return head.decode('ascii')
    if head.lstrip()[:1] == b'{':
        return 'json'
    raise BadMagicError(f"无法识别的文件魔数: {head!r}", path=path)


def convert_file(source: str, target: str) -> str:
    """
    在二进制格式与 JSON 镜像之间双向转换

    Returns:
        str: 输出格式（GDM1 / GDMU / json）
    """
    kind = sniff_format(source)
    if kind == 'GDM1':
        write_json(target, motion_to_json(read_motion(source)))
        return 'json'
    if kind == 'GDMU':
        write_json(target, music_to_json(read_music(source)))
        return 'json'
    document = read_json(source)
    if document.get('format') == 'GDM1':
        write_motion(target, motion_from_json(document, source))
        return 'GDM1'
    write_music(target, music_from_json(document, source))
    return 'GDMU'


# ================================================================ 数据集目录

def write_dataset(directory: str, dataset: Sequence[Tuple[GroupMotion, MusicTrack]]) -> List[str]:
    """
    把 (动作, 音乐) 对写成 seq_XXXX.gdm / seq_XXXX.gdmu

    Returns:
        List[str]: 写入的动作文件路径
    """
    os.makedirs(directory, exist_ok=True)
    paths = []
    for index, (motion, music) in enumerate(dataset):
        stem = os.path.join(directory, f"seq_{index:04d}")
        write_motion(stem + '.gdm', motion)
        write_music(stem + '.gdmu', music)
        paths.append(stem + '.gdm')
    logger.info(f"数据集已写入: {directory} ({len(paths)} 条)")
    return paths


def read_dataset(directory: str) -> List[Tuple[GroupMotion, MusicTrack]]:
    """按文件名顺序读取目录下所有成对的 .gdm / .gdmu 文件"""
    if not os.path.isdir(directory):
        raise MotionIOError("数据集目录不存在", path=directory)
    motion_paths = sorted(glob.glob(os.path.join(directory, '*.gdm')))
    if not motion_paths:
        raise MotionIOError("数据集目录中没有 .gdm 文件", path=directory)
    dataset = []
    for path in motion_paths:
        motion = read_motion(path)
        music = read_music(path + 'u')
        if music.frames < motion.frames:
            raise HeaderMismatchError(f"音乐帧数 {music.frames} 少于动作帧数 {motion.frames}", path=path + 'u')
        dataset.append((motion, music))
    shapes = {(m.frames, m.dancers) for m, _ in dataset}
    if len(shapes) != 1:
        raise HeaderMismatchError(f"数据集中的 (L, N) 不一致: {sorted(shapes)}", path=directory)
    return dataset
