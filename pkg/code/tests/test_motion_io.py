"""
文件格式测试：GDM1 / GDMU 读写、错误分类与数据集目录
"""

import io
import os
import struct

import numpy as np
import pytest

from gdance.exceptions import BadMagicError, HeaderMismatchError, MotionIOError, TruncatedPayloadError
from gdance.motion import GroupMotion, MusicTrack
from gdance.motion_io import (convert_file, encode_motion, iter_music_segments, read_dataset, read_motion,
                              read_motion_stream, read_music, sniff_format, write_dataset, write_motion,
                              write_music, write_music_segments)


def test_motion_file_stores_float32_payload(tmp_path, make_motion):
    motion = make_motion(seed=1, frames=5, dancers=3)
    path = str(tmp_path / 'a.gdm')
    write_motion(path, motion)
    loaded = read_motion(path)
    np.testing.assert_array_equal(loaded.poses, motion.poses.astype(np.float32).astype(np.float64))
    assert loaded.fps == 30.0
    assert os.path.getsize(path) == 20 + 5 * 3 * 151 * 4


def test_motion_header_layout(make_motion):
    payload = encode_motion(make_motion(frames=4, dancers=2))
    magic, frames, dancers, channels, fps = struct.unpack('<4sIIIf', payload[:20])
    assert (magic, frames, dancers, channels, fps) == (b'GDM1', 4, 2, 151, 30.0)


def test_read_errors_are_classified(tmp_path, make_motion):
    payload = encode_motion(make_motion(frames=4, dancers=2))
    with pytest.raises(BadMagicError):
        read_motion_stream(io.BytesIO(b'XXXX' + payload[4:]))
    with pytest.raises(TruncatedPayloadError):
        read_motion_stream(io.BytesIO(payload[:-8]))
    wrong_channels = payload[:12] + struct.pack('<I', 150) + payload[16:]
    with pytest.raises(HeaderMismatchError):
        read_motion_stream(io.BytesIO(wrong_channels))
    with pytest.raises(MotionIOError) as excinfo:
        read_motion(str(tmp_path / 'missing.gdm'))
    assert excinfo.value.path.endswith('missing.gdm')


def test_music_segments_stream_in_order(tmp_path, make_music):
    segments = [make_music(seed=s, frames=3 + s, dim=4) for s in range(3)]
    path = str(tmp_path / 'music.gdmu')
    write_music_segments(path, segments)
    loaded = list(iter_music_segments(path))
    assert [m.frames for m in loaded] == [3, 4, 5]
    with open(path, 'rb') as f:
        assert len(list(iter_music_segments(f))) == 3
    assert read_music(path).frames == 3


def test_json_mirror_round_trip(tmp_path, make_motion, make_music):
    motion_path, music_path = str(tmp_path / 'm.gdm'), str(tmp_path / 'm.gdmu')
    write_motion(motion_path, make_motion(frames=3, dancers=2))
    write_music(music_path, make_music(frames=3, dim=2))
    assert convert_file(motion_path, str(tmp_path / 'm.json')) == 'json'
    assert sniff_format(str(tmp_path / 'm.json')) == 'json'
    assert convert_file(str(tmp_path / 'm.json'), str(tmp_path / 'back.gdm')) == 'GDM1'
    with open(motion_path, 'rb') as a, open(tmp_path / 'back.gdm', 'rb') as b:
        assert a.read() == b.read()
    assert convert_file(music_path, str(tmp_path / 'u.json')) == 'json'
    assert convert_file(str(tmp_path / 'u.json'), str(tmp_path / 'back.gdmu')) == 'GDMU'
    assert sniff_format(str(tmp_path / 'back.gdmu')) == 'GDMU'


def test_dataset_directory_round_trip(tmp_path, make_motion, make_music):
    dataset = [(make_motion(seed=s, frames=6, dancers=2), make_music(seed=s, frames=6)) for s in range(3)]
    paths = write_dataset(str(tmp_path / 'data'), dataset)
    assert [os.path.basename(p) for p in paths] == ['seq_0000.gdm', 'seq_0001.gdm', 'seq_0002.gdm']
    loaded = read_dataset(str(tmp_path / 'data'))
    assert len(loaded) == 3
    assert all(m.frames == 6 and a.dim == 5 for m, a in loaded)


def test_dataset_rejects_short_music(tmp_path, make_motion, make_music):
    write_dataset(str(tmp_path), [(make_motion(frames=6), make_music(frames=4))])
    with pytest.raises(HeaderMismatchError):
        read_dataset(str(tmp_path))
    with pytest.raises(MotionIOError):
        read_dataset(str(tmp_path / 'nowhere'))
