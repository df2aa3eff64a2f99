"""
命令编排与工具层测试
"""

import logging
import os

import numpy as np

from gdance.model import load_checkpoint, read_checkpoint_meta, train_loop
from gdance.motion import rearrange_dancers
from gdance.motion_io import read_dataset
from gdance.pipeline import COMMANDS, GDancePipeline
from gdance.tools.sample_tool import rechunk_music
from gdance.utils import StepCallbackSystem, TrainingHistoryManager, load_loss_csv, logging_callback


def test_unknown_command_and_bad_arguments(tiny_run_config):
    pipeline = GDancePipeline(tiny_run_config)
    result = pipeline.process_command('dance')
    assert result['success'] is False and result['error_type'] == 'config_error' and result['key'] == 'command'
    result = pipeline.process_command('synth', destination='x')
    assert result['error_type'] == 'config_error'
    assert set(pipeline.handlers) == set(COMMANDS)


def test_pipeline_emits_progress_events(tmp_path, tiny_run_config):
    events = []
    callbacks = StepCallbackSystem()
    callbacks.set_callback(events.append)
    pipeline = GDancePipeline(tiny_run_config, callbacks)
    result = pipeline.process_command('synth', out_dir=str(tmp_path), seed=3)
    assert result['success'] and result['count'] == 3
    assert events[-1]['status'] == 'success'
    assert all(event['run_id'] == 'synth-3' for event in events)


def test_train_tool_writes_checkpoint_and_losses(tmp_path, tiny_run_config):
    pipeline = GDancePipeline(tiny_run_config)
    pipeline.process_command('synth', out_dir=str(tmp_path / 'data'), seed=0)
    result = pipeline.process_command('train', data_dir=str(tmp_path / 'data'), out_dir=str(tmp_path / 'run'),
                                      seed=1)
    assert result['success'] and result['steps'] == 2
    assert os.path.exists(result['checkpoint']) and os.path.exists(result['checkpoint'] + '.json')
    losses = load_loss_csv(result['losses'])
    assert list(losses.columns) == ['step', 'simple', 'vel', 'fk', 'contact', 'dist', 'total']
    assert len(losses) == 2


def test_train_tool_rejects_music_dimension_mismatch(tmp_path, tiny_run_config):
    pipeline = GDancePipeline(tiny_run_config)
    pipeline.process_command('synth', out_dir=str(tmp_path / 'data'), seed=0)
    tiny_run_config.decoder.music_dim = 7
    result = GDancePipeline(tiny_run_config).process_command('train', data_dir=str(tmp_path / 'data'),
                                                             out_dir=str(tmp_path / 'run'), seed=1)
    assert result['error_type'] == 'config_error' and result['key'] == 'decoder.music_dim'


def test_rechunk_music_regroups_blocks(make_music):
    blocks = [make_music(seed=s, frames=f) for s, f in enumerate([5, 7, 9])]
    chunks = list(rechunk_music(iter(blocks), 8))
    assert [c.frames for c in chunks] == [8, 8, 5]
    single = list(rechunk_music(iter([make_music(frames=9)]), 8))
    assert [c.frames for c in single] == [8]


def test_history_manager_windows(tmp_path):
    history = TrainingHistoryManager(max_history_length=3)
    for step in range(5):
        history.add_step(step, {'simple': step, 'vel': 0, 'fk': 0, 'contact': 0, 'dist': 0, 'total': 2.0 * step})
    assert len(history) == 3
    assert history.recent_mean(2) == 7.0
    assert history.window_mean(2, 4) == 5.0
    path = str(tmp_path / 'losses.csv')
    history.save_csv(path)
    assert load_loss_csv(path)['step'].tolist() == [2, 3, 4]
    history.clear_history()
    assert len(history) == 0


def test_callback_history_survives_failing_callback():
    callbacks = StepCallbackSystem()

    def broken(event):
        raise RuntimeError('sink closed')

    callbacks.set_callback(broken)
    callbacks.set_run_id('train-1')
    callbacks.emit_text('step 1')
    callbacks.emit_table([{'file': 'a.gdm', 'pfc': 0.1}], '逐文件指标', status='success')
    history = callbacks.get_output_history()
    assert [event['data_type'] for event in history] == ['text', 'table']
    assert history[-1]['run_id'] == 'train-1' and history[-1]['status'] == 'success'
    callbacks.clear_history()
    assert callbacks.get_output_history() == []


def test_resume_continues_step_counter(tmp_path, tiny_run_config):
    pipeline = GDancePipeline(tiny_run_config)
    data = str(tmp_path / 'data')
    pipeline.process_command('synth', out_dir=data, seed=0)
    first = pipeline.process_command('train', data_dir=data, out_dir=str(tmp_path / 'first'), seed=1)
    assert first['step'] == 2 and read_checkpoint_meta(first['checkpoint'])['step'] == 2

    resumed = pipeline.process_command('train', data_dir=data, out_dir=str(tmp_path / 'resumed'), seed=1,
                                       resume=first['checkpoint'])
    assert resumed['success'] and resumed['step'] == 4
    assert read_checkpoint_meta(resumed['checkpoint'])['step'] == 4
    resumed_losses = load_loss_csv(resumed['losses'])
    assert resumed_losses['step'].tolist() == [2, 3]

    dataset = [(rearrange_dancers(motion)[0], music) for motion, music in read_dataset(data)]
    replay = train_loop(dataset, tiny_run_config, 1, decoder=load_checkpoint(first['checkpoint']))
    assert replay.history.to_frame()['step'].tolist() == [0, 1]
    assert not np.allclose(replay.history.to_frame()['total'].to_numpy(), resumed_losses['total'].to_numpy())


def test_step_callback_routes_events_to_log(tmp_path, tiny_run_config, caplog):
    pipeline = GDancePipeline(tiny_run_config, StepCallbackSystem(keep_history=False))
    pipeline.set_step_callback(logging_callback(logging.getLogger('gdance.events')))
    with caplog.at_level(logging.DEBUG, logger='gdance.events'):
        result = pipeline.process_command('synth', out_dir=str(tmp_path), seed=5)
    assert result['success']
    messages = [record for record in caplog.records if record.name == 'gdance.events']
    assert any(record.levelno == logging.INFO for record in messages)
    assert any(record.levelno == logging.DEBUG for record in messages)
    assert pipeline.step_callback_system.get_output_history() == []
