"""
扩散测试：调度、三角噪声计划、采样器与流式引擎
"""

import numpy as np
import pytest

from gdance.diffusion import (Conditioning, NoisePlan, OracleDenoiser, StreamingEngine, assemble_stream, ddpm_step,
                              frame_levels, make_schedule, max_phase, q_sample, sample_offline, sample_tns,
                              schedule_summary, segment_bounds, stream_generate, tns_levels, tns_noise)
from gdance.exceptions import InvalidTimestepError, ScheduleError, ShapeError, StreamError
from gdance.numerics import RngStream
from gdance.temporal import identity_swap


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_schedule_shape_and_monotonicity(kind):
    schedule = make_schedule(1000, kind)
    betas = schedule.betas[1:]
    assert np.all((betas > 0) & (betas < 1))
    assert np.all(np.diff(schedule.alpha_bars) < 0)
    assert schedule.alpha_bars[0] == 1.0
    assert schedule.alpha_bars[1] > 0.999
    assert schedule_summary(schedule)['T'] == 1000


def test_schedule_errors():
    with pytest.raises(ScheduleError):
        make_schedule(0)
    with pytest.raises(ScheduleError):
        make_schedule(10, 'quadratic')


def test_q_sample_preserves_unit_variance():
    schedule = make_schedule(1000)
    generator = RngStream(0).generator
    x0 = generator.standard_normal(100000)
    noise = generator.standard_normal(100000)
    for t in (1, 250, 1000):
        assert abs(q_sample(x0, t, noise, schedule).var() - 1.0) < 0.02
    np.testing.assert_array_equal(q_sample(x0, 0, noise, schedule), x0)
    with pytest.raises(InvalidTimestepError):
        q_sample(x0, 1001, noise, schedule)


def test_tns_levels_staircase():
    generator = RngStream(1).generator
    for _ in range(1000):
        segments = int(generator.integers(1, 8))
        T = int(generator.integers(1, 200))
        phase = int(generator.integers(0, max_phase(segments, T) + 1))
        plan = tns_levels(phase, segments, T)
        assert np.all(np.diff(plan.levels) >= 0)
        assert plan.levels.min() >= 0 and plan.levels.max() <= T
    assert tns_levels(0, 4, 100).levels.tolist() == [0, 0, 0, 0]
    assert tns_levels(max_phase(4, 100), 4, 100).levels.tolist() == [100, 100, 100, 100]
    assert tns_levels(60, 4, 100).levels.tolist() == [0, 10, 35, 60]
    with pytest.raises(ScheduleError):
        tns_levels(max_phase(4, 100) + 1, 4, 100)


def test_tns_noise_keeps_clean_segments_and_shares_levels():
    schedule = make_schedule(100)
    x0 = RngStream(2).generator.standard_normal((40, 2, 151))
    plan = tns_levels(85, 4, 100, segment_len=10)
    assert plan.levels.tolist() == [10, 35, 60, 85]
    plan = NoisePlan(4, 10, 0, np.array([0, 0, 35, 85]), 25)
    rng = RngStream(3)
    noised = tns_noise(x0, plan, rng, schedule)
    np.testing.assert_array_equal(noised[:20], x0[:20])

    for s, bound in enumerate(segment_bounds(40, 10)):
        if plan.levels[s] == 0:
            continue
        noise = rng.substream(s).generator.standard_normal((10, 2, 151))
        implied = []
        for frame in range(bound.start, bound.stop):
            design = np.stack([x0[frame].ravel(), noise[frame - bound.start].ravel()], axis=1)
            (a, _), *_ = np.linalg.lstsq(design, noised[frame].ravel(), rcond=None)
            implied.append(a * a)
        np.testing.assert_allclose(implied, schedule.alpha_bars[plan.levels[s]], atol=1e-9)


def test_frame_levels_checks_segment_count():
    plan = tns_levels(10, 3, 10, segment_len=4)
    assert frame_levels(plan, 12).tolist() == [2] * 4 + [6] * 4 + [10] * 4
    with pytest.raises(ShapeError):
        frame_levels(plan, 20)


def test_ddpm_step_frame_rules():
    schedule = make_schedule(10)
    x0 = RngStream(4).generator.standard_normal((3, 2, 151))
    x_t = RngStream(5).generator.standard_normal((3, 2, 151))
    cond = Conditioning(np.zeros((3, 4)), identity_swap(2), np.arange(3))
    stepped = ddpm_step(OracleDenoiser(x0), x_t, np.array([0, 1, 5]), cond, RngStream(6), schedule)
    np.testing.assert_array_equal(stepped[0], x_t[0])
    np.testing.assert_array_equal(stepped[1], x0[1])
    assert not np.allclose(stepped[2], x_t[2])
    with pytest.raises(InvalidTimestepError):
        ddpm_step(OracleDenoiser(x0), x_t, np.zeros(3, dtype=np.int64), cond, RngStream(6), schedule)


def test_oracle_offline_sampling_reconstructs_motion(make_motion):
    motion = make_motion(seed=7, frames=12, dancers=2)
    music = RngStream(8).generator.standard_normal((12, 5))
    result = sample_offline(OracleDenoiser(motion.poses), music, identity_swap(2), 12, make_schedule(50),
                            RngStream(9))
    assert np.mean((result.poses - motion.poses) ** 2) < 1e-3
    assert result.steps == 50


def test_oracle_tns_sampling_reconstructs_motion(make_motion):
    motion = make_motion(seed=10, frames=25, dancers=3)
    music = RngStream(11).generator.standard_normal((25, 4))
    result = sample_tns(OracleDenoiser(motion.poses), music, identity_swap(3), 25, make_schedule(30), RngStream(12),
                        segment_len=10, window_segments=3)
    assert np.mean((result.poses - motion.poses) ** 2) < 1e-3
    assert result.steps == 2 * 10 + 30


def test_streaming_matches_offline_tns_rollout(make_motion):
    length, segment_len, window = 120, 20, 4
    motion = make_motion(seed=13, frames=length, dancers=2)
    music = RngStream(14).generator.standard_normal((length, 5))
    schedule = make_schedule(40)
    swap = identity_swap(2)

    offline = sample_tns(OracleDenoiser(motion.poses), music, swap, length, schedule, RngStream(15),
                         segment_len=segment_len, window_segments=window)
    source = [music[b] for b in segment_bounds(length, segment_len)]
    emitted = list(stream_generate(OracleDenoiser(motion.poses), source, schedule, window, swap, RngStream(15)))

    assert [s.index for s in emitted] == list(range(6))
    assert all(a.tick <= b.tick for a, b in zip(emitted, emitted[1:]))
    streamed = assemble_stream(emitted)
    assert np.max(np.abs(streamed.poses - offline.poses)) < 1e-6


def test_streaming_engine_rejects_dimension_change():
    engine = StreamingEngine(OracleDenoiser(np.zeros((8, 2, 151))), make_schedule(4), identity_swap(2), RngStream(0))
    engine.admit(np.zeros((4, 3)))
    with pytest.raises(StreamError):
        engine.admit(np.zeros((4, 5)))
    with pytest.raises(StreamError):
        StreamingEngine(None, make_schedule(4), identity_swap(2), RngStream(0), window_segments=0)


def test_assemble_stream_requires_order(make_motion):
    engine = StreamingEngine(OracleDenoiser(make_motion(frames=8).poses), make_schedule(2), identity_swap(2),
                             RngStream(0), window_segments=1)
    engine.admit(np.zeros((4, 3)))
    engine.admit(np.zeros((4, 3)))
    emitted = engine.tick() + engine.tick()
    assert [s.index for s in emitted] == [0, 1]
    with pytest.raises(StreamError):
        assemble_stream(list(reversed(emitted)))


def test_oracle_rollouts_contract_toward_target(make_motion):
    schedule = make_schedule(20)
    x0 = make_motion(seed=16, frames=12, dancers=2).poses
    cond = Conditioning(np.zeros((12, 5)), identity_swap(2), np.arange(12))
    errors = []
    for seed in range(16):
        root = RngStream(seed)
        x = q_sample(x0, schedule.T, root.substream(0).generator.standard_normal(x0.shape), schedule)
        curve = [np.mean((x - x0) ** 2)]
        for t in range(schedule.T, 0, -1):
            x = ddpm_step(OracleDenoiser(x0), x, np.full(12, t), cond, root.substream(1, t), schedule)
            curve.append(np.mean((x - x0) ** 2))
        errors.append(curve)
    mean_curve = np.mean(errors, axis=0)
    assert np.all(np.diff(mean_curve) < 0)
    assert mean_curve[-1] == 0.0


@pytest.mark.parametrize("T, window", [(40, 4), (37, 4), (5, 3), (6, 1)])
def test_first_segment_emitted_within_window_ticks(T, window):
    frames = 4 * 12
    engine = StreamingEngine(OracleDenoiser(np.zeros((frames, 2, 151))), make_schedule(T), identity_swap(2),
                             RngStream(0), window_segments=window)
    first_tick = None
    for tick in range(1, 13):
        engine.admit(np.zeros((4, 3)))
        if engine.tick() and first_tick is None:
            first_tick = tick
    assert first_tick is not None and first_tick <= window


def test_context_stays_bounded(make_motion):
    motion = make_motion(seed=17, frames=40, dancers=2)
    engine = StreamingEngine(OracleDenoiser(motion.poses), make_schedule(6), identity_swap(2), RngStream(1),
                             window_segments=2, context_segments=2)
    source = [np.zeros((5, 3)) for _ in range(8)]
    count = 0
    for _ in stream_generate(None, source, make_schedule(6), 2, identity_swap(2), RngStream(1), engine=engine):
        count += 1
        assert len(engine.context) <= 2 and len(engine.history_music) <= 2
    assert count == 8
    assert [segment.index for segment in engine.context] == [6, 7]
