#!/usr/bin/env python3
"""
Tests for the online planner: wire format, warm-up, window planning and streaming.
"""

import io
import os
import threading

import numpy as np
import pandas as pd
import pytest
import torch

import config
from data_io import synth_dataset, synth_generate
from denoiser import DenoiserConfig, ReactionDenoiser
from diffusion_core import build_schedule
from errors import InvalidInputError, ParseError, StateError, StreamExhaustedError
from motion_core import P_SLICE, R_SLICE, SMPL22, Y_JOINT_SLICE, GlobalPose, MotionClip, NormalizationStats, canonicalize
from online_planner import (
    LATENCY_COLUMNS, REWARD_COLUMNS, FrameWriter, ListSink, PlannerConfig, ReactionPlanner, StreamFrame,
    benchmark_latency, clip_source, read_stream,
)

H, K, WARMUP = 4, 5, 6


def _tiny_model(seed=0):
    torch.manual_seed(seed)
    cfg = DenoiserConfig(layers=1, hidden=16, heads=2, time_embed_dim=8, text_embed_dim=8,
                         history_frames=H, window_frames=K)
    return ReactionDenoiser(cfg).double()


def _planner(**overrides):
    settings = dict(warmup_frames=WARMUP, init_mode='rest', seed=3)
    settings.update(overrides)
    return ReactionPlanner(_tiny_model(), NormalizationStats.identity(), build_schedule(2),
                           planner_config=PlannerConfig(**settings))


def _actor(frames, seed=0):
    return synth_generate('mirror', max(frames, H + K), seed, history=H, window=K).actor.slice(0, frames)


# --- wire format ------------------------------------------------------------

def test_frame_line_round_trip():
    pose = GlobalPose(SMPL22.rest_pose((0.5, -1.0), 0.3), 0.3)
    frame = StreamFrame(12, pose, 'wave back')
    parsed = StreamFrame.from_line(frame.to_line())
    assert parsed.t == 12 and parsed.text == 'wave back'
    assert np.array_equal(parsed.pose.joint_positions, pose.joint_positions)
    assert parsed.pose.root_yaw == 0.3
    assert 'text' not in StreamFrame(0, pose).to_line()


def test_malformed_stream_lines_report_line_numbers():
    good = StreamFrame(0, GlobalPose(SMPL22.rest_pose(), 0.0)).to_line()
    with pytest.raises(ParseError) as info:
        list(read_stream(io.StringIO(good + '\n\n{"t": 1, "pose": [0.0]\n'), 'actor.jsonl'))
    assert info.value.line == 3
    with pytest.raises(ParseError):
        StreamFrame.from_line('{"t": 1, "pose": [0.0, 1.0], "yaw": 0}')
    with pytest.raises(ParseError):
        StreamFrame.from_line('{"t": "1", "pose": ' + str([0.0] * 66) + ', "yaw": 0}')


# --- warm-up ----------------------------------------------------------------

def test_warmup_buffers_one_second():
    planner = _planner(warmup_frames=30)
    state = planner.warmup(clip_source(_actor(40)))
    assert state.window_index == 0
    assert len(state.actor) == 30 and len(state.reactor) == 30
    assert state.clock == 29


def test_warmup_stream_exhausted():
    with pytest.raises(StreamExhaustedError):
        _planner(warmup_frames=30).warmup(clip_source(_actor(29)))


def test_rest_init_fills_reactor_with_rest_pose():
    state = _planner().warmup(clip_source(_actor(WARMUP)))
    reactor = state.reactor.clip()
    assert all(np.array_equal(reactor.positions[i], reactor.positions[0]) for i in range(WARMUP))
    yaw = reactor.root_yaw[0]
    rest = SMPL22.rest_pose((reactor.positions[0, 0, 0], reactor.positions[0, 0, 2]), yaw)
    assert np.allclose(reactor.positions[0], rest, atol=1e-12)


def test_rest_reactor_faces_the_actor():
    actor = _actor(WARMUP)
    reactor = _planner().warmup(clip_source(actor)).reactor.clip()
    offset = actor.positions[0, 0] - reactor.positions[0, 0]
    offset[1] = 0.0
    assert np.linalg.norm(offset) == pytest.approx(config.REACTOR_START_DISTANCE)
    facing = np.array([np.sin(reactor.root_yaw[0]), 0.0, np.cos(reactor.root_yaw[0])])
    assert facing @ offset == pytest.approx(config.REACTOR_START_DISTANCE)


def test_sampled_init_is_finite_and_seeded():
    first = _planner(init_mode='sample').warmup(clip_source(_actor(WARMUP))).reactor.clip()
    second = _planner(init_mode='sample').warmup(clip_source(_actor(WARMUP))).reactor.clip()
    assert len(first) == WARMUP
    assert np.isfinite(first.positions).all()
    assert np.array_equal(first.positions, second.positions)


def test_given_reactor_prefix():
    record = synth_generate('mirror', 20, 1, history=H, window=K)
    state = _planner().warmup(clip_source(record.actor), record.reactor)
    assert np.array_equal(state.reactor.clip().positions, record.reactor.positions[:WARMUP])


def test_timestamps_must_increase():
    frames = list(clip_source(_actor(WARMUP)))
    frames[3].t = frames[2].t
    with pytest.raises(InvalidInputError):
        _planner().warmup(frames)


def test_invalid_init_mode():
    with pytest.raises(InvalidInputError):
        PlannerConfig(init_mode='random')


# --- window planning --------------------------------------------------------

def test_plan_appends_exactly_one_window():
    planner = _planner()
    state = planner.warmup(clip_source(_actor(WARMUP)))
    plan = planner.plan_next_window(state)
    assert len(state.reactor) == WARMUP + K
    assert len(state.actor) == WARMUP
    assert len(plan.reactor) == K and plan.predicted_actor.shape == (K, 22, 3)
    assert plan.features.shape == (K, config.FRAME_DIM)
    assert state.window_index == 1
    assert plan.boundary_gap >= 0 and plan.joint_gap >= 0
    with pytest.raises(StateError):
        planner.plan_next_window(state)


def test_identical_state_and_seed_give_identical_windows():
    plans = []
    for _ in range(2):
        planner = _planner()
        plans.append(planner.plan_next_window(planner.warmup(clip_source(_actor(WARMUP)))))
    assert np.array_equal(plans[0].reactor.positions, plans[1].reactor.positions)
    assert np.array_equal(plans[0].features, plans[1].features)


def test_emitted_frames_reproduce_generated_features():
    planner = _planner()
    plan = planner.plan_next_window(planner.warmup(clip_source(_actor(WARMUP))))
    actor = MotionClip(plan.predicted_actor, np.zeros(K))
    features, _ = canonicalize(plan.reactor, actor)
    for part in (R_SLICE, P_SLICE, Y_JOINT_SLICE):
        np.testing.assert_allclose(features[:, part], plan.features[:, part], atol=1e-5)


def test_text_applies_at_next_window_boundary():
    planner = _planner()
    frames = clip_source(_actor(WARMUP + K), 'mirror the actor')
    state = planner.warmup(frames)
    assert state.text == 'mirror the actor'
    planner.plan_next_window(state)
    update = next(frames)
    update.text = 'wave back'
    state.accept_actor(update)
    assert state.text == 'mirror the actor'
    for frame in list(frames)[:K - 1]:
        state.accept_actor(frame)
    assert planner.plan_next_window(state).text == 'wave back'


# --- streaming --------------------------------------------------------------

def test_replay_emits_one_frame_per_actor_frame():
    sink = ListSink()
    report = _planner().run_stream(clip_source(_actor(WARMUP + 10 * K)), sink)
    assert report.windows == 10
    assert report.frames_emitted == len(sink.frames) == 10 * K
    assert [frame.t for frame in sink.frames] == list(range(WARMUP, WARMUP + 10 * K))
    stats = report.latency_summary()
    assert set(stats) == {'min_ms', 'mean_ms', 'p95_ms'}
    assert 0 <= stats['min_ms'] <= stats['mean_ms'] <= max(report.latencies_ms)
    assert len(report.boundary_gaps) == 10


def test_stream_ending_inside_a_window():
    sink = ListSink()
    report = _planner().run_stream(clip_source(_actor(WARMUP + 2 * K + 2)), sink)
    assert report.windows == 2
    assert report.frames_emitted == 2 * K + 2
    assert len(report.state.reactor) == len(report.state.actor)


def _stream_text(**overrides):
    handle = io.StringIO()
    _planner(**overrides).run_stream(clip_source(_actor(WARMUP + 4 * K), 'mirror the actor'), FrameWriter(handle))
    return handle.getvalue()


def test_seeded_runs_are_byte_identical():
    first = _stream_text()
    assert first == _stream_text()
    assert len(first.splitlines()) == 4 * K


def test_threaded_mode_matches_deterministic_mode():
    assert _stream_text(deterministic=False) == _stream_text()


def test_pause_and_resume_match_one_run():
    actor = _actor(WARMUP + 5 * K)
    whole = ListSink()
    _planner().run_stream(clip_source(actor), whole)

    planner = _planner()
    frames = clip_source(actor)
    resumed = ListSink()
    first = planner.run_stream(frames, resumed, max_windows=2)
    assert first.windows == 2
    second = planner.run_stream(frames, resumed, state=first.state)
    assert second.windows == 3
    assert [f.to_line() for f in resumed.frames] == [f.to_line() for f in whole.frames]


def test_text_source_is_polled():
    sink = ListSink()
    calls = []

    def latest():
        calls.append(1)
        return 'wave back'

    report = _planner().run_stream(clip_source(_actor(WARMUP + 3 * K)), sink, text_source=latest)
    assert len(calls) == report.windows == 3
    assert report.state.text == 'wave back'


class _BrokenSink:
    def __init__(self, after):
        self.after = after
        self.frames = 0

    def write(self, frame):
        if self.frames == self.after:
            raise OSError('pipe closed')
        self.frames += 1


@pytest.mark.parametrize('deterministic', [True, False])
def test_sink_failure_returns_partial_report(deterministic):
    report = _planner(deterministic=deterministic).run_stream(clip_source(_actor(WARMUP + 4 * K)), _BrokenSink(7))
    assert report.aborted
    assert 'pipe closed' in report.error
    assert report.frames_emitted == 7
    assert 'error' in report.summary()


def _failing_source(frames, after):
    yield from list(clip_source(frames))[:after]
    raise ParseError('actor.jsonl', after + 1, 'not JSON')


def test_threaded_runs_leave_no_threads_behind():
    baseline = threading.active_count()
    long_actor = _actor(WARMUP + 20 * K)
    for _ in range(3):
        aborted = _planner(deterministic=False, queue_depth=1).run_stream(clip_source(long_actor), _BrokenSink(7))
        assert aborted.aborted
        capped = _planner(deterministic=False, queue_depth=1).run_stream(clip_source(long_actor), ListSink(),
                                                                          max_windows=1)
        assert capped.windows == 1
        with pytest.raises(ParseError):
            _planner(deterministic=False).run_stream(_failing_source(long_actor, WARMUP + 2 * K), ListSink())
    assert threading.active_count() == baseline


def test_warmup_goals_can_be_emitted():
    sink = ListSink()
    _planner(emit_warmup=True).run_stream(clip_source(_actor(WARMUP + K)), sink)
    assert len(sink.frames) == WARMUP + K
    rest = sink.frames[0].pose.joint_positions
    assert all(np.array_equal(frame.pose.joint_positions, rest) for frame in sink.frames[:WARMUP])


def test_tracker_rewards_are_written(tmp_path):
    path = tmp_path / 'rewards.csv'
    report = _planner(track=True).run_stream(clip_source(_actor(WARMUP + 3 * K)), ListSink(), reward_path=path)
    rewards = pd.read_csv(path)
    assert list(rewards.columns) == REWARD_COLUMNS
    assert len(rewards) == report.windows == 3
    assert list(rewards['window']) == [0, 1, 2]
    assert rewards['w'].between(0, 1).all()
    assert (rewards['r_total'] >= 0).all()
    assert report.state.tracker_pose is not None


def test_benchmark_latency_table():
    table = benchmark_latency(_tiny_model(), steps_list=[1, 4], repeats=2)
    assert list(table.columns) == LATENCY_COLUMNS
    assert list(table['T']) == [1, 4]
    assert (table['mean_ms'] > 0).all()
    with pytest.raises(InvalidInputError):
        benchmark_latency(_tiny_model(), repeats=0)


# --- acceptance (long) ------------------------------------------------------

ACCEPTANCE = pytest.mark.skipif(os.getenv('REACTION_ACCEPTANCE') != '1', reason='long acceptance run')


@ACCEPTANCE
def test_trained_planner_follows_the_mirror_rule():
    from training import TrainPlan, train

    records = synth_dataset('mirror', 8, 200, seed=1)
    torch.manual_seed(0)
    model = ReactionDenoiser(DenoiserConfig.from_profile('tiny'))
    result = train(records, model, build_schedule(), TrainPlan(max_iters=20_000, batch_size=8), show_progress=False)

    test_record = synth_generate('mirror', config.WARMUP_FRAMES + 20 * config.WINDOW_FRAMES, seed=99)
    planner = ReactionPlanner(model, result.stats, build_schedule(), planner_config=PlannerConfig(seed=7))
    sink = ListSink()
    report = planner.run_stream(clip_source(test_record.actor, test_record.label), sink,
                                reactor_prefix=test_record.reactor)
    assert report.windows == 20

    emitted = np.stack([frame.pose.joint_positions for frame in sink.frames])
    truth = test_record.reactor.positions[config.WARMUP_FRAMES:]
    five_windows = 5 * config.WINDOW_FRAMES
    error = np.linalg.norm(emitted[:five_windows] - truth[:five_windows], axis=-1).mean()
    assert error < 0.05
    assert np.mean(report.boundary_gaps) < 0.02
    assert report.latency_summary()['p95_ms'] < config.LATENCY_TARGET_MS


@ACCEPTANCE
def test_latency_grows_with_diffusion_steps():
    torch.manual_seed(0)
    table = benchmark_latency(ReactionDenoiser(DenoiserConfig.from_profile('tiny')), steps_list=[2, 8, 100], repeats=5)
    latency = table.set_index('T')['mean_ms']
    assert table.loc[table['T'] == 8, 'p95_ms'].item() < config.LATENCY_TARGET_MS
    assert latency[100] >= 10 * latency[2]
