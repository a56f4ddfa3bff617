#!/usr/bin/env python3
"""
Online Planner

Auto-regressive reaction planning against a live (or replayed) actor stream:
one second of warm-up, then window after window of k reactor frames sampled from
the last h frames of interaction history and emitted frame by frame.
"""

import json
import logging
import math
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

import config
from diffusion_core import GuidanceConfig, NoiseSchedule, build_schedule, sample_window
from errors import InvalidInputError, ParseError, SinkError, StateError, StreamExhaustedError
from motion_core import (
    POSE_MASK, SMPL22, AgentRole, CanonicalTransform, GlobalPose, MotionClip, NormalizationStats, Skeleton,
    canonical_history, decode_actor_positions, denormalize_features, normalize_features, recover,
)
from reaction_reward import RewardConfig, combined_reward, kinematic_tracker_step

logger = logging.getLogger(__name__)

REWARD_COLUMNS = ['iter', 'window', 'w', 'r_imitation', 'r_default', 'r_root', 'r_total']
LATENCY_COLUMNS = ['T', 'mean_ms', 'p95_ms']
POSE_NUMBERS = config.JOINT_COUNT * 3


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------

@dataclass
class StreamFrame:
    """One agent frame on the wire: {"t", "pose" (66 numbers), "yaw", optional "text"}."""

    t: int
    pose: GlobalPose
    text: Optional[str] = None

    def to_line(self) -> str:
        record = {
            't': int(self.t),
            'pose': [float(v) for v in np.asarray(self.pose.joint_positions).reshape(-1)],
            'yaw': float(self.pose.root_yaw),
        }
        if self.text is not None:
            record['text'] = self.text
        return json.dumps(record)

    @classmethod
    def from_line(cls, line: str, line_number: int = 0, source: str = '<stream>') -> 'StreamFrame':
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(source, line_number, f"invalid JSON: {e.msg}")
        if not isinstance(record, dict):
            raise ParseError(source, line_number, "frame must be a JSON object")

        t = record.get('t')
        if isinstance(t, bool) or not isinstance(t, int):
            raise ParseError(source, line_number, "'t' must be an integer frame index")
        pose = record.get('pose')
        if not isinstance(pose, list) or len(pose) != POSE_NUMBERS:
            raise ParseError(source, line_number, f"'pose' must hold {POSE_NUMBERS} numbers")
        try:
            positions = np.asarray(pose, dtype=np.float64).reshape(config.JOINT_COUNT, 3)
            yaw = float(record.get('yaw', 0.0))
        except (TypeError, ValueError):
            raise ParseError(source, line_number, "pose and yaw must be numeric")
        if not (np.isfinite(positions).all() and math.isfinite(yaw)):
            raise ParseError(source, line_number, "non-finite pose value")
        text = record.get('text')
        if text is not None and not isinstance(text, str):
            raise ParseError(source, line_number, "'text' must be a string")
        return cls(t, GlobalPose(positions, yaw), text)


def read_stream(handle, source: str = '<stream>') -> Iterator[StreamFrame]:
    """StreamFrames from a line-oriented text handle; blank lines are skipped."""
    for number, line in enumerate(handle, start=1):
        if line.strip():
            yield StreamFrame.from_line(line, number, source)


def clip_source(clip: MotionClip, text: Optional[str] = None, start_t: int = 0) -> Iterator[StreamFrame]:
    """Replay a recorded clip as a stream; the text label rides on the first frame."""
    for i in range(len(clip)):
        yield StreamFrame(start_t + i, clip.pose(i), text if i == 0 else None)


class FrameWriter:
    """Sink writing one JSON line per reactor frame."""

    def __init__(self, handle):
        self.handle = handle

    def write(self, frame: StreamFrame):
        self.handle.write(frame.to_line() + '\n')
        self.handle.flush()


class ListSink:
    def __init__(self):
        self.frames: List[StreamFrame] = []

    def write(self, frame: StreamFrame):
        self.frames.append(frame)


class TcpStream:
    """Accepts a single TCP client; actor frames are read from it and reactor frames written back."""

    def __init__(self, host: str, port: int, timeout: Optional[float] = None):
        self.server = socket.create_server((host, port))
        self.server.settimeout(timeout)
        logger.info(f"🔄 Waiting for an actor stream on {host}:{port}")
        self.connection, address = self.server.accept()
        logger.info(f"✅ Actor stream connected from {address[0]}:{address[1]}")
        self.reader = self.connection.makefile('r', encoding='utf-8')
        self.writer = self.connection.makefile('w', encoding='utf-8')

    def close(self):
        for closable in (self.reader, self.writer, self.connection, self.server):
            try:
                closable.close()
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# Planner state
# ---------------------------------------------------------------------------

class MotionBuffer:
    """Append-only global frames of one agent."""

    def __init__(self, agent_id: AgentRole, fps: float = config.FPS):
        self.agent_id = AgentRole(agent_id)
        self.fps = fps
        self.positions: List[np.ndarray] = []
        self.yaws: List[float] = []

    def __len__(self):
        return len(self.positions)

    def append(self, pose: GlobalPose):
        self.positions.append(np.asarray(pose.joint_positions, dtype=np.float64).copy())
        self.yaws.append(float(pose.root_yaw))

    def extend(self, clip: MotionClip):
        for i in range(len(clip)):
            self.append(clip.pose(i))

    def truncate(self, length: int):
        del self.positions[length:]
        del self.yaws[length:]

    def clip(self, last: Optional[int] = None) -> MotionClip:
        start = 0 if last is None else max(len(self) - last, 0)
        positions = np.stack(self.positions[start:]) if len(self) else np.zeros((0, config.JOINT_COUNT, 3))
        return MotionClip(positions, self.yaws[start:], self.fps, self.agent_id)


@dataclass
class PlannerState:
    reactor: MotionBuffer
    actor: MotionBuffer
    generator: torch.Generator
    text: Optional[str] = None
    pending_text: Optional[str] = None
    clock: int = -1                      # timestamp of the newest actor frame
    window_index: int = 0
    timestamps: List[int] = field(default_factory=list)
    tracker_pose: Optional[GlobalPose] = None
    last_w: float = 0.0

    def accept_text(self, frame: StreamFrame):
        if frame.text is not None:
            self.pending_text = frame.text or None

    def accept_actor(self, frame: StreamFrame):
        if frame.t <= self.clock:
            raise InvalidInputError(f"actor timestamps must increase: {frame.t} after {self.clock}")
        self.accept_text(frame)
        self.actor.append(frame.pose)
        self.timestamps.append(int(frame.t))
        self.clock = int(frame.t)


@dataclass
class PlannerConfig:
    warmup_frames: int = config.WARMUP_FRAMES
    init_mode: str = config.WARMUP_INIT
    start_distance: float = config.REACTOR_START_DISTANCE
    paced: bool = False
    deterministic: bool = True
    seed: int = 0
    queue_depth: int = config.QUEUE_DEPTH
    emit_warmup: bool = False
    track: bool = False
    blend_rate: float = config.TRACKER_BLEND_RATE
    reward: RewardConfig = field(default_factory=RewardConfig)

    def __post_init__(self):
        if self.init_mode not in ('sample', 'rest'):
            raise InvalidInputError(f"warm-up init mode must be 'sample' or 'rest', got {self.init_mode!r}")
        if self.warmup_frames < 1:
            raise InvalidInputError("warm-up needs at least one frame")
        if self.queue_depth < 1:
            raise InvalidInputError("queue depth must be >= 1")
        if not 0.0 < self.blend_rate <= 1.0:
            raise InvalidInputError(f"blend rate must lie in (0, 1], got {self.blend_rate}")


@dataclass
class WindowPlan:
    index: int
    reactor: MotionClip              # k new global reactor frames
    predicted_actor: np.ndarray      # (k, 22, 3) global actor joints the model expects
    features: np.ndarray             # (k, 443) generated physical features
    boundary_gap: float              # RMS pose-feature jump between last history and first generated frame
    joint_gap: float                 # mean joint distance between last buffered and first generated frame, m
    latency_ms: float
    text: Optional[str]


@dataclass
class StreamReport:
    windows: int = 0
    frames_emitted: int = 0
    latencies_ms: List[float] = field(default_factory=list)
    boundary_gaps: List[float] = field(default_factory=list)
    joint_gaps: List[float] = field(default_factory=list)
    rewards: List[Dict] = field(default_factory=list)
    aborted: bool = False
    error: Optional[str] = None
    state: Optional[PlannerState] = None

    def latency_summary(self) -> Dict[str, float]:
        if not self.latencies_ms:
            return {'min_ms': float('nan'), 'mean_ms': float('nan'), 'p95_ms': float('nan')}
        values = np.asarray(self.latencies_ms)
        return {'min_ms': float(values.min()), 'mean_ms': float(values.mean()),
                'p95_ms': float(np.percentile(values, 95))}

    def reward_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rewards, columns=REWARD_COLUMNS)

    def summary(self) -> Dict:
        result = {'windows': self.windows, 'frames_emitted': self.frames_emitted, **self.latency_summary()}
        if self.boundary_gaps:
            result['mean_boundary_gap'] = float(np.mean(self.boundary_gaps))
        if self.aborted:
            result['error'] = self.error
        return result


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

class _Pacer:
    """Holds each frame until its 30 fps slot when paced; passes through otherwise."""

    def __init__(self, fps: float, paced: bool):
        self.fps = fps
        self.paced = paced
        self.origin = None

    def wait(self, t: int):
        if not self.paced:
            return
        now = time.monotonic()
        if self.origin is None:
            self.origin = (now, t)
        start, first = self.origin
        delay = start + (t - first) / self.fps - now
        if delay > 0:
            time.sleep(delay)


class _DirectEmitter:
    def __init__(self, sink, pacer: _Pacer):
        self.sink = sink
        self.pacer = pacer
        self.count = 0

    def emit(self, frame: StreamFrame):
        self.pacer.wait(frame.t)
        try:
            self.sink.write(frame)
        except Exception as e:
            raise SinkError(f"sink rejected frame t={frame.t}: {e}") from e
        self.count += 1

    def finish(self):
        pass

    def close(self):
        pass


def _discard(pending: queue.Queue):
    while True:
        try:
            pending.get_nowait()
        except queue.Empty:
            return


class _ThreadedEmitter:
    """Emission context fed by a bounded queue; a full queue blocks the planner."""

    _DONE = object()

    def __init__(self, sink, pacer: _Pacer, depth: int):
        self.direct = _DirectEmitter(sink, pacer)
        self.queue = queue.Queue(maxsize=depth)
        self.error: Optional[SinkError] = None
        self.stopped = threading.Event()
        self.thread = threading.Thread(target=self._drain, daemon=True)
        self.thread.start()

    @property
    def count(self):
        return self.direct.count

    def _drain(self):
        while True:
            frame = self.queue.get()
            if frame is self._DONE:
                return
            if self.error is None and not self.stopped.is_set():
                try:
                    self.direct.emit(frame)
                except SinkError as e:
                    self.error = e

    def emit(self, frame: StreamFrame):
        if self.error is not None:
            raise self.error
        self.queue.put(frame)

    def finish(self):
        self.queue.put(self._DONE)
        self.thread.join()
        if self.error is not None:
            raise self.error

    def close(self):
        """Drop queued frames and join the drain thread; a no-op after `finish`."""
        if not self.thread.is_alive():
            return
        self.stopped.set()
        _discard(self.queue)
        self.queue.put(self._DONE)
        self.thread.join()


class _BackgroundSource:
    """Ingestion context: pulls actor frames ahead into a bounded queue."""

    _DONE = object()
    _POLL_S = 0.05

    def __init__(self, frames: Iterable[StreamFrame], depth: int):
        self.queue = queue.Queue(maxsize=depth)
        self.error = None
        self.finished = False
        self.stopped = threading.Event()
        self.thread = threading.Thread(target=self._pull, args=(iter(frames),), daemon=True)
        self.thread.start()

    def _offer(self, item) -> bool:
        while not self.stopped.is_set():
            try:
                self.queue.put(item, timeout=self._POLL_S)
                return True
            except queue.Full:
                continue
        return False

    def _pull(self, frames):
        try:
            for frame in frames:
                if not self._offer(frame):
                    return
        except Exception as e:
            self.error = e
        self._offer(self._DONE)

    def __iter__(self):
        return self

    def __next__(self):
        if self.finished:
            raise StopIteration
        item = self.queue.get()
        if item is self._DONE:
            self.finished = True
            if self.error:
                raise self.error
            raise StopIteration
        return item

    def close(self, timeout: float = 1.0):
        """Stop reading ahead; frames already queued are dropped."""
        self.finished = True
        self.stopped.set()
        _discard(self.queue)
        self.thread.join(timeout)
        if self.thread.is_alive():
            logger.warning("⚠️ Actor source is still blocked on a read; leaving its thread behind")


# ---------------------------------------------------------------------------
# Planner
# ---------------------------------------------------------------------------

class ReactionPlanner:
    """Warm-up, per-window planning and streaming around one trained denoiser."""

    def __init__(self, denoiser, stats: NormalizationStats, sched: Optional[NoiseSchedule] = None,
                 guidance: Optional[GuidanceConfig] = None, planner_config: Optional[PlannerConfig] = None,
                 skeleton: Skeleton = SMPL22, fps: float = config.FPS):
        self.denoiser = denoiser.eval()
        self.stats = stats
        self.sched = sched or build_schedule()
        self.guidance = guidance or GuidanceConfig()
        self.config = planner_config or PlannerConfig()
        self.skeleton = skeleton
        self.fps = fps
        self.history = denoiser.history_frames
        self.window = denoiser.window_frames
        if self.config.warmup_frames < self.history:
            raise InvalidInputError(
                f"warm-up of {self.config.warmup_frames} frames cannot fill a history of {self.history}")

    def _reactor_start(self, actor: MotionClip):
        """Reactor placement facing the actor's first frame, start_distance in front of it."""
        root = actor.positions[0, 0]
        yaw = float(actor.root_yaw[0])
        forward = np.array([math.sin(yaw), 0.0, math.cos(yaw)])
        position = np.array([root[0], 0.0, root[2]]) + self.config.start_distance * forward
        return position, yaw + math.pi

    def _sampled_prefix(self, start: np.ndarray, yaw: float, generator: torch.Generator) -> MotionClip:
        history = np.zeros((self.history, config.FRAME_DIM))
        sampled = sample_window(self.denoiser, history, None, self.sched, self.guidance, generator=generator)
        features = denormalize_features(sampled.detach().cpu().double().numpy(), self.stats)
        prefix = recover(features, CanonicalTransform(start, yaw), self.fps)
        count = self.config.warmup_frames
        if len(prefix) >= count:
            return prefix.slice(0, count)
        pad = MotionClip(np.repeat(prefix.positions[:1], count - len(prefix), axis=0),
                         np.repeat(prefix.root_yaw[:1], count - len(prefix)), self.fps, AgentRole.REACTOR)
        return pad.concat(prefix)

    def warmup(self, actor_source: Iterable[StreamFrame], reactor_prefix: Optional[MotionClip] = None) -> PlannerState:
        """
        Buffer the first second of actor motion and initialize the reactor prefix.

        A known `reactor_prefix` (e.g. the recorded reactor of a replayed pair) replaces
        the sampled or rest-pose initialization.
        """
        source = iter(actor_source)
        state = PlannerState(MotionBuffer(AgentRole.REACTOR, self.fps), MotionBuffer(AgentRole.ACTOR, self.fps),
                             torch.Generator().manual_seed(int(self.config.seed)))
        for _ in range(self.config.warmup_frames):
            frame = next(source, None)
            if frame is None:
                raise StreamExhaustedError(
                    f"actor stream ended after {len(state.actor)} of {self.config.warmup_frames} warm-up frames")
            state.accept_actor(frame)

        start, yaw = self._reactor_start(state.actor.clip())
        rest = GlobalPose(self.skeleton.rest_pose((start[0], start[2]), yaw), yaw)
        if reactor_prefix is not None:
            if len(reactor_prefix) < self.config.warmup_frames:
                raise InvalidInputError(f"reactor prefix needs {self.config.warmup_frames} frames, got {len(reactor_prefix)}")
            state.reactor.extend(reactor_prefix.slice(0, self.config.warmup_frames))
        elif self.config.init_mode == 'rest':
            for _ in range(self.config.warmup_frames):
                state.reactor.append(rest)
        else:
            state.reactor.extend(self._sampled_prefix(start, yaw, state.generator))
        state.tracker_pose = rest
        state.text = state.pending_text
        logger.info(f"🔄 Warm-up done: {len(state.actor)} actor frames buffered, {self.config.init_mode} reactor prefix")
        return state

    def plan_next_window(self, state: PlannerState) -> WindowPlan:
        """Sample the next k reactor frames from the last h frames of both buffers and append them."""
        if len(state.reactor) != len(state.actor):
            raise StateError(f"buffers out of step: reactor {len(state.reactor)}, actor {len(state.actor)} frames")
        if len(state.reactor) < self.history:
            raise StateError("planner is not warmed up")
        started = time.perf_counter()
        state.text = state.pending_text

        history = canonical_history(state.reactor.clip(self.history + 1), state.actor.clip(self.history + 1),
                                    self.history, self.skeleton)
        normalized = normalize_features(history, self.stats, limit=config.GENERATED_ZSCORE_LIMIT)
        sampled = sample_window(self.denoiser, normalized, state.text, self.sched, self.guidance,
                                generator=state.generator)
        predicted = denormalize_features(sampled.detach().cpu().double().numpy(), self.stats)

        tail = state.reactor.clip(self.history)
        transform = CanonicalTransform.at_frame(tail, 0)
        joined = recover(np.concatenate([history, predicted]), transform, self.fps)
        reactor = joined.slice(self.history, self.history + self.window)
        predicted_actor = decode_actor_positions(predicted, reactor)

        boundary_gap = float(np.sqrt(np.mean((predicted[0, POSE_MASK] - history[-1, POSE_MASK]) ** 2)))
        joint_gap = float(np.linalg.norm(reactor.positions[0] - tail.positions[-1], axis=-1).mean())
        state.reactor.extend(reactor)
        plan = WindowPlan(state.window_index, reactor, predicted_actor, predicted, boundary_gap, joint_gap,
                          1000.0 * (time.perf_counter() - started), state.text)
        state.window_index += 1
        logger.debug(f"📊 window {plan.index}: {plan.latency_ms:.1f} ms, gap {boundary_gap:.4f}, text={plan.text!r}")
        return plan

    def _track(self, state: PlannerState, goal: GlobalPose, actor_pose: GlobalPose):
        state.tracker_pose = kinematic_tracker_step(
            state.tracker_pose, goal, self.config.blend_rate, actor_pose.joint_positions[0],
            w=state.last_w, reward_config=self.config.reward)

    def _score_window(self, state: PlannerState, plan: WindowPlan, actual: np.ndarray) -> Dict:
        pose = state.tracker_pose
        rest = self.skeleton.rest_pose((pose.joint_positions[0, 0], pose.joint_positions[0, 2]), pose.root_yaw)
        breakdown = combined_reward(pose, plan.reactor.pose(len(actual) - 1), rest, plan.predicted_actor,
                                    actual, self.config.reward, actor_root=actual[-1, 0])
        state.last_w = breakdown.w
        return {'iter': state.clock, 'window': plan.index, **breakdown.to_dict()}

    def run_stream(self, actor_source: Iterable[StreamFrame], sink, text_source: Optional[Callable[[], Optional[str]]] = None,
                   state: Optional[PlannerState] = None, max_windows: Optional[int] = None,
                   reward_path=None, reactor_prefix: Optional[MotionClip] = None) -> StreamReport:
        """
        Plan and emit reactor windows until the actor stream ends.

        A window is planned once the first actor frame of its time span arrives, from
        history that excludes that frame; each reactor frame is emitted when its paired
        actor frame has been received. Passing a previous `state` resumes a paused run.
        `text_source` is polled at every window boundary; text carried by actor frames
        is applied the same way.
        """
        report = StreamReport()
        pacer = _Pacer(self.fps, self.config.paced)
        if self.config.deterministic:
            source = iter(actor_source)
            emitter = _DirectEmitter(sink, pacer)
        else:
            source = _BackgroundSource(actor_source, self.config.queue_depth * self.window)
            emitter = _ThreadedEmitter(sink, pacer, self.config.queue_depth * self.window)

        try:
            if state is None:
                state = self.warmup(source, reactor_prefix)
                if self.config.emit_warmup:
                    for t in state.timestamps:
                        emitter.emit(StreamFrame(t, state.tracker_pose))
            report.state = state

            while max_windows is None or report.windows < max_windows:
                first = next(source, None)
                if first is None:
                    break
                state.accept_text(first)
                if text_source is not None:
                    update = text_source()
                    if update is not None:
                        state.pending_text = update or None
                plan = self.plan_next_window(state)
                report.latencies_ms.append(plan.latency_ms)
                report.boundary_gaps.append(plan.boundary_gap)
                report.joint_gaps.append(plan.joint_gap)

                received = []
                for j in range(self.window):
                    frame = first if j == 0 else next(source, None)
                    if frame is None:
                        break
                    state.accept_actor(frame)
                    received.append(frame.pose.joint_positions)
                    goal = plan.reactor.pose(j)
                    emitter.emit(StreamFrame(frame.t, goal))
                    if self.config.track:
                        self._track(state, goal, frame.pose)

                if len(received) < self.window:
                    state.reactor.truncate(len(state.actor))
                    logger.warning(f"⚠️ Actor stream ended inside window {plan.index} after {len(received)} frames")
                    break
                report.windows += 1
                if self.config.track:
                    report.rewards.append(self._score_window(state, plan, np.stack(received)))
            emitter.finish()
        except SinkError as e:
            report.aborted = True
            report.error = str(e)
            logger.error(f"❌ Stream aborted: {e}")
        finally:
            emitter.close()
            if isinstance(source, _BackgroundSource):
                source.close()
        report.frames_emitted = emitter.count

        if reward_path is not None and self.config.track:
            path = Path(reward_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            report.reward_frame().to_csv(path, index=False)
            logger.info(f"✅ Rewards written to {path}")
        summary = report.latency_summary()
        logger.info(f"✅ Stream finished: {report.windows} windows, {report.frames_emitted} frames, "
                    f"latency mean {summary['mean_ms']:.1f} ms / p95 {summary['p95_ms']:.1f} ms")
        return report


def benchmark_latency(denoiser, steps_list: Sequence[int] = (2, 8, 100), repeats: int = 5, seed: int = 0,
                      text: Optional[str] = 'benchmark', guidance: Optional[GuidanceConfig] = None) -> pd.DataFrame:
    """Wall time of one window sample per diffusion step count; one untimed call per T warms up."""
    if repeats < 1:
        raise InvalidInputError("repeats must be >= 1")
    denoiser = denoiser.eval()
    history = np.zeros((denoiser.history_frames, config.FRAME_DIM))
    rows = []
    for steps in steps_list:
        sched = build_schedule(steps)
        generator = torch.Generator().manual_seed(int(seed))
        sample_window(denoiser, history, text, sched, guidance, generator=generator)
        timings = []
        for _ in range(repeats):
            started = time.perf_counter()
            sample_window(denoiser, history, text, sched, guidance, generator=generator)
            timings.append(1000.0 * (time.perf_counter() - started))
        rows.append({'T': int(steps), 'mean_ms': float(np.mean(timings)), 'p95_ms': float(np.percentile(timings, 95))})
        logger.info(f"📊 T={steps}: mean {rows[-1]['mean_ms']:.1f} ms, p95 {rows[-1]['p95_ms']:.1f} ms")
    return pd.DataFrame(rows, columns=LATENCY_COLUMNS)
