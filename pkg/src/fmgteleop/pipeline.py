"""Streaming teleoperation loop: baseline capture, sliding window, inference, retargeting.

Two activities share a bounded queue of calibrated frames. *Ingest* decodes
input, tracks the baseline phase and calibrates sensor frames. *Infer* keeps
the window ring buffer and runs the model. When inference falls behind, it
folds every pending frame into the window but predicts only for the newest
one (freshest wins), and the skipped frames count as drops. In offline mode
both activities run in lock-step on one thread, so nothing is ever dropped
and the output is deterministic.
"""

import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .protocol import FrameDecodeError, FrameType, ProtocolFrame, control_frame, error_frame, sensor_frame
from .retarget import JointCommand, rate_limit, retarget
from .signal import N_SENSORS, SessionRecording, calibrate_array, compute_baseline, load_session

MIN_BASELINE_FRAMES = 10
STAGES = ("ingest", "predict", "retarget", "total")


class PipelineState:
    AWAIT_BASELINE = "await_baseline"
    BASELINE = "baseline"
    FILLING = "filling"
    STREAMING = "streaming"


@dataclass
class PipelineStats:
    frames: int = 0  # SENSOR frames received
    baseline_frames: int = 0
    fill_frames: int = 0
    inferences: int = 0
    dropped: int = 0
    rejected: int = 0  # SENSOR frames refused (uncalibrated)
    errors: int = 0
    latencies_us: dict = field(default_factory=lambda: {s: [] for s in STAGES})
    first_arrival: float = None
    last_arrival: float = None

    def percentiles(self, stage):
        values = self.latencies_us[stage]
        if not values:
            return (float("nan"),) * 3
        return tuple(float(v) for v in np.percentile(values, [50, 95, 99]))

    @property
    def input_rate_hz(self):
        if self.frames < 2 or self.last_arrival == self.first_arrival:
            return float("nan")
        return (self.frames - 1) / (self.last_arrival - self.first_arrival)

    def as_dict(self):
        out = {"frames": self.frames, "baseline_frames": self.baseline_frames, "fill_frames": self.fill_frames,
               "inferences": self.inferences, "dropped": self.dropped, "rejected": self.rejected,
               "errors": self.errors, "input_rate_hz": round(self.input_rate_hz, 3)}
        for stage in STAGES:
            for name, v in zip(("p50", "p95", "p99"), self.percentiles(stage)):
                out[f"{stage}_{name}_us"] = round(v, 1)
        return out

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in self.as_dict().items())


class FreshestQueue:
    """Bounded single-producer/single-consumer queue.

    On overflow the oldest *frame* item is discarded; marker items (re-baseline)
    are never dropped.
    """

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items = deque()
        self._cond = threading.Condition()
        self.overflow = 0
        self.closed = False

    def put(self, item):
        with self._cond:
            if len(self._items) >= self.capacity:
                for i, old in enumerate(self._items):
                    if old[0] == "frame":
                        del self._items[i]
                        self.overflow += 1
                        break
            self._items.append(item)
            self._cond.notify()

    def close(self):
        with self._cond:
            self.closed = True
            self._cond.notify()

    def get_all(self, block=True):
        """Everything pending; ``None`` once closed and drained."""
        with self._cond:
            while block and not self._items and not self.closed:
                self._cond.wait()
            if not self._items and self.closed:
                return None
            items = list(self._items)
            self._items.clear()
            return items


class Pipeline:
    def __init__(self, model, hand_config, H=None, emit_poses=True, queue_capacity=64, clock=time.perf_counter):
        H = H or model.spec.H
        if model.spec.H != H:
            raise ValueError(f"model window H={model.spec.H} does not match pipeline H={H}")
        self.model, self.hand, self.H = model, hand_config, H
        self.emit_poses = emit_poses
        self.clock = clock
        self.queue = FreshestQueue(queue_capacity)
        self.stats = PipelineStats()
        self.outputs = []
        self._out_lock = threading.Lock()
        self._sink = None
        # ingest state
        self.state = PipelineState.AWAIT_BASELINE
        self._baseline_rows = []
        self._baseline = None
        # infer state
        self._ring = np.zeros((2 * H, N_SENSORS), dtype=np.float32)
        self._fill = 0
        self._prev_cmd = None

    # -- output ------------------------------------------------------------------
    def _emit(self, frame):
        with self._out_lock:
            self.outputs.append(frame)
            if self._sink is not None:
                self._sink(frame)

    def _error(self, ts, message):
        self.stats.errors += 1
        self._emit(error_frame(ts, message))

    # -- ingest ------------------------------------------------------------------
    def ingest(self, item):
        t0 = self.clock()
        if isinstance(item, FrameDecodeError):
            self._error(0, f"malformed input: {item}")
            return
        ftype, ts = item.type, item.timestamp_us
        if ftype is FrameType.BASELINE_START:
            self.state = PipelineState.BASELINE
            self._baseline_rows = []
        elif ftype is FrameType.BASELINE_END:
            if self.state != PipelineState.BASELINE:
                self._error(ts, "BASELINE_END without BASELINE_START")
            elif len(self._baseline_rows) < MIN_BASELINE_FRAMES:
                self._error(ts, f"baseline needs at least {MIN_BASELINE_FRAMES} frames, got {len(self._baseline_rows)}")
                self.state = PipelineState.AWAIT_BASELINE
            else:
                self._baseline = compute_baseline(np.array(self._baseline_rows))
                self.state = PipelineState.STREAMING
                self.queue.put(("reset", None, None, None))
        elif ftype is FrameType.SENSOR:
            self._ingest_sensor(item, t0)
        elif ftype is FrameType.ERROR:
            pass  # peers may report their own errors; nothing to do
        else:
            self._error(ts, f"unexpected {ftype.name} frame on input")

    def _ingest_sensor(self, item, t0):
        st = self.stats
        st.frames += 1
        st.first_arrival = t0 if st.first_arrival is None else st.first_arrival
        st.last_arrival = t0
        values = item.payload.astype(np.float64)
        if np.any(values < 0) or np.any(values > 1023) or np.any(values != np.rint(values)):
            self._error(item.timestamp_us, "sensor values outside the integer ADC range")
            st.rejected += 1
            return
        if self.state == PipelineState.AWAIT_BASELINE:
            st.rejected += 1
            self._error(item.timestamp_us, "uncalibrated")
        elif self.state == PipelineState.BASELINE:
            st.baseline_frames += 1
            self._baseline_rows.append(values.astype(np.int64))
        else:
            cal = calibrate_array(values.astype(np.int64)[None], self._baseline)[0]
            t1 = self.clock()
            self.queue.put(("frame", item.timestamp_us, cal, (t0, t1 - t0)))

    # -- infer -------------------------------------------------------------------
    def _push(self, cal):
        H = self.H
        if self._fill == 2 * H:
            self._ring[: H - 1] = self._ring[H + 1 :]
            self._fill = H - 1
        self._ring[self._fill] = cal
        self._fill += 1

    def process_pending(self, block=False):
        """Consume queued frames; returns False once the queue is closed and empty."""
        items = self.queue.get_all(block=block)
        if items is None:
            return False
        st = self.stats
        # frames lost to overflow count as drops
        st.dropped += self.queue.overflow
        self.queue.overflow = 0
        frames = [it for it in items if it[0] == "frame"]
        last_frame = frames[-1] if frames else None
        for it in items:
            kind, ts, cal, timing = it
            if kind == "reset":
                self._fill = 0
                self._prev_cmd = None
                continue
            self._push(cal)
            if self._fill < self.H:
                st.fill_frames += 1
            elif it is not last_frame:
                st.dropped += 1
            else:
                self._infer(ts, timing)
        return True

    def _infer(self, ts, timing):
        t_arrival, ingest_s = timing
        window = self._ring[self._fill - self.H : self._fill]
        t0 = self.clock()
        angles = self.model.predict_batch(window.reshape(1, self.H, 4, 7), batch_size=1)[0]
        t1 = self.clock()
        cmd = retarget(angles.astype(np.float64), self.hand, ts)
        if self._prev_cmd is not None:
            cmd = rate_limit(self._prev_cmd, cmd, (ts - self._prev_cmd.timestamp_us) / 1e6, self.hand)
        self._prev_cmd = cmd
        t2 = self.clock()
        if self.emit_poses:
            self._emit(ProtocolFrame(FrameType.POSE, ts, angles))
        self._emit(ProtocolFrame(FrameType.JOINTCMD, ts, cmd.targets))
        st = self.stats
        st.inferences += 1
        lat = st.latencies_us
        lat["ingest"].append(ingest_s * 1e6)
        lat["predict"].append((t1 - t0) * 1e6)
        lat["retarget"].append((t2 - t1) * 1e6)
        lat["total"].append((t2 - t_arrival) * 1e6)

    # -- drivers -----------------------------------------------------------------
    def run_offline(self, source):
        for item in source:
            self.ingest(item)
            self.process_pending()
        self.queue.close()
        return self.outputs, self.stats

    def run_threaded(self, source, sink=None):
        self._sink = sink

        def worker():
            while self.process_pending(block=True):
                pass

        th = threading.Thread(target=worker, name="fmg-infer", daemon=True)
        th.start()
        try:
            for item in source:
                self.ingest(item)
        finally:
            self.queue.close()
            th.join()
        return self.outputs, self.stats


def run_pipeline(source, model, hand_config, H=None, realtime=False, sink=None, emit_poses=True, queue_capacity=64):
    """Run the loop over ``source`` (frames and/or decode errors).

    Returns ``(output_frames, stats)``. ``realtime`` uses the two-thread
    arrangement; otherwise everything runs in lock-step without drops.
    """
    pipe = Pipeline(model, hand_config, H, emit_poses=emit_poses, queue_capacity=queue_capacity)
    if realtime:
        return pipe.run_threaded(source, sink)
    pipe._sink = sink
    return pipe.run_offline(source)


def session_frames(session):
    """Protocol frames for a recording: control frames around the baseline rows."""
    ts = session.timestamps_us
    base = np.flatnonzero(session.is_baseline)
    first_active = len(base)
    frames = [control_frame(FrameType.BASELINE_START, int(ts[0]) if len(ts) else 0)]
    for i in base:
        frames.append(sensor_frame(int(ts[i]), session.raw[i]))
    end_ts = int(ts[first_active - 1]) if first_active else 0
    frames.append(control_frame(FrameType.BASELINE_END, end_ts))
    for i in range(first_active, len(ts)):
        frames.append(sensor_frame(int(ts[i]), session.raw[i]))
    return frames


def replay_source(session_path, rate_hz=33.0, realtime=False, sleep=time.sleep, clock=time.perf_counter):
    """Yield a session file as protocol frames, optionally paced at ``rate_hz``.

    Pacing follows an absolute schedule (frame k is due at ``start + k / rate``),
    so scheduling jitter does not accumulate.
    """
    session = session_path if isinstance(session_path, SessionRecording) else load_session(session_path)
    frames = session_frames(session)
    if not realtime:
        yield from frames
        return
    period = 1.0 / rate_hz
    start = clock()
    k = 0
    for frame in frames:
        if frame.type is FrameType.SENSOR:
            due = start + k * period
            delay = due - clock()
            if delay > 0:
                sleep(delay)
            k += 1
        yield frame
