"""Two-stage pipelined inference with a capacity-1 hand-off.

A vision worker and an LLM worker run in their own threads, joined by a
bounded queue. Each LLM result is passed to an egress worker that spends
the IPC hand-off cost before the frame counts as complete, so the IPC delay
never blocks either model stage.

Latency bookkeeping per frame n:

* admission latency: completion - time the vision worker picked the frame up
* exposed latency: completion - max(admission, LLM end of frame n-1)

The exposed figure leaves out vision work that overlapped the previous
frame's LLM stage. It equals V + L + IPC for the first frame and settles at
max(V, L) + IPC once the pipeline is full. Throughput is 1 / max(V, L).
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

_STOP = object()


@dataclass(frozen=True)
class PipelineConfig:
    vision_latency_ms: float = 55.0
    llm_latency_ms: float = 65.0
    ipc_overhead_ms: float = 20.0
    queue_capacity: int = 1

    def __post_init__(self):
        for name in ("vision_latency_ms", "llm_latency_ms", "ipc_overhead_ms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.queue_capacity != 1:
            raise ValueError("only a capacity-1 stage hand-off is supported")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FrameTiming:
    index: int
    admit: float
    vision_end: float = 0.0
    llm_start: float = 0.0
    llm_end: float = 0.0
    complete: float = 0.0


@dataclass
class LatencyReport:
    mode: str
    config: PipelineConfig
    n_frames: int
    latencies_ms: list = field(default_factory=list)
    admission_latencies_ms: list = field(default_factory=list)
    first_frame_ms: float | None = None
    steady_state_ms: float | None = None
    steady_state_admission_ms: float | None = None
    throughput_fps: float | None = None
    error: str | None = None
    results: list = field(default_factory=list)

    @property
    def n_completed(self) -> int:
        return len(self.latencies_ms)

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "mode": self.mode,
            "config": self.config.to_dict(),
            "n_frames": self.n_frames,
            "n_completed": self.n_completed,
            "first_frame_ms": self.first_frame_ms,
            "steady_state_ms": self.steady_state_ms,
            "steady_state_admission_ms": self.steady_state_admission_ms,
            "throughput_fps": self.throughput_fps,
            "latencies_ms": self.latencies_ms,
            "admission_latencies_ms": self.admission_latencies_ms,
            "error": self.error,
        }


def simulated_stage(ms: float, fn=None):
    """Stage that sleeps ``ms`` and then applies ``fn`` (identity by default)."""
    delay = ms / 1000.0

    def stage(x):
        if delay > 0:
            time.sleep(delay)
        return fn(x) if fn is not None else x

    return stage


def _ipc_wait(ms: float) -> None:
    if ms > 0:
        time.sleep(ms / 1000.0)


class TwoStagePipeline:
    """Streaming vision -> LLM -> egress pipeline.

    ``submit`` blocks until the vision worker can take the item. ``sink`` is
    called from the egress thread as ``sink(index, result, timing)`` in
    submission order. A stage exception stops admission; frames already past
    the failing stage still drain to the sink.
    """

    def __init__(self, vision, llm, config: PipelineConfig = PipelineConfig(), sink=None, name: str = "pipeline"):
        self.vision, self.llm, self.config = vision, llm, config
        self.sink = sink
        self.error: BaseException | None = None
        self._in = queue.Queue(maxsize=1)
        self._mid = queue.Queue(maxsize=config.queue_capacity)
        self._out = queue.Queue()
        self._failed = threading.Event()
        self._n = 0
        self._threads = [
            threading.Thread(target=self._vision_loop, name=f"{name}-vision", daemon=True),
            threading.Thread(target=self._llm_loop, name=f"{name}-llm", daemon=True),
            threading.Thread(target=self._egress_loop, name=f"{name}-egress", daemon=True),
        ]
        for t in self._threads:
            t.start()

    @property
    def failed(self) -> bool:
        return self._failed.is_set()

    def submit(self, item) -> bool:
        """Queue one frame; returns False once a stage has failed."""
        if self._failed.is_set():
            return False
        self._in.put((self._n, item))
        self._n += 1
        return True

    def close(self, timeout: float | None = None) -> None:
        """Stop admitting frames and wait until in-flight frames have drained."""
        self._in.put(_STOP)
        for t in self._threads:
            t.join(timeout)

    def _fail(self, exc: BaseException) -> None:
        if self.error is None:
            self.error = exc
        self._failed.set()
        log.warning("pipeline stage failed: %s", exc)

    def _vision_loop(self):
        while True:
            job = self._in.get()
            if job is _STOP:
                self._mid.put(_STOP)
                return
            if self._failed.is_set():
                continue
            i, item = job
            tm = FrameTiming(i, time.perf_counter())
            try:
                x = self.vision(item)
            except Exception as exc:  # noqa: BLE001
                self._fail(exc)
                continue
            tm.vision_end = time.perf_counter()
            self._mid.put((tm, x))

    def _llm_loop(self):
        while True:
            job = self._mid.get()
            if job is _STOP:
                self._out.put(_STOP)
                return
            tm, x = job
            if self._failed.is_set():
                continue
            tm.llm_start = time.perf_counter()
            try:
                y = self.llm(x)
            except Exception as exc:  # noqa: BLE001
                self._fail(exc)
                continue
            tm.llm_end = time.perf_counter()
            self._out.put((tm, y))

    def _egress_loop(self):
        while True:
            job = self._out.get()
            if job is _STOP:
                return
            tm, y = job
            _ipc_wait(self.config.ipc_overhead_ms)
            tm.complete = time.perf_counter()
            if self.sink is not None:
                try:
                    self.sink(tm.index, y, tm)
                except Exception as exc:  # noqa: BLE001
                    self._fail(exc)


def _summarize(report: LatencyReport, timings: list[FrameTiming], warmup: int) -> LatencyReport:
    timings = sorted(timings, key=lambda t: t.index)
    exposed, admission = [], []
    prev_llm_end = None
    for t in timings:
        start = t.admit if prev_llm_end is None else max(t.admit, prev_llm_end)
        exposed.append((t.complete - start) * 1000.0)
        admission.append((t.complete - t.admit) * 1000.0)
        prev_llm_end = t.llm_end
    report.latencies_ms = exposed
    report.admission_latencies_ms = admission
    if exposed:
        report.first_frame_ms = exposed[0]
        tail = exposed[warmup:] if len(exposed) > warmup else exposed
        report.steady_state_ms = float(np.mean(tail))
        atail = admission[warmup:] if len(admission) > warmup else admission
        report.steady_state_admission_ms = float(np.mean(atail))
    if len(timings) >= 2:
        first = min(warmup, len(timings) - 2)
        span = timings[-1].complete - timings[first].complete
        report.throughput_fps = (len(timings) - 1 - first) / span if span > 0 else None
    return report


def pipelined_execute(frames, vision, llm, config: PipelineConfig = PipelineConfig(), mode: str = "pipelined",
                      warmup: int = 5) -> LatencyReport:
    """Push ``frames`` through ``vision`` then ``llm`` and time every frame.

    ``mode="sequential"`` runs both stages back to back in one worker per
    frame with no inter-process hand-off; ``mode="pipelined"`` overlaps them.
    Results come back in frame order in ``report.results``. If a stage raises,
    the report holds the frames completed before the failure and ``error``.
    """
    frames = list(frames)
    report = LatencyReport(mode, config, len(frames))
    timings: list[FrameTiming] = []
    results: dict[int, object] = {}
    if mode == "sequential":
        for i, f in enumerate(frames):
            tm = FrameTiming(i, time.perf_counter())
            try:
                x = vision(f)
                tm.vision_end = tm.llm_start = time.perf_counter()
                y = llm(x)
            except Exception as exc:  # noqa: BLE001
                report.error = f"{type(exc).__name__}: {exc}"
                break
            tm.llm_end = tm.complete = time.perf_counter()
            timings.append(tm)
            results[i] = y
        # each frame starts after the previous completes, so exposed == admission latency
    elif mode == "pipelined":
        lock = threading.Lock()

        def sink(i, y, tm):
            with lock:
                timings.append(tm)
                results[i] = y

        pipe = TwoStagePipeline(vision, llm, config, sink)
        for f in frames:
            if not pipe.submit(f):
                break
        pipe.close()
        if pipe.error is not None:
            report.error = f"{type(pipe.error).__name__}: {pipe.error}"
    else:
        raise ValueError(f"unknown mode {mode!r}")
    report.results = [results[i] for i in sorted(results)]
    return _summarize(report, timings, warmup)


def bench_pipeline(config: PipelineConfig = PipelineConfig(), n_frames: int = 200, mode: str = "pipelined",
                   warmup: int = 5) -> LatencyReport:
    """Run sleep-simulated stages through the executor."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    vision = simulated_stage(config.vision_latency_ms)
    llm = simulated_stage(config.llm_latency_ms)
    return pipelined_execute(range(n_frames), vision, llm, config, mode, warmup)
