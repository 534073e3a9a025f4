"""Frame-paced streaming benchmark: one producer, one consumer running both models."""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import FPS, generate_trial, normalize_frame, random_profile, SPEEDS, STRIKES
from .errors import TaskMismatchError
from .model import ForecasterModel, StreamState, stream_predict

log = logging.getLogger(__name__)

QUEUE_DEPTH = 2


@dataclass
class FpsReport:
    trial_id: int
    duration_s: float
    elapsed_s: float
    frames_emitted: int
    frames_processed: int
    dropped: int
    effective_fps: float
    latency_p50_ms: float
    latency_p99_ms: float
    latency_max_ms: float
    mode: str
    models: tuple
    predictions: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames_processed and not self.effective_fps > 0:
            raise ValueError("effective FPS must be positive")

    def as_dict(self) -> dict:
        return asdict(self)


def frame_source(seed: int, n_trials: int = 4) -> np.ndarray:
    """A loopable stack of raw synthetic frames."""
    prof = random_profile(1, seed)
    clips = [
        generate_trial(prof, SPEEDS[i % 3], STRIKES[i % 3], seed=seed * 1000 + i).frames
        for i in range(n_trials)
    ]
    return np.concatenate(clips, axis=0)


def _check_models(cop: ForecasterModel, toi: ForecasterModel) -> None:
    if cop.config.task != "cop" or toi.config.task != "toi":
        raise TaskMismatchError(
            f"live simulation needs one COP and one TOI model, got {cop.config.task!r} and {toi.config.task!r}"
        )


def run_livesim(
    cop_model: ForecasterModel,
    toi_model: ForecasterModel,
    duration_s: float,
    *,
    fps: float = FPS,
    mode: str = "windowed",
    seed: int = 0,
    throttle_s: float = 0.0,
    trial_id: int = 0,
    frames: np.ndarray | None = None,
) -> FpsReport:
    """Stream synthetic frames at ``fps`` for ``duration_s`` seconds.

    The producer paces itself on absolute deadlines ``t0 + i / fps`` so timing
    error does not accumulate. It never blocks: when the consumer has fallen
    ``QUEUE_DEPTH`` frames behind, the new frame is counted as dropped.
    ``throttle_s`` adds an artificial per-frame delay to the consumer.
    """
    if not duration_s > 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    _check_models(cop_model, toi_model)
    src = frame_source(seed) if frames is None else frames
    n_target = int(np.ceil(duration_s * fps - 1e-9))

    q: queue.Queue = queue.Queue(maxsize=QUEUE_DEPTH)
    dropped = 0
    emitted = 0
    stop = object()
    t0 = time.monotonic()

    def produce():
        nonlocal dropped, emitted
        for i in range(n_target):
            deadline = t0 + i / fps
            delay = deadline - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            emitted += 1
            try:
                q.put_nowait((src[i % len(src)], time.monotonic()))
            except queue.Full:
                dropped += 1
        q.put(stop)

    states = {
        "cop": StreamState.for_model(cop_model, mode),
        "toi": StreamState.for_model(toi_model, mode),
    }
    models = {"cop": cop_model, "toi": toi_model}
    preds = {"cop": 0, "toi": 0}
    lat = []

    producer = threading.Thread(target=produce, name="livesim-producer", daemon=True)
    producer.start()
    while True:
        item = q.get()
        if item is stop:
            break
        raw, t_emit = item
        frame = normalize_frame(raw).astype(cop_model.dtype, copy=False)
        for task, m in models.items():
            y, _ = stream_predict(m, frame, states[task])
            if y is not None:
                preds[task] += 1
        if throttle_s:
            time.sleep(throttle_s)
        lat.append(time.monotonic() - t_emit)
    t_end = time.monotonic()
    producer.join()

    elapsed = max(t_end - t0, duration_s)
    processed = len(lat)
    lat_ms = np.asarray(lat) * 1000.0 if lat else np.zeros(1)
    p50, p99 = np.percentile(lat_ms, [50, 99])
    rep = FpsReport(
        trial_id=trial_id, duration_s=float(duration_s), elapsed_s=float(elapsed), frames_emitted=emitted,
        frames_processed=processed, dropped=dropped, effective_fps=processed / elapsed,
        latency_p50_ms=float(p50), latency_p99_ms=float(p99), latency_max_ms=float(lat_ms.max()),
        mode=mode, models=("cop", "toi"), predictions=preds,
    )
    if dropped:
        log.warning("live simulation dropped %d of %d frames", dropped, emitted)
    return rep


def run_protocol(cop_model, toi_model, duration_s: float = 120.0, repeats: int = 3, **kw) -> list:
    """Repeated runs; each repeat replays a different synthetic clip loop."""
    seed = kw.pop("seed", 0)
    return [
        run_livesim(cop_model, toi_model, duration_s, seed=seed + r, trial_id=r, **kw) for r in range(repeats)
    ]
