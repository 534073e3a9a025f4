"""Base-model pretraining, per-subject fine-tuning, and the cross-validation harness."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datagen import FPS, Trial, cop_to_mm, normalize_frame
from .errors import CsvFormatError, TaskMismatchError
from .model import ForecasterConfig, ForecasterModel, forecast_window, is_encoder_param
from .numerics import AdamState, Rng, Tape, adam_step, backward, derive_seed

log = logging.getLogger(__name__)

FRAME_MS = 1000.0 / FPS


@dataclass(frozen=True)
class TrainConfig:
    task: str = "cop"
    pretrain_lr: float = 1e-3
    pretrain_epochs: int = 100
    finetune_epochs: int = 250
    window: int = 15
    seed: int = 0
    # Fine-tuning updates the recurrent head over cached encoder latents unless
    # this is set; full fine-tuning costs ~500x more per step on a CPU.
    finetune_encoder: bool = False
    folds: int | None = None  # None -> leave-one-out

    @property
    def finetune_lr(self) -> float:
        return self.pretrain_lr / 10.0


@dataclass
class ForecastRecord:
    subject: int
    trial: int
    task: str
    fh_frames: int
    fh_ms: float
    prediction: float
    truth: float
    torso_vel: float
    toe_vel: float
    cop_truth_mm: float

    @property
    def abs_error(self) -> float:
        return abs(self.truth - self.prediction)


RECORD_FIELDS = (
    "subject", "trial", "task", "fh_frames", "fh_ms", "prediction", "truth",
    "abs_error", "torso_vel", "toe_vel", "cop_truth_mm",
)


# ---------------------------------------------------------------------------
# Targets and windows
# ---------------------------------------------------------------------------


def targets(trial: Trial, task: str, window: int = 15) -> np.ndarray:
    """Model-unit targets for k = 1..window frames before impact."""
    k = np.arange(1, window + 1, dtype=np.float64)
    if task == "cop":
        return np.full(window, trial.cop_norm)
    if task == "toi":
        return k / FPS
    raise ValueError(f"unknown task {task!r}")


def window_index(window: int) -> np.ndarray:
    """Gather index (T, B) over the ``2*window - 1`` frames preceding impact.

    Column ``j`` is the window whose last frame is ``impact - (j + 1)``.
    """
    t = np.arange(window)[:, None]
    j = np.arange(window)[None, :]
    return (window - 1 - j) + t


def context_frames(trial: Trial, window: int = 15) -> np.ndarray:
    """Normalized frames ``impact - (2*window - 1) .. impact - 1``."""
    lo = trial.impact_idx - (2 * window - 1)
    if lo < 0:
        raise ValueError(f"trial with impact at {trial.impact_idx} is too short for {window}-frame windows")
    return normalize_frame(trial.frames[lo : trial.impact_idx])


def _check_task(model: ForecasterModel, task: str) -> None:
    if model.config.task != task:
        raise TaskMismatchError(f"model was built for {model.config.task!r}, not {task!r}")


def head_loss(model: ForecasterModel, latents: np.ndarray, y: np.ndarray, need_latent_grad: bool = False):
    """Window loss over precomputed latents; returns ``(loss, rnn grads, dlatents)``."""
    w = model.config.window
    Y, cache = model.run_rnn(latents, window_index(w))
    yhat = Y[-1].astype(np.float64)
    diff = yhat - y
    loss = float(np.mean(diff * diff))
    dY = np.zeros_like(Y)
    dY[-1] = (2.0 / w) * diff
    grads, dlat = model.rnn_backward(dY, cache, need_latent_grad)
    return loss, grads, dlat


def window_loss(model: ForecasterModel, trial: Trial, task: str, encoder_grads: bool = True):
    """Mean squared error over the 15 constant-context forecasts before impact."""
    _check_task(model, task)
    w = model.config.window
    frames = context_frames(trial, w)
    tape = Tape() if encoder_grads else None
    latents = model.encode(frames, tape)
    loss, grads, dlat = head_loss(model, latents, targets(trial, task, w), need_latent_grad=encoder_grads)
    if encoder_grads:
        enc, _ = backward(tape, dlat, model.params)
        grads.update(enc)
    return loss, grads


def predict_trial(model: ForecasterModel, trial: Trial, latents: np.ndarray | None = None) -> np.ndarray:
    """Forecasts for k = 1..window (model units), each from its own 15-frame window."""
    w = model.config.window
    if latents is None:
        latents = model.encode(context_frames(trial, w))
    # Window for horizon k covers context rows w-k .. 2w-1-k. Running each one
    # through forecast_window keeps offline results identical to streaming.
    return np.array([forecast_window(model, latents[w - k : 2 * w - k])[-1] for k in range(1, w + 1)],
                    dtype=np.float64)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)


def _pretrain_step(model: ForecasterModel, trial: Trial, task: str, update: bool, state=None, lr=0.0) -> float:
    w = model.config.window
    n = trial.impact_idx
    frames = normalize_frame(trial.frames[:n])
    tape = Tape() if update else None
    latents = model.encode(frames, tape)
    Y, cache = model.run_rnn(latents, np.arange(n)[:, None])
    # outputs at frames impact-15 .. impact-1, i.e. k = 15 .. 1
    yhat = Y[n - w :, 0].astype(np.float64)
    y = targets(trial, task, w)[::-1]
    diff = yhat - y
    loss = float(np.mean(diff * diff))
    if update:
        dY = np.zeros_like(Y)
        dY[n - w :, 0] = (2.0 / w) * diff
        grads, dlat = model.rnn_backward(dY, cache, need_latent_grad=True)
        enc, _ = backward(tape, dlat, model.params)
        grads.update(enc)
        adam_step(model.params, grads, state, lr)
    return loss


def pretrain(trials: list, config: TrainConfig, model_config: ForecasterConfig | None = None):
    """Train a base model with growing context (every frame from clip start).

    Returns ``(model, history)``; ``history.epoch_loss[0]`` is the loss of the
    freshly initialized model before any update.
    """
    if not trials:
        raise ValueError("pretraining needs at least one clip")
    mcfg = model_config or ForecasterConfig(task=config.task, window=config.window)
    _check_task(ForecasterModel.zeros(mcfg), config.task)
    model = ForecasterModel.initialize(mcfg, derive_seed(config.seed, "init", config.task))
    state = AdamState.zeros_like(model.params)
    hist = TrainHistory()
    hist.epoch_loss.append(float(np.mean([_pretrain_step(model, t, config.task, False) for t in trials])))
    for epoch in range(config.pretrain_epochs):
        order = Rng(derive_seed(config.seed, "pretrain", epoch)).permutation(len(trials))
        losses = [_pretrain_step(model, trials[i], config.task, True, state, config.pretrain_lr) for i in order]
        hist.epoch_loss.append(float(np.mean(losses)))
        log.info("pretrain %s epoch %d loss %.5f", config.task, epoch + 1, hist.epoch_loss[-1])
    return model, hist


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


def encode_trials(model: ForecasterModel, trials: list) -> list:
    w = model.config.window
    return [model.encode(context_frames(t, w)) for t in trials]


def finetune(
    base: ForecasterModel,
    trials: list,
    config: TrainConfig,
    latents: list | None = None,
    seed_key=(),
):
    """Fine-tune a copy of ``base`` on ``trials``; returns ``(model, history)``.

    ``latents`` may carry cached encodings from ``base`` (only valid while the
    encoder stays frozen).
    """
    if not trials:
        raise ValueError("fine-tuning needs at least one training trial")
    _check_task(base, config.task)
    model = base.copy()
    w = model.config.window
    ys = [targets(t, config.task, w) for t in trials]
    if config.finetune_encoder:
        trainable = dict(model.params)
    else:
        trainable = {k: v for k, v in model.params.items() if not is_encoder_param(k)}
        if latents is None:
            latents = encode_trials(model, trials)
    state = AdamState.zeros_like(trainable)
    lr = config.finetune_lr
    hist = TrainHistory()
    for epoch in range(config.finetune_epochs):
        order = Rng(derive_seed(config.seed, "finetune", *seed_key, epoch)).permutation(len(trials))
        total = 0.0
        for i in order:
            if config.finetune_encoder:
                loss, grads = window_loss(model, trials[i], config.task)
            else:
                loss, grads, _ = head_loss(model, latents[i], ys[i])
            adam_step(trainable, grads, state, lr)
            total += loss
        hist.epoch_loss.append(total / len(trials))
    return model, hist


class FinetuneLearner:
    """Default cross-validation learner: fine-tune ``base`` on the training folds."""

    def __init__(self, base: ForecasterModel, config: TrainConfig):
        _check_task(base, config.task)
        self.base = base
        self.config = config
        self._cache: dict = {}

    def prepare(self, trials: list) -> None:
        if not self.config.finetune_encoder:
            for t, lat in zip(trials, encode_trials(self.base, trials)):
                self._cache[(t.subject_id, t.trial_id)] = lat

    def fit(self, train: list, fold_key=()):
        lat = None if self.config.finetune_encoder else [self._cache[(t.subject_id, t.trial_id)] for t in train]
        model, _ = finetune(self.base, train, self.config, latents=lat, seed_key=fold_key)
        frozen = not self.config.finetune_encoder

        def predict(trial: Trial) -> np.ndarray:
            return predict_trial(model, trial, self._cache.get((trial.subject_id, trial.trial_id)) if frozen else None)

        return predict


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


def fold_assignments(n: int, folds: int | None) -> list:
    """Test-index lists; ``None`` (or ``folds >= n``) is leave-one-out."""
    if folds is None or folds >= n:
        return [[i] for i in range(n)]
    if folds < 2:
        raise ValueError("k-fold needs at least 2 folds")
    return [list(range(j, n, folds)) for j in range(folds)]


def to_reporting_units(task: str, values, insole_mm: float) -> np.ndarray:
    """COP -> mm from the rear of the insole; TOI seconds -> ms. No clamping."""
    v = np.asarray(values, dtype=np.float64)
    if task == "cop":
        return cop_to_mm(v, insole_mm, strict=False)
    return v * 1000.0


def records_for_trial(trial: Trial, task: str, preds: np.ndarray, insole_mm: float) -> list:
    w = len(preds)
    truth = to_reporting_units(task, targets(trial, task, w), insole_mm)
    pred = to_reporting_units(task, preds, insole_mm)
    cop_mm = cop_to_mm(trial.cop_norm, insole_mm)
    return [
        ForecastRecord(
            subject=trial.subject_id, trial=trial.trial_id, task=task, fh_frames=k, fh_ms=k * FRAME_MS,
            prediction=float(pred[k - 1]), truth=float(truth[k - 1]), torso_vel=trial.torso_velocity,
            toe_vel=trial.toe_velocity, cop_truth_mm=cop_mm,
        )
        for k in range(1, w + 1)
    ]


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("STRIDE_THREADS", "1")))
    except ValueError:
        return 1


def _run_fold(args):
    learner, trials, test_idx, fold_no = args
    train = [t for i, t in enumerate(trials) if i not in set(test_idx)]
    predict = learner.fit(train, fold_key=(trials[0].subject_id, fold_no))
    return [(i, predict(trials[i])) for i in test_idx]


def loocv(
    base: ForecasterModel | None,
    trials: list,
    config: TrainConfig,
    insole_mm: float,
    learner=None,
) -> list:
    """Cross-validated forecast records for one subject's trials.

    Each trial is predicted only by the model of the fold that held it out.
    ``config.folds`` set below ``len(trials)`` gives a k-fold approximation.
    """
    n = len(trials)
    if n < 2:
        raise ValueError(f"cross-validation needs at least 2 trials, got {n}")
    if learner is None:
        learner = FinetuneLearner(base, config)
    if hasattr(learner, "prepare"):
        learner.prepare(trials)
    folds = fold_assignments(n, config.folds)
    jobs = [(learner, trials, idx, f) for f, idx in enumerate(folds)]
    workers = min(_worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [_run_fold(j) for j in jobs]
    preds = {}
    for fold in results:
        for i, p in fold:
            preds[i] = p
    records = []
    for i, t in enumerate(trials):
        records.extend(records_for_trial(t, config.task, preds[i], insole_mm))
    return records


def baseline_records(trials: list, task: str, insole_mm: float, folds: int | None = None, window: int = 15) -> list:
    """Predict-the-training-mean baseline under the same fold split."""
    n = len(trials)
    preds = {}
    for idx in fold_assignments(n, folds):
        train = [t for i, t in enumerate(trials) if i not in set(idx)]
        mean = float(np.mean([targets(t, task, window) for t in train]))
        for i in idx:
            preds[i] = np.full(window, mean)
    out = []
    for i, t in enumerate(trials):
        out.extend(records_for_trial(t, task, preds[i], insole_mm))
    return out


# ---------------------------------------------------------------------------
# Record CSV
# ---------------------------------------------------------------------------


def write_records(records: list, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(RECORD_FIELDS)
        for r in records:
            d = asdict(r)
            d["abs_error"] = r.abs_error
            wr.writerow([repr(d[k]) if isinstance(d[k], float) else d[k] for k in RECORD_FIELDS])


def read_records(path) -> list:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        missing = set(RECORD_FIELDS) - set(rd.fieldnames or ())
        if missing:
            raise CsvFormatError(f"{path}: record CSV lacks columns {sorted(missing)}")
        for line, row in enumerate(rd, start=2):
            try:
                out.append(
                    ForecastRecord(
                        subject=int(row["subject"]), trial=int(row["trial"]), task=row["task"],
                        fh_frames=int(row["fh_frames"]), fh_ms=float(row["fh_ms"]),
                        prediction=float(row["prediction"]), truth=float(row["truth"]),
                        torso_vel=float(row["torso_vel"]), toe_vel=float(row["toe_vel"]),
                        cop_truth_mm=float(row["cop_truth_mm"]),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise CsvFormatError(f"{Path(path).name} line {line}: {exc}") from exc
    return out
