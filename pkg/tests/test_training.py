from dataclasses import replace

import numpy as np
import pytest

from stride.datagen import SubjectProfile, cop_to_mm, generate_base_dataset, generate_dataset, generate_trial, invert_window
from stride.errors import CsvFormatError, TaskMismatchError
from stride.model import ForecasterConfig, ForecasterModel
from stride.numerics import derive_seed
from stride.training import (
    TrainConfig,
    _pretrain_step,
    baseline_records,
    fold_assignments,
    finetune,
    loocv,
    predict_trial,
    pretrain,
    read_records,
    targets,
    window_index,
    window_loss,
    write_records,
)

SMALL = dict(block_channels=(4, 8, 8), convs_per_block=1, h1=16, h2=8)


def small_config(task="cop"):
    return ForecasterConfig(task=task, **SMALL)


@pytest.fixture(scope="module")
def trials():
    return generate_dataset(1, 6, seed=21).trials


@pytest.fixture(scope="module")
def base_toi():
    base = generate_base_dataset(12, seed=1)
    return pretrain(base.trials, TrainConfig(task="toi", pretrain_epochs=4, seed=0), small_config("toi"))


def test_window_index_layout():
    idx = window_index(15)
    assert idx.shape == (15, 15)
    # Column j ends at context row 28 - j, i.e. the frame k = j + 1 before impact.
    assert list(idx[-1]) == [28 - j for j in range(15)]
    assert np.all(np.diff(idx, axis=0) == 1)


def test_zero_model_cop_loss():
    prof = SubjectProfile(1, 250.0, jitter_px=0, pixel_noise=0.0, cop_noise=0.0, velocity_jitter=0.0)
    tr = replace(generate_trial(prof, "slow", "fore", seed=0), cop_norm=0.2)
    m = ForecasterModel.zeros(ForecasterConfig(), dtype=np.float64)
    loss, _ = window_loss(m, tr, "cop", encoder_grads=False)
    assert loss == pytest.approx(0.04, abs=1e-8)  # labels are stored as float32


def test_zero_model_toi_loss(trials):
    m = ForecasterModel.zeros(ForecasterConfig(task="toi"), dtype=np.float64)
    loss, _ = window_loss(m, trials[0], "toi", encoder_grads=False)
    oracle = sum((k / 60) ** 2 for k in range(1, 16)) / 15
    assert oracle == pytest.approx(1240 / 54000, rel=1e-15)
    assert loss == pytest.approx(oracle, rel=1e-12)


def test_exact_model_gives_zero_cop_loss(trials):
    # Zero weights with tanh(bias) = cop_norm make every output equal the label.
    tr = trials[0]
    m = ForecasterModel.zeros(ForecasterConfig(), dtype=np.float64)
    m.params["rnn2.b_in"][:] = np.arctanh(tr.cop_norm)
    loss, _ = window_loss(m, tr, "cop", encoder_grads=False)
    assert loss < 1e-30


def test_task_mismatch(trials):
    with pytest.raises(TaskMismatchError):
        window_loss(ForecasterModel.zeros(ForecasterConfig(task="toi")), trials[0], "cop")


def test_pretrain_is_deterministic(trials):
    cfg = TrainConfig(task="cop", pretrain_epochs=1, seed=4)
    a, ha = pretrain(trials[:2], cfg, small_config())
    b, hb = pretrain(trials[:2], cfg, small_config())
    assert ha.epoch_loss == hb.epoch_loss
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_pretrain_epoch_zero_is_initial_loss(trials):
    cfg = TrainConfig(task="toi", pretrain_epochs=1, seed=4)
    _, hist = pretrain(trials[:3], cfg, small_config("toi"))
    init = ForecasterModel.initialize(small_config("toi"), derive_seed(4, "init", "toi"))
    assert hist.epoch_loss[0] == float(np.mean([_pretrain_step(init, t, "toi", False) for t in trials[:3]]))


def test_pretrain_rejects_empty():
    with pytest.raises(ValueError):
        pretrain([], TrainConfig())


def test_pretrained_toi_beats_untrained_on_held_out(base_toi):
    model, hist = base_toi
    assert hist.epoch_loss[-1] < hist.epoch_loss[0]
    init = ForecasterModel.initialize(small_config("toi"), derive_seed(0, "init", "toi"))
    held = generate_dataset(2, 10, seed=99).trials
    wins = [window_loss(model, t, "toi", False)[0] < window_loss(init, t, "toi", False)[0] for t in held]
    assert np.mean(wins) >= 0.95


def test_pretrained_cop_reduces_held_out_loss():
    # The untrained head already sits near zero, which is within label noise of
    # mid-foot landings, so COP is checked on the median loss instead of per clip.
    base = generate_base_dataset(12, seed=1)
    model, _ = pretrain(base.trials, TrainConfig(task="cop", pretrain_epochs=4, seed=0), small_config())
    init = ForecasterModel.initialize(small_config(), derive_seed(0, "init", "cop"))
    held = generate_dataset(2, 10, seed=99).trials
    a = np.median([window_loss(model, t, "cop", False)[0] for t in held])
    b = np.median([window_loss(init, t, "cop", False)[0] for t in held])
    assert a < 0.5 * b


def test_finetune_contract(base_toi, trials):
    base, _ = base_toi
    before = {k: v.copy() for k, v in base.params.items()}
    cfg = TrainConfig(task="toi", finetune_epochs=250, seed=2)
    a, ha = finetune(base, trials, cfg)
    b, _ = finetune(base, trials, cfg)
    assert all(np.array_equal(base.params[k], before[k]) for k in before)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert ha.epoch_loss[-1] <= ha.epoch_loss[0]
    # The frozen encoder is untouched, the head has moved.
    assert np.array_equal(a.params["b1c1.w"], base.params["b1c1.w"])
    assert not np.array_equal(a.params["rnn1.W_in"], base.params["rnn1.W_in"])
    with pytest.raises(ValueError):
        finetune(base, [], cfg)


def test_finetune_encoder_option_moves_encoder(trials):
    base = ForecasterModel.initialize(small_config("toi"), 3)
    cfg = TrainConfig(task="toi", finetune_epochs=1, finetune_encoder=True, seed=2)
    m, _ = finetune(base, trials[:2], cfg)
    assert not np.array_equal(m.params["b1c1.w"], base.params["b1c1.w"])


def test_fold_assignments_partition():
    for n, k in ((10, None), (10, 3), (24, 8), (5, 9)):
        folds = fold_assignments(n, k)
        flat = sorted(i for f in folds for i in f)
        assert flat == list(range(n))
    with pytest.raises(ValueError):
        fold_assignments(10, 1)


class _InverseLearner:
    """Reads the landing straight off the last two frames of each window."""

    def __init__(self):
        self.seen = []

    def fit(self, train, fold_key=()):

        def predict(trial):
            self.seen.append((trial.trial_id, tuple(t.trial_id for t in train)))
            out = []
            for k in range(1, 16):
                end = trial.impact_idx - k + 1
                out.append(invert_window(trial.frames[end - 2 : end])[0])
            return np.array(out)

        return predict


def test_loocv_partition_and_oracle():
    prof = SubjectProfile(1, 263.2, jitter_px=0, pixel_noise=0.0, cop_noise=0.0, velocity_jitter=0.0)
    clean = []
    for i in range(5):
        t = generate_trial(prof, "medium", ("rear", "mid", "fore")[i % 3], seed=100 + i)
        t.trial_id = i
        clean.append(t)
    learner = _InverseLearner()
    recs = loocv(None, clean, TrainConfig(task="cop"), 263.2, learner=learner)
    assert len(recs) == 15 * 5
    for k in range(1, 16):
        assert sum(r.fh_frames == k for r in recs) == 5
    for tid, train in learner.seen:
        assert tid not in train and len(train) == 4
    assert max(r.abs_error for r in recs) < 1e-6
    assert recs[0].truth == cop_to_mm(clean[0].cop_norm, 263.2)


def test_loocv_needs_two_trials(trials):
    with pytest.raises(ValueError):
        loocv(None, trials[:1], TrainConfig(), 250.0, learner=_InverseLearner())


def test_baseline_predicts_training_mean(trials):
    recs = baseline_records(trials, "cop", 250.0)
    held0 = [r for r in recs if r.trial == trials[0].trial_id]
    mean = np.mean([t.cop_norm for t in trials[1:]])
    assert all(r.prediction == pytest.approx(cop_to_mm(mean, 250.0), abs=1e-9) for r in held0)
    toi = baseline_records(trials, "toi", 250.0, folds=3)
    assert {round(r.prediction, 9) for r in toi} == {round(1000 * np.mean(np.arange(1, 16) / 60), 9)}


def test_predict_trial_matches_windows(base_toi, trials):
    model, _ = base_toi
    p = predict_trial(model, trials[1])
    assert p.shape == (15,)
    assert np.all(np.abs(p) < 1)


def test_records_round_trip(tmp_path, trials):
    recs = baseline_records(trials, "toi", 250.0)
    path = tmp_path / "r.csv"
    write_records(recs, path)
    assert read_records(path) == recs


def test_records_bad_row(tmp_path, trials):
    path = tmp_path / "r.csv"
    write_records(baseline_records(trials[:2], "cop", 250.0), path)
    lines = path.read_text().splitlines()
    lines[3] = lines[3].replace(",", ",x", 1)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CsvFormatError, match="line 4"):
        read_records(path)
    path.write_text("subject,trial\n1,2\n")
    with pytest.raises(CsvFormatError, match="lacks columns"):
        read_records(path)


def test_targets():
    tr = generate_dataset(1, 1, seed=0).trials[0]
    assert np.all(targets(tr, "cop") == tr.cop_norm)
    assert targets(tr, "toi")[-1] == 0.25
    with pytest.raises(ValueError):
        targets(tr, "speed")
