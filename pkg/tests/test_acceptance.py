"""Acceptance criteria, one test each.

Every test records a ``criterion N PASS|FAIL`` line, printed in the pytest
terminal summary. Criteria 5, 6 and 10 train full-size models or run in real
time and take most of the suite's wall time.
"""

import functools
import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE_LINES, fd_grad, full_loss, micro_model, rel_err
from stride.cli import main
from stride.datagen import generate_base_dataset, generate_dataset, normalize_frame
from stride.evaluation import (
    boxplot_stats, bootstrap_mae_ci, mae_by_fh, residual_regression, residuals, rmse_by_fh,
)
from stride.lmm import LmmData, back_transform, fit_lmm, lrt_pair
from stride.model import (
    REPORTED_CNN_PARAMS, ForecasterConfig, ForecasterModel, StreamState, cnn_param_count,
    forecast_window, rnn_param_count, save_weights, stream_predict,
)
from stride.numerics import (
    conv2d_same_nhwc, conv2d_same_nhwc_backward, maxpool2_nhwc, maxpool2_nhwc_backward, mse, relu6,
    relu6_grad, rnn_scan, rnn_scan_backward,
)
from stride.training import TrainConfig, baseline_records, loocv, predict_trial, pretrain

import oracles
from lmm_sim import anova_oneway, simulate


def verdict(num: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {num:2d} {'PASS' if ok else 'FAIL'}: {title} [{detail}]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def criterion(num: int, title: str):
    """Record a FAIL line when the check raises before reaching its verdict."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*a, **kw):
            try:
                return fn(*a, **kw)
            except AssertionError as exc:
                if not str(exc).startswith("criterion"):
                    verdict(num, title, False, f"{type(exc).__name__}: {exc}")
                raise
            except Exception as exc:
                ACCEPTANCE_LINES.append(f"criterion {num:2d} FAIL: {title} [{type(exc).__name__}: {exc}]")
                raise

        return run

    return wrap


# ---------------------------------------------------------------------------
# 1. Gradients
# ---------------------------------------------------------------------------


def _layer_errors(rng) -> dict:
    err = {}
    x = rng.normal(size=(2, 5, 6, 3))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    G = rng.normal(size=(2, 5, 6, 4))
    _, cols = conv2d_same_nhwc(x, w, b)
    dx, dw, db = conv2d_same_nhwc_backward(G, cols, w)
    f = lambda: float((conv2d_same_nhwc(x, w, b)[0] * G).sum())
    err["conv"] = max(rel_err(dx, fd_grad(f, x)), rel_err(dw, fd_grad(f, w)), rel_err(db, fd_grad(f, b)))

    # Distinct values keep the pooling argmax away from ties.
    xp = rng.permutation(2 * 6 * 7 * 3).reshape(2, 6, 7, 3) / 10.0
    out, arg = maxpool2_nhwc(xp)
    Gp = rng.normal(size=out.shape)
    dxp = maxpool2_nhwc_backward(Gp, arg, xp.shape)
    err["maxpool"] = rel_err(dxp, fd_grad(lambda: float((maxpool2_nhwc(xp)[0] * Gp).sum()), xp))

    # Keep relu6 inputs away from its kinks at 0 and 6.
    xr = rng.uniform(0.5, 5.5, 30) * rng.choice([-1.0, 1.0], 30) + np.where(rng.random(30) < 0.3, 7.0, 0.0)
    Gr = rng.normal(size=30)
    err["relu6"] = rel_err(relu6_grad(xr) * Gr, fd_grad(lambda: float((relu6(xr) * Gr).sum()), xr))

    U = rng.normal(size=(7, 2, 4)) * 0.5
    h0 = rng.normal(size=(2, 4)) * 0.5
    W = rng.normal(size=(4, 4)) * 0.5
    bias = rng.normal(size=4) * 0.1
    Gh = rng.normal(size=(7, 2, 4))
    H = rnn_scan(U, h0, W, bias)
    dU, dW, dbias, dh0 = rnn_scan_backward(Gh, H, h0, W)
    f = lambda: float((rnn_scan(U, h0, W, bias) * Gh).sum())
    err["rnn"] = max(rel_err(dU, fd_grad(f, U)), rel_err(dW, fd_grad(f, W)), rel_err(dbias, fd_grad(f, bias)),
                     rel_err(dh0, fd_grad(f, h0)))

    p, t = rng.normal(size=9), rng.normal(size=9)
    err["mse"] = rel_err(mse(p, t)[1], fd_grad(lambda: mse(p, t)[0], p))
    return err


@criterion(1, "gradient correctness")
def test_criterion_01_gradients():
    t0 = time.perf_counter()
    worst: dict = {}
    for seed in range(3):
        for k, v in _layer_errors(np.random.default_rng(seed)).items():
            worst[k] = max(worst.get(k, 0.0), v)
        for task in ("cop", "toi"):
            m = micro_model(seed, task)
            r = np.random.default_rng(100 + seed)
            frames = r.uniform(size=(5, 2, 8, 10))
            y = r.uniform(-0.4, 0.4, 3)
            _, grads = full_loss(m, frames, y)
            for name, p in m.params.items():
                num = fd_grad(lambda: full_loss(m, frames, y, need_grads=False)[0], p)
                key = "model." + name.split(".")[0]
                worst[key] = max(worst.get(key, 0.0), rel_err(grads[name], num))
    secs = time.perf_counter() - t0
    top = max(worst.values())
    ok = top < 1e-6 and secs < 60
    verdict(1, "gradient correctness", ok, f"max rel err {top:.2e} over {len(worst)} layers, {secs:.1f} s")


# ---------------------------------------------------------------------------
# 2. Parameter accounting
# ---------------------------------------------------------------------------


@criterion(2, "parameter accounting")
def test_criterion_02_param_counts():
    cfg = ForecasterConfig()
    m = ForecasterModel.initialize(cfg, 0)
    walk_cnn = sum(v.size for k, v in m.params.items() if not k.startswith("rnn"))
    walk_rnn = sum(v.size for k, v in m.params.items() if k.startswith("rnn"))
    cnn, rnn = cnn_param_count(cfg), rnn_param_count(cfg)
    known_gap = cnn - REPORTED_CNN_PARAMS
    ok = cnn == 52_572 and rnn == 34_147 and (walk_cnn, walk_rnn) == (cnn, rnn) and known_gap == 5_135
    verdict(2, "parameter accounting", ok,
            f"CNN {cnn} (walk {walk_cnn}, reported {REPORTED_CNN_PARAMS}, known difference {known_gap}), "
            f"RNN {rnn} (walk {walk_rnn})")


# ---------------------------------------------------------------------------
# 3. Shape contract and stream/offline equality
# ---------------------------------------------------------------------------


@criterion(3, "shape contract")
def test_criterion_03_shapes_and_streaming():
    m = ForecasterModel.initialize(ForecasterConfig(task="toi"), 3, dtype=np.float64)
    trial = generate_dataset(1, 1, seed=17).trials[0]
    frames = normalize_frame(trial.frames).astype(np.float64)
    latent = m.encode(frames[:1])[0]
    offline = predict_trial(m, trial)
    state = StreamState.for_model(m)
    streamed = {}
    for t in range(trial.impact_idx):
        y, state = stream_predict(m, frames[t], state)
        streamed[t] = y
    mismatches = sum(streamed[trial.impact_idx - k] != offline[k - 1] for k in range(1, 16))
    ok = frames.shape[1:] == (2, 25, 50) and latent.shape == (576,) and mismatches == 0
    verdict(3, "shape contract", ok, f"latent {latent.shape}, {mismatches}/15 stream-offline mismatches")


# ---------------------------------------------------------------------------
# 4. Causality
# ---------------------------------------------------------------------------


@criterion(4, "causality")
def test_criterion_04_causality():
    m = ForecasterModel.initialize(ForecasterConfig(task="cop"), 4, dtype=np.float64)
    trials = generate_dataset(1, 4, seed=23).trials
    rng = np.random.default_rng(2024)
    ref = {t.trial_id: predict_trial(m, t) for t in trials}
    ref_stream = {}
    for t in trials:
        f = normalize_frame(t.frames).astype(np.float64)
        st = StreamState.for_model(m)
        ref_stream[t.trial_id] = [stream_predict(m, x, st)[0] for x in f]
    broken = 0
    for _ in range(100):
        t = trials[int(rng.integers(len(trials)))]
        k = int(rng.integers(1, 16))
        j = int(rng.integers(t.impact_idx - k + 1, len(t.frames)))  # strictly after the forecast frame
        mut = t.frames.copy()
        mut[j] = rng.integers(0, 256, mut[j].shape, dtype=mut.dtype)
        t2 = type(t)(**{**t.__dict__, "frames": mut})
        broken += predict_trial(m, t2)[k - 1] != ref[t.trial_id][k - 1]
        f = normalize_frame(mut[: j + 1]).astype(np.float64)
        st = StreamState.for_model(m)
        outs = [stream_predict(m, x, st)[0] for x in f]
        broken += outs[:j] != ref_stream[t.trial_id][:j]
    verdict(4, "causality", broken == 0, f"{broken} changed forecasts over 100 mutations")


# ---------------------------------------------------------------------------
# 5 and 6. Synthetic learnability
# ---------------------------------------------------------------------------

LEARN = dict(base_clips=48, base_seed=11, epochs=15, train_seed=5, data_seed=7, folds=8, cv_seed=3)


@functools.lru_cache(maxsize=None)
def learn(task: str):
    """Pretrain, then 8-fold per-subject fine-tuning on 4 subjects x 24 trials."""
    t0 = time.perf_counter()
    base = generate_base_dataset(LEARN["base_clips"], seed=LEARN["base_seed"])
    model, _ = pretrain(base.trials, TrainConfig(task=task, pretrain_epochs=LEARN["epochs"], seed=LEARN["train_seed"]))
    ds = generate_dataset(4, 24, seed=LEARN["data_seed"])
    cfg = TrainConfig(task=task, folds=LEARN["folds"], seed=LEARN["cv_seed"])
    recs, base_recs = [], []
    for sid in ds.subject_ids():
        trials, L = ds.subject_trials(sid), ds.profile(sid).insole_mm
        recs.extend(loocv(model, trials, cfg, L))
        base_recs.extend(baseline_records(trials, task, L, folds=LEARN["folds"]))
    return recs, base_recs, time.perf_counter() - t0


@pytest.mark.slow
@criterion(5, "COP learnability")
def test_criterion_05_cop_learnability():
    recs, base, secs = learn("cop")
    m, b = mae_by_fh(recs).value_at(3), mae_by_fh(base).value_at(3)
    ok = m <= 0.8 * b and secs < 1800
    verdict(5, "COP learnability", ok, f"MAE@50ms {m:.2f} mm vs baseline {b:.2f} mm (ratio {m / b:.3f}), {secs:.0f} s")


@pytest.mark.slow
@criterion(6, "TOI learnability")
def test_criterion_06_toi_learnability():
    recs, base, secs = learn("toi")
    mae = mae_by_fh(recs)
    m, b = mae.value_at(3), mae_by_fh(base).value_at(3)
    k1, k15 = mae.value_at(1), mae.value_at(15)
    ok = m <= 0.8 * b and k1 <= k15
    verdict(6, "TOI learnability", ok,
            f"MAE@50ms {m:.2f} ms vs baseline {b:.2f} ms (ratio {m / b:.3f}); "
            f"MAE@16.67ms {k1:.2f} <= MAE@250ms {k15:.2f}; {secs:.0f} s")


# ---------------------------------------------------------------------------
# 7. Evaluation oracles
# ---------------------------------------------------------------------------


@criterion(7, "evaluation oracles")
def test_criterion_07_evaluation_oracles():
    rng = np.random.default_rng(77)
    worst = 0.0
    for i in range(1000):
        recs = oracles.random_records(rng, task=("cop", "toi")[i % 2])
        mae, rmse = mae_by_fh(recs), rmse_by_fh(recs)
        res = residuals(recs)
        for j, r in enumerate(recs):
            worst = max(worst, abs(res[j] - (r.truth - r.prediction)))
        for k in range(1, 16):
            worst = max(worst, abs(mae.value_at(k) - oracles.mae_loop(recs, k)),
                        abs(rmse.value_at(k) - oracles.rmse_loop(recs, k)))
        k = int(rng.integers(1, 16))
        bucket = [r.truth - r.prediction for r in recs if r.fh_frames == k]
        b = boxplot_stats(bucket)
        med, q1, q3, iqr, wlo, whi, out = oracles.boxplot_loop(bucket)
        worst = max(worst, *(abs(g - w) for g, w in zip((b.median, b.q1, b.q3, b.iqr, b.whisker_lo, b.whisker_hi),
                                                         (med, q1, q3, iqr, wlo, whi))))
        assert b.outliers == out
        errs = [abs(e) for e in bucket]
        got = bootstrap_mae_ci(errs, B=200, level=0.95, seed=i)
        want = oracles.bootstrap_loop(errs, 200, 0.95, i)
        worst = max(worst, abs(got[0] - want[0]), abs(got[1] - want[1]))
        truth = [r.truth for r in recs if r.fh_frames == k]
        if len(bucket) >= 3:
            fit = residual_regression(bucket, truth)
            slope, intercept = oracles.ols_normal_equations(truth, bucket)
            worst = max(worst, abs(fit.slope - slope), abs(fit.intercept - intercept))
    y = np.random.default_rng(78).uniform(0, 260, 200)
    const = residual_regression(y - y.mean(), y).slope
    ok = worst < 1e-10 and abs(const - 1.0) < 1e-9
    verdict(7, "evaluation oracles", ok, f"max deviation {worst:.1e} over 1000 record sets; constant-predictor slope "
            f"{const:.12f}")


# ---------------------------------------------------------------------------
# 8. LMM oracles
# ---------------------------------------------------------------------------


@criterion(8, "LMM oracles")
def test_criterion_08_lmm_oracles():
    d = simulate(3, G=None, orthogonal_noise=True)
    fit = fit_lmm(d, "REML")
    ols, *_ = np.linalg.lstsq(d.X, d.y, rcond=None)
    a_err = float(np.max(np.abs(fit.beta - ols)))

    rng = np.random.default_rng(4)
    groups = np.repeat(np.arange(12), 30)
    y = 2.0 + rng.normal(0, 0.7, 12)[groups] + rng.normal(0, 1.0, 360)
    fit = fit_lmm(LmmData(y, np.ones((360, 1)), ("intercept",), np.ones((360, 1)), groups), "REML")
    sb, sw = anova_oneway(y, groups)
    b_err = max(abs(fit.G[0, 0] / sb - 1), abs(fit.sigma2 / sw - 1))

    rej = 0
    for s in range(500):
        ds = simulate(s, beta=(1.0, 0.3, 0.0), G=np.array([[0.1]]), q=1)
        stat, _ = lrt_pair(ds, ds.without("torso_vel"))
        rej += stats.chi2.sf(max(stat, 0.0), 1) < 0.05
    size = rej / 500

    mc_err = 0.0
    z = np.random.default_rng(11).standard_normal(1_000_000)
    for mu, s2 in ((1.0, 1.0), (2.3, 0.4), (1.7, 0.09)):
        sample = mu + math.sqrt(s2) * z
        mc_err = max(mc_err, abs(back_transform(mu, s2) / np.mean(sample**3) - 1))

    ok = a_err < 1e-6 and b_err < 1e-3 and 0.03 <= size <= 0.07 and mc_err < 0.01
    verdict(8, "LMM oracles", ok, f"(a) |beta-OLS| {a_err:.1e}; (b) ANOVA rel {b_err:.1e}; "
            f"(c) LRT size {size:.3f}; (d) Monte Carlo rel {mc_err:.1e}")


# ---------------------------------------------------------------------------
# 9. Pipeline determinism
# ---------------------------------------------------------------------------

TINY = ["--seed", "9", "--subjects", "2", "--trials", "3", "--base-clips", "2", "--epochs", "1",
        "--finetune-epochs", "2", "--bootstrap", "100"]


@criterion(9, "pipeline determinism")
def test_criterion_09_pipeline_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["pipeline", "--out", str(a), *TINY]) == 0
    assert main(["pipeline", "--out", str(b), *TINY]) == 0
    names = sorted(p.name for p in a.iterdir())
    data = [n for n in names if not n.endswith(".manifest.json")]
    differ = [n for n in data if (a / n).read_bytes() != (b / n).read_bytes()]
    hashes = [json.loads((a / n).read_text())["manifest_hash"] == json.loads((b / n).read_text())["manifest_hash"]
              for n in names if n.endswith(".manifest.json")]
    kinds = {n.rsplit(".", 1)[1] for n in data}
    ok = not differ and all(hashes) and kinds == {"gait", "sfw", "csv", "svg"} and names == sorted(
        p.name for p in b.iterdir())
    verdict(9, "pipeline determinism", ok, f"{len(data) - len(differ)}/{len(data)} artifacts identical "
            f"({', '.join(sorted(kinds))}), {sum(hashes)}/{len(hashes)} manifest hashes equal")


# ---------------------------------------------------------------------------
# 10. Real-time budget
# ---------------------------------------------------------------------------


@pytest.mark.slow
@criterion(10, "real-time budget")
def test_criterion_10_realtime(tmp_path):
    save_weights(ForecasterModel.initialize(ForecasterConfig(task="cop"), 1), tmp_path / "base_cop.sfw")
    save_weights(ForecasterModel.initialize(ForecasterConfig(task="toi"), 2), tmp_path / "base_toi.sfw")
    assert main(["livesim", "--seed", "1", "--out", str(tmp_path), "--duration-s", "120", "--repeats", "1"]) == 0
    (r,) = json.loads((tmp_path / "livesim.json").read_text())
    ok = r["effective_fps"] >= 59.9 and r["dropped"] == 0 and r["latency_p99_ms"] < 1000 / 60
    verdict(10, "real-time budget", ok, f"{r['effective_fps']:.3f} FPS, {r['frames_processed']} frames, "
            f"{r['dropped']} dropped, p99 {r['latency_p99_ms']:.2f} ms")
