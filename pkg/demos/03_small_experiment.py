"""A scaled-down run of the whole study: pretrain, cross-validate, evaluate, model the errors.

Run with ``python3 demos/03_small_experiment.py [out_dir]``. A narrow network and
a few epochs keep it under a minute on one core; the numbers are only
illustrative. The ``stride pipeline`` command runs the full-size version.
"""

# %%
import logging
import sys
from pathlib import Path

from stride.datagen import generate_base_dataset, generate_dataset
from stride.evaluation import EVAL_FIELDS, RESIDUAL_FIELDS, evaluation_rows, mae_by_fh, residual_rows, write_rows
from stride.lmm import analyze
from stride.model import ForecasterConfig
from stride.plots import emit_plots
from stride.training import TrainConfig, baseline_records, loocv, pretrain

logging.basicConfig(level=logging.WARNING)
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)
narrow = dict(block_channels=(4, 8, 8), convs_per_block=1, h1=16, h2=8)

# %%
# Pretrain a TOI model on clips from subjects outside the study.
base = generate_base_dataset(16, seed=11)
model, hist = pretrain(base.trials, TrainConfig(task="toi", pretrain_epochs=6, seed=5),
                       ForecasterConfig(task="toi", **narrow))
print("pretraining loss by epoch:", [round(x, 4) for x in hist.epoch_loss])

# %%
# Per-subject 4-fold fine-tuning, against a baseline that always predicts the
# training-set mean.
ds = generate_dataset(3, 12, seed=7)
cfg = TrainConfig(task="toi", finetune_epochs=60, folds=4, seed=3)
recs, base_recs = [], []
for sid in ds.subject_ids():
    trials, L = ds.subject_trials(sid), ds.profile(sid).insole_mm
    recs += loocv(model, trials, cfg, L)
    base_recs += baseline_records(trials, "toi", L, folds=4)
mae, bmae = mae_by_fh(recs), mae_by_fh(base_recs)
for k in (1, 3, 9, 15):
    print(f"FH {mae.fh_ms[k - 1]:6.2f} ms: MAE {mae.value_at(k):6.2f} ms, baseline {bmae.value_at(k):6.2f} ms")

# %%
# Tables, figures and the mixed model of cube-root absolute errors.
write_rows(evaluation_rows(recs, "toi", B=500), EVAL_FIELDS, out / "eval.csv")
write_rows(residual_rows(recs), RESIDUAL_FIELDS, out / "residuals.csv")
figs = emit_plots(out / "eval.csv", out / "residuals.csv", out)
print(f"wrote {len(figs)} figures to {out}/")

an = analyze(recs, "toi")
print("fixed effects kept:", dict(zip(an.final.names, [round(float(b), 4) for b in an.final.beta])))
print("dropped:", an.dropped or "none")
for d in an.diagnostics:
    print(f"  {d.check:12s} p={d.p_value:.3g}{'  (flagged)' if d.flag else ''}")
