"""The stride command line: data generation through evaluation, LMM, plots and live simulation.

Exit codes: 0 success, 2 bad or contradictory flags, 3 missing or unreadable
input, 4 malformed artifact, 5 task mismatch, 6 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import Dataset, generate_base_dataset, generate_dataset, read_dataset, write_dataset
from .errors import FormatError, NonFiniteGradientError, TaskMismatchError
from .evaluation import (
    DEFAULT_SPLIT_MS, EVAL_FIELDS, REGRESSION_FIELDS, RESIDUAL_FIELDS, evaluation_rows, mae_by_fh,
    mean_ftoi_curve, piecewise_fits, regression_rows, residual_rows, write_rows,
)
from .lmm import DIAG_FIELDS, REPORT_FIELDS, analyze, diagnostic_rows, report_rows, write_table
from .model import ForecasterConfig, load_weights, save_weights
from .plots import emit_plots
from .training import (
    TrainConfig, baseline_records, finetune, loocv, pretrain, read_records, write_records,
)

log = logging.getLogger("stride")

EXIT_USAGE, EXIT_INPUT, EXIT_FORMAT, EXIT_TASK, EXIT_NUMERIC = 2, 3, 4, 5, 6


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def file_digest(path) -> str:
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Run record written next to a command's outputs.

    The hash covers the command, its configuration, seeds, input digests and
    tool version but not timings, so reruns with identical inputs reproduce it.
    """

    def __init__(self, command: str, config: dict, seed, inputs: list):
        self.command = command
        self.config = {k: v for k, v in sorted(config.items()) if k not in ("func", "out", "verbose")}
        self.seed = seed
        self.inputs = {str(p): file_digest(p) for p in inputs}
        self.outputs: dict = {}
        self.t0 = time.perf_counter()
        self.timings: dict = {}

    @property
    def hash(self) -> str:
        core = dict(command=self.command, config=self.config, seed=self.seed,
                    inputs=sorted(self.inputs.values()), version=__version__)
        return hashlib.blake2b(json.dumps(core, sort_keys=True, default=str).encode(), digest_size=16).hexdigest()

    def lap(self, name: str) -> None:
        self.timings[name] = round(time.perf_counter() - self.t0, 3)

    def add(self, path) -> None:
        self.outputs[str(path)] = file_digest(path)

    def write(self, out_dir: Path) -> Path:
        self.lap("total")
        doc = dict(command=self.command, manifest_hash=self.hash, config=self.config, seed=self.seed,
                   inputs=self.inputs, outputs=self.outputs, version=__version__, timings_s=self.timings)
        path = out_dir / f"{self.command}.manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
        return path


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"input not found: {p}")
    return p


def _tasks(task: str) -> list:
    return ["cop", "toi"] if task == "both" else [task]


def _folds(value: str):
    if value == "loo":
        return None
    try:
        k = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--folds must be 'loo' or an integer, not {value!r}") from None
    if k < 2:
        raise argparse.ArgumentTypeError("--folds needs at least 2")
    return k


def _positive(kind):
    def parse(v):
        x = kind(v)
        if not x > 0:
            raise argparse.ArgumentTypeError(f"expected a positive value, got {v}")
        return x
    return parse


def _subset(ds: Dataset, subjects, trials) -> Dataset:
    ids = ds.subject_ids()[: subjects] if subjects else ds.subject_ids()
    keep = []
    for sid in ids:
        ts = ds.subject_trials(sid)
        keep.extend(ts[:trials] if trials else ts)
    return Dataset([ds.profile(s) for s in ids], keep, ds.seed, ds.version)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    out = args.out
    man = Manifest("gen", vars(args), args.seed, [])
    ds = generate_dataset(args.subjects, args.trials, seed=args.seed)
    base = generate_base_dataset(args.base_clips, seed=args.seed + 1)
    for name, d in (("dataset.gait", ds), ("base.gait", base)):
        write_dataset(d, out / name)
        man.add(out / name)
    man.write(out)
    log.info("wrote %d trials (%d subjects) and %d base clips", len(ds.trials), len(ds.profiles), len(base.trials))
    return 0


def cmd_pretrain(args) -> int:
    data = _require(args.data or args.out / "base.gait")
    man = Manifest("pretrain", vars(args), args.seed, [data])
    base = read_dataset(data)
    for task in _tasks(args.task):
        cfg = TrainConfig(task=task, pretrain_epochs=args.epochs, seed=args.seed)
        model, hist = pretrain(base.trials, cfg, ForecasterConfig(task=task))
        path = args.out / f"base_{task}.sfw"
        save_weights(model, path)
        man.add(path)
        man.lap(task)
        log.info("%s pretrain loss %.5f -> %.5f", task, hist.epoch_loss[0], hist.epoch_loss[-1])
    man.write(args.out)
    return 0


def _load_base(args, task: str):
    path = _require(Path(args.weights_dir or args.out) / f"base_{task}.sfw")
    return load_weights(path), path


def cmd_finetune(args) -> int:
    data = _require(args.data or args.out / "dataset.gait")
    ds = read_dataset(data)
    if args.subject not in ds.subject_ids():
        raise UsageError(f"subject {args.subject} not in {data}")
    trials = ds.subject_trials(args.subject)[: args.trials] if args.trials else ds.subject_trials(args.subject)
    inputs = [data]
    written = []
    for task in _tasks(args.task):
        base, wpath = _load_base(args, task)
        inputs.append(wpath)
        cfg = TrainConfig(task=task, finetune_epochs=args.epochs, seed=args.seed)
        model, _ = finetune(base, trials, cfg, seed_key=(args.subject,))
        path = args.out / f"ft_{task}_s{args.subject}.sfw"
        save_weights(model, path)
        written.append(path)
    man = Manifest("finetune", vars(args), args.seed, inputs)
    for p in written:
        man.add(p)
    man.write(args.out)
    return 0


def clamp_cop(records: list, insole: dict) -> list:
    """Clip COP predictions to the insole, i.e. normalized [-0.5, 0.5]."""
    out = []
    for r in records:
        if r.task == "cop":
            r = dataclasses.replace(r, prediction=float(np.clip(r.prediction, 0.0, insole[r.subject])))
        out.append(r)
    return out


def cmd_loocv(args) -> int:
    data = _require(args.data or args.out / "dataset.gait")
    ds = _subset(read_dataset(data), args.subjects, args.trials)
    inputs = [data]
    records, baseline = [], []
    for task in _tasks(args.task):
        base, wpath = _load_base(args, task)
        inputs.append(wpath)
        cfg = TrainConfig(task=task, finetune_epochs=args.epochs, seed=args.seed, folds=args.folds)
        for sid in ds.subject_ids():
            trials = ds.subject_trials(sid)
            L = ds.profile(sid).insole_mm
            records.extend(loocv(base, trials, cfg, L))
            baseline.extend(baseline_records(trials, task, L, folds=args.folds))
            log.info("%s subject %d done", task, sid)
    if args.clamp_cop:
        insole = {p.subject_id: p.insole_mm for p in ds.profiles}
        records = clamp_cop(records, insole)
    man = Manifest("loocv", vars(args), args.seed, inputs)
    for name, recs in (("records.csv", records), ("baseline_records.csv", baseline)):
        write_records(recs, args.out / name)
        man.add(args.out / name)
    man.write(args.out)
    for task in _tasks(args.task):
        m = mae_by_fh([r for r in records if r.task == task])
        b = mae_by_fh([r for r in baseline if r.task == task])
        log.info("%s MAE at 50 ms: model %.3f, baseline %.3f", task, m.value_at(3), b.value_at(3))
    return 0


def cmd_eval(args) -> int:
    src = _require(args.records or args.out / "records.csv")
    records = read_records(src)
    man = Manifest("eval", vars(args), args.seed, [src])
    tasks = sorted({r.task for r in records})
    ev, reg = [], []
    for t in tasks:
        ev.extend(evaluation_rows(records, t, B=args.bootstrap, seed=args.seed))
        reg.extend(regression_rows(records, t))
    for name, rows, fields in (("eval.csv", ev, EVAL_FIELDS), ("residuals.csv", residual_rows(records),
                               RESIDUAL_FIELDS), ("regressions.csv", reg, REGRESSION_FIELDS)):
        write_rows(rows, fields, args.out / name)
        man.add(args.out / name)
    man.write(args.out)
    if "toi" in tasks:
        curve, plateaus = mean_ftoi_curve([r for r in records if r.task == "toi"])
        mae = mae_by_fh([r for r in records if r.task == "toi"])
        try:
            lo, hi = piecewise_fits(mae, args.fh_split_ms)
            log.info("TOI MAE slope below/above %.2f ms: %.4f / %.4f", args.fh_split_ms, lo.slope, hi.slope)
        except ValueError as exc:
            log.warning("piecewise fit skipped: %s", exc)
        log.info("TOI plateaus (ms): %s", {k: round(v, 1) for k, v in plateaus.items()})
    return 0


def cmd_lmm(args) -> int:
    src = _require(args.records or args.out / "records.csv")
    records = read_records(src)
    man = Manifest("lmm", vars(args), args.seed, [src])
    rep, diag = [], []
    for t in sorted({r.task for r in records}):
        an = analyze(records, t, alpha=args.alpha)
        rep.extend(report_rows(an, records))
        diag.extend(diagnostic_rows(an))
    write_table(rep, REPORT_FIELDS, args.out / "lmm_report.csv")
    write_table(diag, DIAG_FIELDS, args.out / "lmm_diagnostics.csv")
    man.add(args.out / "lmm_report.csv")
    man.add(args.out / "lmm_diagnostics.csv")
    man.write(args.out)
    return 0


def cmd_plots(args) -> int:
    ev = _require(args.eval or args.out / "eval.csv")
    rs = _require(args.residuals or args.out / "residuals.csv")
    man = Manifest("plots", vars(args), None, [ev, rs])
    for p in emit_plots(ev, rs, args.out, manifest=man.hash):
        man.add(p)
    man.write(args.out)
    return 0


def cmd_livesim(args) -> int:
    from .livesim import run_protocol

    cop_p = _require(args.cop_weights or args.out / "base_cop.sfw")
    toi_p = _require(args.toi_weights or args.out / "base_toi.sfw")
    cop, toi = load_weights(cop_p), load_weights(toi_p)
    man = Manifest("livesim", vars(args), args.seed, [cop_p, toi_p])
    reports = run_protocol(cop, toi, args.duration_s, args.repeats, mode=args.mode, seed=args.seed)
    path = args.out / "livesim.json"
    path.write_text(json.dumps([r.as_dict() for r in reports], indent=2) + "\n", encoding="utf-8")
    man.add(path)
    man.write(args.out)
    for r in reports:
        print(f"run {r.trial_id}: {r.effective_fps:.3f} FPS, {r.frames_processed} frames, {r.dropped} dropped, "
              f"p99 {r.latency_p99_ms:.2f} ms")
    fps = [r.effective_fps for r in reports]
    print(f"mean {np.mean(fps):.3f} FPS (SD {np.std(fps, ddof=1) if len(fps) > 1 else 0.0:.3f})")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stride", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed_required: bool):
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        if seed_required:
            p.add_argument("--seed", type=int, required=True)
        else:
            p.add_argument("--seed", type=int, default=0)

    def scale(p, subjects=8, trials=90):
        p.add_argument("--subjects", type=_positive(int), default=subjects)
        p.add_argument("--trials", type=_positive(int), default=trials, help="trials per subject")

    task = dict(choices=("cop", "toi", "both"), default="both")

    p = sub.add_parser("gen", help="generate the synthetic dataset and base-pretraining clips")
    common(p, True)
    scale(p)
    p.add_argument("--base-clips", type=_positive(int), default=48)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="pretrain base models")
    common(p, True)
    p.add_argument("--data", type=Path)
    p.add_argument("--task", **task)
    p.add_argument("--epochs", type=_positive(int), default=100)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a base model on one subject")
    common(p, True)
    p.add_argument("--data", type=Path)
    p.add_argument("--weights-dir", type=Path)
    p.add_argument("--subject", type=int, required=True)
    p.add_argument("--trials", type=_positive(int))
    p.add_argument("--task", **task)
    p.add_argument("--epochs", type=_positive(int), default=250)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("loocv", help="cross-validated forecasts for every subject")
    common(p, True)
    p.add_argument("--data", type=Path)
    p.add_argument("--weights-dir", type=Path)
    p.add_argument("--subjects", type=_positive(int))
    p.add_argument("--trials", type=_positive(int))
    p.add_argument("--task", **task)
    p.add_argument("--epochs", type=_positive(int), default=250)
    p.add_argument("--folds", type=_folds, default=None, help="'loo' (default) or K for a K-fold approximation")
    p.add_argument("--clamp-cop", action="store_true", help="clip reported COP forecasts to the insole")
    p.set_defaults(func=cmd_loocv)

    p = sub.add_parser("eval", help="MAE/RMSE/residual tables from a record CSV")
    common(p, False)
    p.add_argument("--records", type=Path)
    p.add_argument("--bootstrap", type=_positive(int), default=10_000)
    p.add_argument("--fh-split-ms", type=_positive(float), default=DEFAULT_SPLIT_MS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lmm", help="mixed-effects analysis of a record CSV")
    common(p, False)
    p.add_argument("--records", type=Path)
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_lmm)

    p = sub.add_parser("plots", help="SVG figures from eval and residual CSVs")
    common(p, False)
    p.add_argument("--eval", type=Path)
    p.add_argument("--residuals", type=Path)
    p.set_defaults(func=cmd_plots)

    p = sub.add_parser("livesim", help="60 FPS streaming benchmark with both models")
    common(p, True)
    p.add_argument("--cop-weights", type=Path)
    p.add_argument("--toi-weights", type=Path)
    p.add_argument("--duration-s", type=_positive(float), default=120.0)
    p.add_argument("--repeats", type=_positive(int), default=3)
    p.add_argument("--mode", choices=("windowed", "continuous"), default="windowed")
    p.set_defaults(func=cmd_livesim)

    p = sub.add_parser("pipeline", help="gen, pretrain, loocv, eval, lmm and plots in one go")
    common(p, True)
    scale(p)
    p.add_argument("--base-clips", type=_positive(int), default=48)
    p.add_argument("--task", **task)
    p.add_argument("--epochs", type=_positive(int), default=100, help="pretraining epochs")
    p.add_argument("--finetune-epochs", type=_positive(int), default=250)
    p.add_argument("--folds", type=_folds, default=None)
    p.add_argument("--clamp-cop", action="store_true")
    p.add_argument("--bootstrap", type=_positive(int), default=10_000)
    p.add_argument("--fh-split-ms", type=_positive(float), default=DEFAULT_SPLIT_MS)
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=_run_pipeline)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.func is _run_pipeline:
        return _run_pipeline(args)
    return _dispatch(args.func, args)


def _run_pipeline(args) -> int:
    """gen -> pretrain -> loocv -> eval -> lmm -> plots under one master seed."""
    ns = argparse.Namespace(weights_dir=None, eval=None, residuals=None, **vars(args))
    seq = [
        (cmd_gen, {}),
        (cmd_pretrain, dict(epochs=args.epochs, data=None)),
        (cmd_loocv, dict(epochs=args.finetune_epochs, subjects=None, trials=None, data=None)),
        (cmd_eval, dict(records=None)),
        (cmd_lmm, dict(records=None)),
        (cmd_plots, {}),
    ]
    for func, overrides in seq:
        step = argparse.Namespace(**{**vars(ns), **overrides})
        code = _dispatch(func, step)
        if code:
            return code
    return 0


def _dispatch(func, args) -> int:
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FormatError as exc:
        print(f"error: malformed artifact: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except TaskMismatchError as exc:
        print(f"error: task mismatch: {exc}", file=sys.stderr)
        return EXIT_TASK
    except (NonFiniteGradientError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
