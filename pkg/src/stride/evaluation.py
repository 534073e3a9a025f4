"""Forecast-quality analytics over :class:`~stride.training.ForecastRecord` lists."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import CsvFormatError
from .numerics import Rng
from .training import FRAME_MS

N_FH = 15
FH_GRID_MS = np.arange(1, N_FH + 1) * FRAME_MS
DEFAULT_SPLIT_MS = 166.67
# Horizons are usually quoted to 0.01 ms, so range limits match within half that.
FH_TOL_MS = 0.005


@dataclass
class FhCurve:
    fh_ms: np.ndarray
    values: np.ndarray  # NaN where a horizon has no records
    metric: str
    counts: np.ndarray

    def value_at(self, fh_frames: int) -> float:
        return float(self.values[fh_frames - 1])

    def present(self) -> np.ndarray:
        return np.isfinite(self.values)


@dataclass
class RegressionFit:
    slope: float
    intercept: float
    r2: float
    p_value: float
    n: int
    degenerate: bool = False


@dataclass
class Correlation:
    r: float
    n: int
    defined: bool


@dataclass
class BoxStats:
    median: float
    q1: float
    q3: float
    iqr: float
    whisker_lo: float
    whisker_hi: float
    outliers: list = field(default_factory=list)


def _buckets(records, fn, n_fh: int = N_FH) -> list:
    out = [[] for _ in range(n_fh)]
    for r in records:
        out[r.fh_frames - 1].append(fn(r))
    return [np.asarray(b, dtype=np.float64) for b in out]


def _curve(records, fn, reduce, metric: str) -> FhCurve:
    buckets = _buckets(records, fn)
    vals = np.array([reduce(b) if b.size else np.nan for b in buckets])
    return FhCurve(FH_GRID_MS.copy(), vals, metric, np.array([b.size for b in buckets]))


def mae_by_fh(records) -> FhCurve:
    return _curve(records, lambda r: abs(r.truth - r.prediction), np.mean, "MAE")


def rmse_by_fh(records) -> FhCurve:
    return _curve(records, lambda r: r.truth - r.prediction, lambda e: np.sqrt(np.mean(e * e)), "RMSE")


def residuals(records) -> np.ndarray:
    """``truth - prediction``: positive is under-prediction."""
    return np.array([r.truth - r.prediction for r in records], dtype=np.float64)


def ols(x, y) -> RegressionFit:
    """Simple linear regression of ``y`` on ``x`` with a t-test on the slope."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    if n < 3:
        raise ValueError(f"regression needs n >= 3, got {n}")
    if np.ptp(x) == 0.0:
        raise ValueError("regressor has zero variance; slope undefined")
    xc = x - x.mean()
    sxx = float(xc @ xc)
    yc = y - y.mean()
    slope = float(xc @ yc) / sxx
    intercept = float(y.mean() - slope * x.mean())
    resid = yc - slope * xc
    sse = float(resid @ resid)
    sst = float(yc @ yc)
    if np.ptp(y) == 0.0:
        return RegressionFit(slope, intercept, 0.0, float("nan"), n, degenerate=True)
    r2 = min(max(1.0 - sse / sst, 0.0), 1.0)
    if sse == 0.0:
        p = 0.0
    else:
        se = np.sqrt(sse / (n - 2) / sxx)
        p = float(2.0 * stats.t.sf(abs(slope / se), n - 2))
    return RegressionFit(slope, intercept, r2, p, n)


def residual_regression(resid, truths) -> RegressionFit:
    """Regress residuals on ground truth (``r ~ y``)."""
    return ols(truths, resid)


def residual_regressions_by_fh(records) -> list:
    """One ``r ~ y`` fit per horizon; degenerate buckets come back flagged, not raised."""
    out = []
    for k in range(1, N_FH + 1):
        rs = [r for r in records if r.fh_frames == k]
        try:
            fit = residual_regression(residuals(rs), [r.truth for r in rs])
        except ValueError:
            fit = RegressionFit(float("nan"), float("nan"), 0.0, float("nan"), len(rs), degenerate=True)
        out.append(fit)
    return out


def slope_fh_correlation(fh_ms, slopes) -> Correlation:
    x = np.asarray(fh_ms, dtype=np.float64)
    y = np.asarray(slopes, dtype=np.float64)
    if x.size < 3:
        raise ValueError("need at least 3 horizons")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        return Correlation(float("nan"), x.size, False)
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    return Correlation(float(xc @ yc) / np.sqrt(sxx * syy), x.size, True)


def boxplot_stats(values) -> BoxStats:
    """Quartiles by linear interpolation between closest ranks; 1.5 IQR whiskers."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("boxplot of an empty sample")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return BoxStats(
        median=float(med), q1=float(q1), q3=float(q3), iqr=float(iqr),
        # Interpolated quartiles can pass the last in-fence point; whiskers then sit on the box.
        whisker_lo=float(min(inside.min(), q1)), whisker_hi=float(max(inside.max(), q3)),
        outliers=[float(x) for x in v[(v < lo_fence) | (v > hi_fence)]],
    )


def bootstrap_mae_ci(abs_errors, B: int = 10_000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean absolute error."""
    e = np.asarray(abs_errors, dtype=np.float64)
    n = e.size
    if n < 2:
        raise ValueError(f"bootstrap needs n >= 2, got {n}")
    rng = Rng(seed)
    idx = rng.integers(0, n, B * n).reshape(B, n)
    means = np.sort(e[idx].mean(axis=1))
    a = (1.0 - level) / 2.0

    def order_stat(p: float) -> float:
        # Smallest replicate whose empirical CDF reaches p. The tolerance stops
        # rounding in 1 - level (0.025000000000000022 for 0.95) from skipping one.
        return float(means[max(math.ceil(p * B - 1e-9) - 1, 0)])

    return order_stat(a), order_stat(1.0 - a)


def mean_ftoi_curve(records):
    """Mean predicted TOI per horizon plus each subject's long-horizon plateau.

    The idealized curve is ``prediction == fh_ms``. Returns
    ``(curve, {subject: mean prediction at the largest horizon})``.
    """
    curve = _curve(records, lambda r: r.prediction, np.mean, "mean-prediction")
    plateaus = {}
    for s in sorted({r.subject for r in records}):
        top = [r.prediction for r in records if r.subject == s and r.fh_frames == N_FH]
        if top:
            plateaus[s] = float(np.mean(top))
    return curve, plateaus


def curve_linearity(curve: FhCurve, lo_ms: float = 0.0, hi_ms: float = np.inf) -> RegressionFit:
    m = curve.present() & (curve.fh_ms >= lo_ms - FH_TOL_MS) & (curve.fh_ms <= hi_ms + FH_TOL_MS)
    return ols(curve.fh_ms[m], curve.values[m])


def piecewise_fits(curve: FhCurve, split_ms: float = DEFAULT_SPLIT_MS) -> tuple[RegressionFit, RegressionFit]:
    """Separate line fits below and above the split horizon (split point in both)."""
    return curve_linearity(curve, 0.0, split_ms), curve_linearity(curve, split_ms, np.inf)


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

EVAL_FIELDS = ("task", "scope", "metric", "fh_frames", "fh_ms", "value", "ci_lo", "ci_hi", "n")
RESIDUAL_FIELDS = ("subject", "trial", "task", "fh_frames", "fh_ms", "truth", "prediction", "residual")
REGRESSION_FIELDS = ("task", "scope", "fh_frames", "fh_ms", "slope", "intercept", "r2", "p_value", "n", "degenerate")


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def evaluation_rows(records, task: str, B: int = 10_000, seed: int = 0) -> list:
    """MAE (with bootstrap CI), RMSE and, for TOI, mean prediction per horizon."""
    rows = []
    recs = [r for r in records if r.task == task]
    scopes = [("all", recs)] + [(str(s), [r for r in recs if r.subject == s]) for s in sorted({r.subject for r in recs})]
    for scope, rs in scopes:
        mae = mae_by_fh(rs)
        rmse = rmse_by_fh(rs)
        buckets = _buckets(rs, lambda r: abs(r.truth - r.prediction))
        for k in range(1, N_FH + 1):
            b = buckets[k - 1]
            lo, hi = bootstrap_mae_ci(b, B, seed=seed + k) if b.size >= 2 else (float("nan"), float("nan"))
            rows.append(dict(task=task, scope=scope, metric="MAE", fh_frames=k, fh_ms=FH_GRID_MS[k - 1],
                             value=mae.values[k - 1], ci_lo=lo, ci_hi=hi, n=int(b.size)))
            rows.append(dict(task=task, scope=scope, metric="RMSE", fh_frames=k, fh_ms=FH_GRID_MS[k - 1],
                             value=rmse.values[k - 1], ci_lo=float("nan"), ci_hi=float("nan"), n=int(b.size)))
        if task == "toi":
            mp, _ = mean_ftoi_curve(rs)
            for k in range(1, N_FH + 1):
                rows.append(dict(task=task, scope=scope, metric="mean-prediction", fh_frames=k,
                                 fh_ms=FH_GRID_MS[k - 1], value=mp.values[k - 1], ci_lo=float("nan"),
                                 ci_hi=float("nan"), n=int(mp.counts[k - 1])))
    return rows


def regression_rows(records, task: str) -> list:
    rows = []
    recs = [r for r in records if r.task == task]
    scopes = [("all", recs)] + [(str(s), [r for r in recs if r.subject == s]) for s in sorted({r.subject for r in recs})]
    for scope, rs in scopes:
        for k, fit in enumerate(residual_regressions_by_fh(rs), start=1):
            rows.append(dict(task=task, scope=scope, fh_frames=k, fh_ms=FH_GRID_MS[k - 1], slope=fit.slope,
                             intercept=fit.intercept, r2=fit.r2, p_value=fit.p_value, n=fit.n,
                             degenerate=int(fit.degenerate)))
    return rows


def residual_rows(records) -> list:
    return [
        dict(subject=r.subject, trial=r.trial, task=r.task, fh_frames=r.fh_frames, fh_ms=r.fh_ms,
             truth=r.truth, prediction=r.prediction, residual=r.truth - r.prediction)
        for r in records
    ]


def write_rows(rows: list, fields, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(fields)
        for row in rows:
            wr.writerow([_fmt(row[f]) for f in fields])


def read_rows(path, fields, numeric=()) -> list:
    """Read a CSV written by :func:`write_rows`, checking the header and numeric cells."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None:
            raise CsvFormatError(f"{path}: empty file (no header)")
        missing = [f for f in fields if f not in rd.fieldnames]
        if missing:
            raise CsvFormatError(f"{path}: missing columns {missing}")
        for line, row in enumerate(rd, start=2):
            for f in numeric:
                try:
                    row[f] = float(row[f])
                except (TypeError, ValueError):
                    raise CsvFormatError(f"{path} line {line}, column {f!r}: not a number: {row[f]!r}") from None
            out.append(row)
    return out
