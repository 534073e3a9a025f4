"""Linear mixed-effects analysis of forecast errors.

The model is ``z = X beta + Z_s b_s + e`` with ``b_s ~ N(0, G)`` per subject and
``e ~ N(0, sigma2 I)``. ``beta`` and ``sigma2`` are profiled out, leaving a
deviance in the relative Cholesky factor ``Lambda`` (``G = sigma2 Lambda
Lambda^T``). The factor's diagonal is stored on the log scale so every iterate
is a valid covariance, and the profiled deviance is minimised by Nelder-Mead.

All per-subject work goes through sufficient statistics (``Z'Z``, ``Z'X``,
``Z'y``), so a deviance evaluation costs ``O(groups * q^3)`` regardless of how
many observations each subject contributes.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, stats

from .errors import ConvergenceWarning

log = logging.getLogger(__name__)

PREDICTORS = ("fh", "torso_vel", "toe_vel", "cop_truth")
PROTECTED = ("intercept", "fh")

# Raw-unit domains at which effects are reported. FH depends on the task; the
# others are fixed. A predictor without an entry uses its 25th/75th percentiles.
DOMAINS = {
    ("cop", "fh"): (16.67, 250.0),
    ("toi", "fh"): (16.67, 166.67),
    "toe_vel": (3000.0, 5000.0),
    "cop_truth": (53.34, 172.75),
}

METHOD_NOTE = (
    "tests: ML likelihood-ratio (chi2, 1 df); "
    "back-transform: E[z^3] = mu^3 + 3 mu s2 with marginal s2 = z'Gz + sigma2_e"
)


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------


def standardize(column) -> tuple[np.ndarray, float, float]:
    """Return ``((x - mean) / sd, mean, sd)`` with the sample SD (ddof=1)."""
    x = np.asarray(column, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("standardize needs a 1-D column with at least 2 values")
    mean = float(x.mean())
    sd = float(x.std(ddof=1))
    if not sd > 0.0:
        raise ValueError("cannot standardize a constant column")
    return (x - mean) / sd, mean, sd


def cube_root_transform(abs_error) -> np.ndarray:
    e = np.asarray(abs_error, dtype=np.float64)
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise ValueError("absolute errors must be finite and non-negative")
    return np.cbrt(e)


def back_transform(mu, sigma2):
    """Expected ``z^3`` for ``z ~ N(mu, sigma2)``: ``mu^3 + 3 mu sigma2``."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 < 0):
        raise ValueError("variance must be non-negative")
    out = mu**3 + 3.0 * mu * sigma2
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class LmmData:
    """Response, fixed design, per-subject random design and grouping."""

    y: np.ndarray
    X: np.ndarray
    names: tuple
    Z: np.ndarray  # (n, q); q = 0 drops the random effects entirely
    groups: np.ndarray  # (n,) subject ids
    scaling: dict = field(default_factory=dict)  # name -> (mean, sd)
    raw_response: np.ndarray | None = None
    task: str = ""

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Z = np.asarray(self.Z, dtype=np.float64).reshape(len(self.y), -1)
        self.groups = np.asarray(self.groups)
        self.names = tuple(self.names)
        n = self.y.shape[0]
        if self.X.shape != (n, len(self.names)) or self.groups.shape != (n,):
            raise ValueError("LmmData arrays disagree on the number of observations")
        if not np.all(np.isfinite(self.y)) or not np.all(np.isfinite(self.X)):
            raise ValueError("LmmData contains non-finite values")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    def without(self, name: str) -> "LmmData":
        j = self.names.index(name)
        keep = [i for i in range(len(self.names)) if i != j]
        return replace(self, X=self.X[:, keep], names=tuple(self.names[i] for i in keep))

    def with_column(self, name: str, column) -> "LmmData":
        return replace(self, X=np.column_stack([self.X, column]), names=self.names + (name,))

    def fixed_only(self) -> "LmmData":
        return replace(self, Z=np.zeros((self.n, 0)))


def lmm_data_from_records(records, task: str, predictors=PREDICTORS, random_slope: bool = True) -> LmmData:
    """Build the cube-root-response design for one task's records."""
    recs = [r for r in records if r.task == task]
    if not recs:
        raise ValueError(f"no records for task {task!r}")
    raw = {
        "fh": [r.fh_ms for r in recs],
        "torso_vel": [r.torso_vel for r in recs],
        "toe_vel": [r.toe_vel for r in recs],
        "cop_truth": [r.cop_truth_mm for r in recs],
    }
    abs_err = np.array([r.abs_error for r in recs])
    cols, scaling = [np.ones(len(recs))], {}
    for p in predictors:
        z, m, s = standardize(raw[p])
        cols.append(z)
        scaling[p] = (m, s)
    X = np.column_stack(cols)
    Z = X[:, :2] if random_slope else X[:, :1]
    if random_slope and predictors[0] != "fh":
        raise ValueError("the random slope is on FH, which must be the first predictor")
    return LmmData(
        y=cube_root_transform(abs_err), X=X, names=("intercept",) + tuple(predictors), Z=Z,
        groups=np.array([r.subject for r in recs]), scaling=scaling, raw_response=abs_err, task=task,
    )


# ---------------------------------------------------------------------------
# Profiled deviance
# ---------------------------------------------------------------------------


@dataclass
class _Stats:
    n: int
    p: int
    q: int
    XtX: np.ndarray
    Xty: np.ndarray
    yty: float
    ZtZ: np.ndarray  # (g, q, q)
    ZtX: np.ndarray  # (g, q, p)
    Zty: np.ndarray  # (g, q)
    group_ids: np.ndarray


def _sufficient(data: LmmData) -> _Stats:
    ids, code = np.unique(data.groups, return_inverse=True)
    g, q = ids.size, data.q
    ZtZ = np.zeros((g, q, q))
    ZtX = np.zeros((g, q, data.X.shape[1]))
    Zty = np.zeros((g, q))
    for k in range(g):
        m = code == k
        Zk, Xk = data.Z[m], data.X[m]
        ZtZ[k] = Zk.T @ Zk
        ZtX[k] = Zk.T @ Xk
        Zty[k] = Zk.T @ data.y[m]
    return _Stats(data.n, data.X.shape[1], q, data.X.T @ data.X, data.X.T @ data.y, float(data.y @ data.y),
                  ZtZ, ZtX, Zty, ids)


def theta_to_lambda(theta, q: int) -> np.ndarray:
    """Log-Cholesky vector (row-major lower triangle, log diagonal) to ``Lambda``."""
    L = np.zeros((q, q))
    L[np.tril_indices(q)] = theta
    d = np.diag_indices(q)
    L[d] = np.exp(L[d])
    return L


def lambda_to_theta(L) -> np.ndarray:
    L = np.array(L, dtype=np.float64)
    q = L.shape[0]
    d = np.diag_indices(q)
    L[d] = np.log(np.maximum(L[d], 1e-12))
    return L[np.tril_indices(q)]


@dataclass
class _Profile:
    deviance: float
    beta: np.ndarray
    sigma2: float
    A: np.ndarray  # X' V^-1 X * sigma2
    logdet_M: float


def _profile(st: _Stats, Lam: np.ndarray, reml: bool) -> _Profile:
    """Profiled (RE)ML deviance at relative factor ``Lam`` (may hold exact zeros)."""
    if st.q:
        LtZtZL = np.einsum("ji,gjk,kl->gil", Lam, st.ZtZ, Lam)
        M = LtZtZL + np.eye(st.q)
        sign, logdet = np.linalg.slogdet(M)
        logdet_M = float(logdet.sum())
        LtZtX = np.einsum("ji,gjk->gik", Lam, st.ZtX)
        LtZty = np.einsum("ji,gj->gi", Lam, st.Zty)
        MinvX = np.linalg.solve(M, LtZtX)
        Minvy = np.linalg.solve(M, LtZty[..., None])[..., 0]
        A = st.XtX - np.einsum("gip,giq->pq", LtZtX, MinvX)
        b = st.Xty - np.einsum("gip,gi->p", LtZtX, Minvy)
        c = st.yty - float(np.einsum("gi,gi->", LtZty, Minvy))
    else:
        logdet_M = 0.0
        A, b, c = st.XtX, st.Xty, st.yty
    cf = np.linalg.cholesky(A)
    beta = np.linalg.solve(cf.T, np.linalg.solve(cf, b))
    rss = max(c - float(b @ beta), 1e-300)
    dof = st.n - st.p if reml else st.n
    sigma2 = rss / dof
    dev = logdet_M + dof * (1.0 + np.log(2.0 * np.pi * sigma2))
    if reml:
        dev += 2.0 * float(np.log(np.diag(cf)).sum())
    return _Profile(float(dev), beta, sigma2, A, logdet_M)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass
class LmmFit:
    names: tuple
    beta: np.ndarray
    beta_cov: np.ndarray
    G: np.ndarray
    sigma2: float
    criterion: str
    deviance: float  # under ``criterion``
    deviance_reml: float
    deviance_ml: float
    converged: bool
    n_evals: int
    message: str
    Lambda: np.ndarray
    scaling: dict
    n: int
    n_groups: int
    trace: list = field(default_factory=list, repr=False)
    task: str = ""

    @property
    def random_sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.G))

    @property
    def random_corr(self) -> float:
        if self.G.shape[0] < 2:
            return float("nan")
        d = self.random_sd
        return float(self.G[0, 1] / (d[0] * d[1])) if d[0] > 0 and d[1] > 0 else float("nan")

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])


def _mom_start(data: LmmData, st: _Stats) -> np.ndarray:
    """Method-of-moments relative covariance from per-subject OLS on residuals."""
    q = st.q
    beta, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
    resid = data.y - data.X @ beta
    s2 = float(resid @ resid) / max(data.n - data.X.shape[1], 1)
    bs, corr = [], []
    for k, gid in enumerate(st.group_ids):
        m = data.groups == gid
        Zk = data.Z[m]
        if Zk.shape[0] <= q or np.linalg.matrix_rank(Zk) < q:
            continue
        bk, *_ = np.linalg.lstsq(Zk, resid[m], rcond=None)
        bs.append(bk)
        corr.append(s2 * np.linalg.inv(st.ZtZ[k]))
    if len(bs) < 2:
        return 0.1 * np.eye(q)
    G = np.cov(np.array(bs).T, ddof=1).reshape(q, q) - np.mean(corr, axis=0)
    w, V = np.linalg.eigh((G + G.T) / 2)
    G = (V * np.maximum(w, 1e-4 * s2)) @ V.T
    return np.linalg.cholesky(G / s2)


def _snap_candidates(L: np.ndarray):
    """Boundary versions of ``L`` with one or more variance directions zeroed."""
    q = L.shape[0]
    out = []
    for mask in range(1, 1 << q):
        C = L.copy()
        for j in range(q):
            if mask >> j & 1:
                C[j, :] = 0.0  # zero row j of the factor -> zero variance j and its covariances
        out.append(C)
    return out


def fit_lmm(
    data: LmmData,
    criterion: str = "REML",
    *,
    maxiter: int = 4000,
    fatol: float = 1e-8,
    start: np.ndarray | None = None,
) -> LmmFit:
    """Fit the mixed model by minimising the profiled deviance.

    Starts from ``G = 0.1 I`` (relative to the OLS residual variance), from a
    method-of-moments estimate, and from ``start`` (a relative factor) when
    given; the best optimum is then restarted once and checked against the
    variance-zero boundary.
    """
    criterion = criterion.upper()
    if criterion not in ("REML", "ML"):
        raise ValueError(f"criterion must be REML or ML, not {criterion!r}")
    reml = criterion == "REML"
    st = _sufficient(data)
    if st.group_ids.size < 2 and st.q:
        raise ValueError("mixed model needs at least 2 subjects")
    counts = np.unique(data.groups, return_counts=True)[1]
    if st.q and counts.min() < 3:
        raise ValueError("mixed model needs at least 3 observations per subject")

    q = st.q
    trace: list = []
    n_evals = 0
    converged = True
    message = "no random effects"
    if q == 0:
        Lam = np.zeros((0, 0))
    else:
        ols_beta, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
        r = data.y - data.X @ ols_beta
        s2 = max(float(r @ r) / max(data.n - data.X.shape[1], 1), 1e-12)
        starts = [np.linalg.cholesky(0.1 * np.eye(q) / s2), _mom_start(data, st)]
        if start is not None:
            starts.append(np.asarray(start, dtype=np.float64))

        def dev(theta):
            return _profile(st, theta_to_lambda(theta, q), reml).deviance

        best = None
        for L0 in starts:
            th0 = lambda_to_theta(L0)
            local: list = []
            res = optimize.minimize(
                dev, th0, method="Nelder-Mead",
                callback=lambda xk: local.append(dev(xk)),
                options=dict(maxiter=maxiter, maxfev=2 * maxiter, xatol=1e-7, fatol=fatol, adaptive=q > 1),
            )
            n_evals += res.nfev
            if best is None or res.fun < best[0].fun:
                best = (res, local)
        res, local = best
        # One restart from the optimum guards against a collapsed simplex.
        res2 = optimize.minimize(
            dev, res.x, method="Nelder-Mead", callback=lambda xk: local.append(dev(xk)),
            options=dict(maxiter=maxiter, maxfev=2 * maxiter, xatol=1e-7, fatol=fatol, adaptive=q > 1),
        )
        n_evals += res2.nfev
        if res2.fun <= res.fun:
            res = res2
        trace = local
        converged = bool(res.success)
        message = str(res.message)
        Lam = theta_to_lambda(res.x, q)
        best_dev = float(res.fun)
        for C in _snap_candidates(Lam):
            d = _profile(st, C, reml).deviance
            if d <= best_dev + 1e-9:
                Lam, best_dev = C, min(d, best_dev)
        if not converged:
            warnings.warn(f"mixed model did not converge: {message}", ConvergenceWarning, stacklevel=2)

    prof = _profile(st, Lam, reml)
    other = _profile(st, Lam, not reml)
    sigma2 = prof.sigma2
    return LmmFit(
        names=data.names, beta=prof.beta, beta_cov=sigma2 * np.linalg.inv(prof.A),
        G=sigma2 * (Lam @ Lam.T), sigma2=sigma2, criterion=criterion, deviance=prof.deviance,
        deviance_reml=prof.deviance if reml else other.deviance,
        deviance_ml=other.deviance if reml else prof.deviance,
        converged=converged, n_evals=n_evals, message=message, Lambda=Lam, scaling=dict(data.scaling),
        n=data.n, n_groups=int(np.unique(data.groups).size), trace=trace, task=data.task,
    )


def profiled_deviance(data: LmmData, Lam, criterion: str = "ML") -> float:
    return _profile(_sufficient(data), np.asarray(Lam, dtype=np.float64), criterion.upper() == "REML").deviance


def conditional_fitted(data: LmmData, fit: LmmFit) -> np.ndarray:
    """Fitted values including each subject's predicted random effect (BLUP)."""
    fitted = data.X @ fit.beta
    if data.q == 0:
        return fitted
    st = _sufficient(data)
    Lam = fit.Lambda
    for k, gid in enumerate(st.group_ids):
        M = Lam.T @ st.ZtZ[k] @ Lam + np.eye(data.q)
        u = np.linalg.solve(M, Lam.T @ (st.Zty[k] - st.ZtX[k] @ fit.beta))
        m = data.groups == gid
        fitted[m] += data.Z[m] @ (Lam @ u)
    return fitted


# ---------------------------------------------------------------------------
# Tests and model reduction
# ---------------------------------------------------------------------------


@dataclass
class EffectTest:
    name: str
    estimate: float
    lrt: float
    p_value: float
    converged: bool


def lrt_pair(full: LmmData, reduced: LmmData, full_fit: LmmFit | None = None) -> tuple[float, bool]:
    """ML likelihood-ratio statistic for nested fixed designs, clipped by nesting.

    The reduced optimum is fed back as a start for the full model, so the
    full deviance can never exceed the reduced one.
    """
    ff = full_fit if full_fit is not None and full_fit.criterion == "ML" else fit_lmm(full, "ML")
    rf = fit_lmm(reduced, "ML", start=ff.Lambda if full.q else None)
    d_full = ff.deviance
    if full.q:
        d_full = min(d_full, profiled_deviance(full, rf.Lambda, "ML"))
    return rf.deviance - d_full, ff.converged and rf.converged


def fixed_effect_tests(data: LmmData, fit: LmmFit | None = None) -> list:
    """Per-coefficient likelihood-ratio tests (intercept excluded)."""
    ml = fit if fit is not None and fit.criterion == "ML" else fit_lmm(data, "ML")
    out = []
    for j, name in enumerate(data.names):
        if name == "intercept":
            continue
        stat, ok = lrt_pair(data, data.without(name), ml)
        if not ok:
            warnings.warn(f"refit without {name} did not converge", ConvergenceWarning, stacklevel=2)
        out.append(EffectTest(name, float(ml.beta[j]), stat, float(stats.chi2.sf(max(stat, 0.0), 1)), ok))
    return out


def drop_and_refit(data: LmmData, tests: list, alpha: float = 0.05):
    """Remove every non-protected effect with ``p > alpha`` in one pass, then refit (REML).

    Returns ``(fit, reduced data, dropped names)``.
    """
    dropped = [t.name for t in tests if t.p_value > alpha and t.name not in PROTECTED]
    reduced = data
    for name in dropped:
        reduced = reduced.without(name)
    return fit_lmm(reduced, "REML"), reduced, dropped


# ---------------------------------------------------------------------------
# Effects in reporting units
# ---------------------------------------------------------------------------


def _design_point(fit: LmmFit, predictor: str | None, value: float):
    """Transformed-scale mean and marginal variance with one predictor at ``value``."""
    mu = fit.coef("intercept")
    fh_std = 0.0
    if predictor is not None:
        m, s = fit.scaling[predictor]
        zv = (value - m) / s
        mu += fit.coef(predictor) * zv
        if predictor == "fh":
            fh_std = zv
    q = fit.G.shape[0]
    zr = np.array([1.0, fh_std])[:q]
    return mu, float(zr @ fit.G @ zr) + fit.sigma2


def intercept_effect(fit: LmmFit) -> float:
    """Expected absolute error with every predictor at its mean."""
    return back_transform(*_design_point(fit, None, 0.0))


def effect_across_domain(fit: LmmFit, predictor: str, domain) -> float:
    """Expected absolute-error change moving ``predictor`` from ``domain[0]`` to ``domain[1]``."""
    if predictor not in fit.names or predictor == "intercept":
        raise ValueError(f"predictor {predictor!r} is not in the fitted model")
    a, b = map(float, domain)
    if a == b:
        return 0.0
    return back_transform(*_design_point(fit, predictor, b)) - back_transform(*_design_point(fit, predictor, a))


def default_domain(task: str, predictor: str, raw_column=None):
    dom = DOMAINS.get((task, predictor), DOMAINS.get(predictor))
    if dom is None:
        if raw_column is None:
            raise ValueError(f"no domain for {predictor!r} and no data to derive one")
        lo, hi = np.percentile(np.asarray(raw_column, dtype=np.float64), [25, 75])
        dom = (float(lo), float(hi))
    return dom


# ---------------------------------------------------------------------------
# Assumption checks
# ---------------------------------------------------------------------------


def breusch_pagan(resid, fitted) -> tuple[float, float]:
    """LM test: ``n R^2`` of squared residuals on fitted values, against chi2(1)."""
    e2 = np.asarray(resid, dtype=np.float64) ** 2
    f = np.asarray(fitted, dtype=np.float64)
    fc = f - f.mean()
    ec = e2 - e2.mean()
    sff, see = float(fc @ fc), float(ec @ ec)
    if sff == 0.0 or see == 0.0:
        return 0.0, 1.0
    r2 = float(fc @ ec) ** 2 / (sff * see)
    stat = e2.size * r2
    return stat, float(stats.chi2.sf(stat, 1))


@dataclass
class Diagnostic:
    check: str
    statistic: float
    df: int
    p_value: float
    flag: bool
    note: str = ""


def assumption_checks(data: LmmData, fit: LmmFit, alpha: float = 0.05) -> list:
    fitted = conditional_fitted(data, fit)
    resid = data.y - fitted
    out = []
    bp, bp_p = breusch_pagan(resid, fitted)
    out.append(Diagnostic("homoscedasticity (Breusch-Pagan)", bp, 1, bp_p, bp_p < alpha,
                          "flag = heteroscedastic on the cube-root scale"))
    jb = stats.jarque_bera(resid)
    out.append(Diagnostic("normality (Jarque-Bera)", float(jb.statistic), 2, float(jb.pvalue), jb.pvalue < alpha,
                          "flag = non-normal conditional residuals"))
    for name in data.names:
        if name == "intercept":
            continue
        x = data.X[:, data.names.index(name)]
        sq = x * x
        sq = sq - sq.mean()
        if not np.any(sq):
            continue
        stat, _ = lrt_pair(data.with_column(name + "^2", sq), data)
        p = float(stats.chi2.sf(max(stat, 0.0), 1))
        out.append(Diagnostic(f"linearity ({name})", stat, 1, p, p < alpha, "flag = squared term significant"))
    if data.raw_response is not None:
        raw = replace(data, y=np.asarray(data.raw_response, dtype=np.float64))
        rfit = fit_lmm(raw, "REML")
        rf = conditional_fitted(raw, rfit)
        s, p = breusch_pagan(raw.y - rf, rf)
        out.append(Diagnostic("homoscedasticity on raw |error|", s, 1, p, p < alpha,
                              "flag = heteroscedastic raw errors: use the cube-root response" if p < alpha
                              else "raw errors homoscedastic"))
    return out


# ---------------------------------------------------------------------------
# Full analysis and tables
# ---------------------------------------------------------------------------


REPORT_FIELDS = ("task", "term", "estimate", "domain_lo", "domain_hi", "effect", "lrt", "p_value", "retained", "note")
DIAG_FIELDS = ("task", "check", "statistic", "df", "p_value", "flag", "note")


@dataclass
class LmmAnalysis:
    task: str
    initial: LmmFit
    tests: list
    final: LmmFit
    dropped: list
    diagnostics: list
    data: LmmData


def analyze(records, task: str, alpha: float = 0.05, random_slope: bool = True) -> LmmAnalysis:
    """Fit, test, drop insignificant effects once, refit, and run the checks."""
    data = lmm_data_from_records(records, task, random_slope=random_slope)
    initial = fit_lmm(data, "REML")
    tests = fixed_effect_tests(data)
    final, reduced, dropped = drop_and_refit(data, tests, alpha)
    if dropped:
        log.info("%s: dropped %s", task, ", ".join(dropped))
    diags = assumption_checks(reduced, final, alpha)
    return LmmAnalysis(task, initial, tests, final, dropped, diags, data)


def report_rows(an: LmmAnalysis, records=None) -> list:
    fit = an.final
    tests = {t.name: t for t in an.tests}
    raw = {}
    if records is not None:
        recs = [r for r in records if r.task == an.task]
        raw = {"torso_vel": [r.torso_vel for r in recs]}
    nan = float("nan")
    rows = [dict(task=an.task, term="intercept", estimate=fit.coef("intercept"), domain_lo=nan, domain_hi=nan,
                 effect=intercept_effect(fit), lrt=nan, p_value=nan, retained=1, note=METHOD_NOTE)]
    for name in an.data.names[1:]:
        t = tests.get(name)
        kept = name in fit.names
        if kept:
            lo, hi = default_domain(an.task, name, raw.get(name))
            eff = effect_across_domain(fit, name, (lo, hi))
            est = fit.coef(name)
        else:
            lo = hi = eff = est = nan
        rows.append(dict(task=an.task, term=name, estimate=est, domain_lo=lo, domain_hi=hi, effect=eff,
                         lrt=t.lrt if t else nan, p_value=t.p_value if t else nan, retained=int(kept),
                         note="" if kept else "dropped (p > alpha)"))
    sd = fit.random_sd
    labels = ["sd_intercept", "sd_fh_slope"][: sd.size]
    for lab, v in zip(labels, sd):
        rows.append(dict(task=an.task, term=lab, estimate=float(v), domain_lo=nan, domain_hi=nan, effect=nan,
                         lrt=nan, p_value=nan, retained=1, note="random effect, cube-root scale"))
    if sd.size == 2:
        rows.append(dict(task=an.task, term="corr_intercept_slope", estimate=fit.random_corr, domain_lo=nan,
                         domain_hi=nan, effect=nan, lrt=nan, p_value=nan, retained=1, note="random effect"))
    rows.append(dict(task=an.task, term="sigma_e", estimate=float(np.sqrt(fit.sigma2)), domain_lo=nan,
                     domain_hi=nan, effect=nan, lrt=nan, p_value=nan, retained=1,
                     note=f"{fit.criterion} deviance {fit.deviance!r}; converged={fit.converged}"))
    return rows


def diagnostic_rows(an: LmmAnalysis) -> list:
    return [dict(task=an.task, check=d.check, statistic=d.statistic, df=d.df, p_value=d.p_value,
                 flag=int(d.flag), note=d.note) for d in an.diagnostics]


def write_table(rows: list, fields, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(fields)
        for row in rows:
            wr.writerow([repr(float(row[f])) if isinstance(row[f], (float, np.floating)) else row[f]
                         for f in fields])
