"""Probit propensity scores, common-support filtering and balance diagnostics.

The probit is fitted by Newton iterations on the analytic score and Hessian
with a step-halving safeguard, so the log-likelihood never decreases along
the iteration path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import special, stats
from sklearn.base import BaseEstimator

from ._validation import (
    as_float_matrix,
    as_float_vector,
    check_finite,
    require_both_classes,
)
from .errors import EstimationError, PanelError
from .panel import log_change

#: Fitted scores are clamped to this open interval.
SCORE_EPS = 1e-12

#: Default covariates for the treatment-assignment probit.  A documented
#: default, not a canonical set; callers can pass any list of variable names
#: (``log_<var>`` for log transforms, ``industry`` for sector indicators).
DEFAULT_PROPENSITY_COVARIATES = (
    "log_employees",
    "log_gross_output",
    "log_energy_mwh",
    "export_share",
    "industry",
)

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class CovariateSet:
    """Named covariate matrix for one unit per row.

    ``unit_ids`` aligns rows with panel firms; ``intercept`` controls whether
    model fitting prepends a constant column.
    """

    names: tuple
    matrix: np.ndarray
    intercept: bool = True
    unit_ids: tuple | None = None

    def __post_init__(self):
        matrix = as_float_matrix(self.matrix, "covariate matrix")
        check_finite(matrix, "covariate matrix")
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "names", tuple(self.names))
        if matrix.shape[1] != len(self.names):
            raise PanelError(
                f"{len(self.names)} covariate names for {matrix.shape[1]} columns"
            )
        if self.unit_ids is not None:
            ids = tuple(self.unit_ids)
            if len(ids) != matrix.shape[0]:
                raise PanelError("unit_ids length does not match row count")
            object.__setattr__(self, "unit_ids", ids)
        if self.intercept and matrix.shape[0] > 1:
            spans = matrix.max(axis=0) - matrix.min(axis=0)
            constant = np.flatnonzero(spans == 0.0)
            if constant.size:
                raise PanelError(
                    f"covariate {self.names[constant[0]]!r} is constant; "
                    "drop it when an intercept is included"
                )

    @property
    def n_units(self):
        return self.matrix.shape[0]

    def design(self):
        """Design matrix with the intercept column first when enabled."""
        if self.intercept:
            return np.column_stack([np.ones(self.matrix.shape[0]), self.matrix])
        return self.matrix.copy()

    def design_names(self):
        return (("const",) if self.intercept else ()) + self.names

    def subset(self, row_index):
        ids = None
        if self.unit_ids is not None:
            ids = tuple(np.asarray(self.unit_ids, dtype=object)[row_index])
        return CovariateSet(self.names, self.matrix[row_index], self.intercept, ids)


def build_covariates(panel, names=DEFAULT_PROPENSITY_COVARIATES, year=None,
                     intercept=True):
    """Covariate matrix from panel variables measured in one year.

    ``log_<var>`` takes the natural log of ``<var>`` (units with nonpositive
    values are excluded), ``industry`` expands to indicator columns with the
    lowest code as reference, anything else is used as-is.  Defaults to the
    panel's base year.  Returns (CovariateSet, excluded firm ids).
    """
    if year is None:
        year = panel.phase_windows.base_year
    columns = {}
    for name in names:
        if name == "industry":
            continue
        source = name[4:] if name.startswith("log_") else name
        columns[name] = panel.values_in_year(source, year)
    industries = panel.frame.groupby("firm_id")["industry_code"].first()

    firms = pd.Index(sorted(panel.treatment_by_firm().index))
    keep = pd.Series(True, index=firms)
    for name, series in columns.items():
        aligned = series.reindex(firms)
        ok = aligned.notna()
        if name.startswith("log_"):
            ok &= aligned > 0
        keep &= ok
    kept = firms[keep]
    excluded = tuple(firms[~keep])

    out_names, out_cols = [], []
    for name in names:
        if name == "industry":
            codes = industries.reindex(kept)
            levels = sorted(codes.unique())
            for level in levels[1:]:
                out_names.append(f"industry_{level}")
                out_cols.append((codes == level).to_numpy(dtype=float))
        else:
            values = columns[name].reindex(kept).to_numpy(dtype=float)
            if name.startswith("log_"):
                values = np.log(values)
            out_names.append(name)
            out_cols.append(values)
    matrix = np.column_stack(out_cols) if out_cols else np.empty((len(kept), 0))
    covset = CovariateSet(tuple(out_names), matrix, intercept, tuple(kept))
    return covset, excluded


# -- probit log-likelihood pieces (module level for direct testing) ----------


def probit_loglik(beta, design, d):
    """Probit log-likelihood at ``beta`` for 0/1 responses ``d``."""
    eta = design @ beta
    return float(np.sum(d * special.log_ndtr(eta) + (1 - d) * special.log_ndtr(-eta)))


def _mills(eta):
    # phi(eta)/Phi(eta) and phi(eta)/(1 - Phi(eta)), computed in log space
    log_pdf = -0.5 * eta * eta - _LOG_SQRT_2PI
    m1 = np.exp(log_pdf - special.log_ndtr(eta))
    m0 = np.exp(log_pdf - special.log_ndtr(-eta))
    return m1, m0


def probit_score(beta, design, d):
    """Analytic gradient of the probit log-likelihood."""
    eta = design @ beta
    m1, m0 = _mills(eta)
    lam = d * m1 - (1 - d) * m0
    return design.T @ lam


def probit_hessian(beta, design, d):
    """Analytic (observed) Hessian; negative definite away from separation."""
    eta = design @ beta
    m1, m0 = _mills(eta)
    w = d * (-m1 * (eta + m1)) + (1 - d) * (-m0 * (m0 - eta))
    return (design * w[:, None]).T @ design


class ProbitPropensity(BaseEstimator):
    """Probit treatment-assignment model fitted by safeguarded Newton ascent.

    Parameters
    ----------
    tol : float
        Convergence threshold on the max-norm of the score.
    max_iter : int
        Iteration cap; the fit is returned with ``converged_ = False`` when hit.
    separation_bound : float
        Any coefficient magnitude beyond this during iteration is treated as
        perfect separation (the normal link saturates numerically there).

    Attributes (after ``fit``)
    --------------------------
    coef_ : ndarray, intercept first when the covariate set has one
    coef_names_ : tuple of str
    cov_params_ : ndarray, inverse observed information
    loglik_ : float
    n_iter_ : int
    converged_ : bool
    """

    def __init__(self, tol=1e-8, max_iter=100, separation_bound=30.0):
        self.tol = tol
        self.max_iter = max_iter
        self.separation_bound = separation_bound

    def fit(self, X, d):
        design, names = self._design(X)
        d = require_both_classes(d, "treatment indicator")
        if len(d) != design.shape[0]:
            raise EstimationError(
                f"{design.shape[0]} covariate rows for {len(d)} treatment flags"
            )
        d = d.astype(float)

        beta = np.zeros(design.shape[1])
        ll = probit_loglik(beta, design, d)
        n_iter = 0
        converged = False
        for it in range(1, self.max_iter + 1):
            g = probit_score(beta, design, d)
            if np.max(np.abs(g)) <= self.tol:
                converged = True
                break
            H = probit_hessian(beta, design, d)
            try:
                step = np.linalg.solve(H, -g)
            except np.linalg.LinAlgError:
                raise EstimationError(
                    "singular probit Hessian; covariates are collinear"
                ) from None
            # step halving keeps the likelihood path monotone
            scale = 1.0
            improved = False
            for _ in range(40):
                candidate = beta + scale * step
                ll_new = probit_loglik(candidate, design, d)
                if ll_new >= ll - 1e-12:
                    improved = True
                    break
                scale *= 0.5
            if not improved:
                break
            beta, ll, n_iter = candidate, ll_new, it
            if np.max(np.abs(beta)) > self.separation_bound:
                raise EstimationError(
                    "probit coefficients diverged; data are perfectly separated"
                )
        if not converged:
            converged = bool(np.max(np.abs(probit_score(beta, design, d))) <= self.tol)

        H = probit_hessian(beta, design, d)
        try:
            cov = np.linalg.inv(-H)
        except np.linalg.LinAlgError:
            raise EstimationError(
                "singular probit Hessian; covariates are collinear"
            ) from None
        self.coef_ = beta
        self.coef_names_ = names
        self.cov_params_ = (cov + cov.T) / 2.0
        self.loglik_ = ll
        self.n_iter_ = n_iter
        self.converged_ = converged
        self._n_design_cols = design.shape[1]
        return self

    def _design(self, X):
        if isinstance(X, CovariateSet):
            return X.design(), X.design_names()
        design = as_float_matrix(X, "X")
        check_finite(design, "X")
        return design, tuple(f"x{i}" for i in range(design.shape[1]))

    def _check_fitted_design(self, X):
        if not hasattr(self, "coef_"):
            raise EstimationError("model is not fitted")
        design, names = self._design(X)
        if design.shape[1] != self._n_design_cols:
            raise EstimationError(
                f"model has {self._n_design_cols} design columns, got {design.shape[1]}"
            )
        if isinstance(X, CovariateSet) and names != self.coef_names_:
            raise EstimationError("covariate names do not match the fitted model")
        return design

    def linear_index(self, X):
        return self._check_fitted_design(X) @ self.coef_

    def predict_scores(self, X):
        """Propensity scores Phi(X beta), clamped to the open unit interval."""
        return np.clip(special.ndtr(self.linear_index(X)), SCORE_EPS, 1.0 - SCORE_EPS)

    def predict_proba(self, X):
        p = self.predict_scores(X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_scores(X) >= 0.5).astype(int)


def fit_probit(X, d, tol=1e-8, max_iter=100):
    """Fit a probit model; convenience wrapper around ProbitPropensity."""
    return ProbitPropensity(tol=tol, max_iter=max_iter).fit(X, d)


def predict_scores(model, X):
    return model.predict_scores(X)


# -- common support -----------------------------------------------------------


@dataclass(frozen=True)
class SupportFilterResult:
    """Index sets from common-support enforcement on propensity scores."""

    retained: np.ndarray
    excluded_treated: np.ndarray
    control_range: tuple
    n_retained_treated: int

    @property
    def warning(self):
        if self.n_retained_treated == 0:
            return "no treated units remain on common support"
        return None


def common_support_filter(scores, treated):
    """Drop treated units whose score lies outside the control score range.

    Controls are always retained.  An empty retained-treated set is legal and
    reported via ``result.warning``.
    """
    scores = as_float_vector(scores, "scores")
    treated = require_both_classes(treated)
    if len(scores) != len(treated):
        raise EstimationError("scores and treatment flags differ in length")
    ctrl = scores[treated == 0]
    lo, hi = float(ctrl.min()), float(ctrl.max())
    off = (treated == 1) & ((scores < lo) | (scores > hi))
    retained = np.flatnonzero(~off)
    return SupportFilterResult(
        retained=retained,
        excluded_treated=np.flatnonzero(off),
        control_range=(lo, hi),
        n_retained_treated=int(np.sum(treated[retained] == 1)),
    )


# -- balance diagnostics -------------------------------------------------------


def _weighted_moments(values, weights):
    """Weighted mean, unbiased variance and Kish effective sample size.

    Weights are treated as reliability weights: with normalized weights w,
    n_eff = 1 / sum(w^2) and the variance estimator divides by (1 - sum(w^2)).
    Equal weights reduce to the ordinary mean, sample variance and n.
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    total = weights.sum()
    w = weights / total
    mean = float(np.sum(w * values))
    n_eff = 1.0 / float(np.sum(w * w))
    denom = 1.0 - float(np.sum(w * w))
    if denom <= 0:
        return mean, 0.0, n_eff
    var = float(np.sum(w * (values - mean) ** 2) / denom)
    return mean, var, n_eff


def welch_test_from_moments(mean1, var1, n1, mean0, var0, n0):
    """Welch unequal-variance test; returns (statistic, df, two-sided p)."""
    se2 = var1 / n1 + var0 / n0
    if se2 == 0.0:
        return 0.0 if mean1 == mean0 else math.inf, max(n1 + n0 - 2.0, 1.0), \
            1.0 if mean1 == mean0 else 0.0
    stat = (mean1 - mean0) / math.sqrt(se2)
    df = se2 ** 2 / (
        (var1 / n1) ** 2 / (n1 - 1.0) + (var0 / n0) ** 2 / (n0 - 1.0)
    )
    p = 2.0 * float(stats.t.sf(abs(stat), df))
    return float(stat), float(df), min(p, 1.0)


@dataclass(frozen=True)
class BalanceTestResult:
    p_value: float
    statistic: float
    df: float
    n_treated: int
    n_controls: int


def _matched_balance_test(treated_values, control_values, control_weights):
    if len(treated_values) < 2 or len(control_values) < 2:
        raise EstimationError(
            "balance test needs at least 2 observations in each group"
        )
    m1, v1, n1 = _weighted_moments(treated_values, np.ones(len(treated_values)))
    m0, v0, n0 = _weighted_moments(control_values, control_weights)
    stat, df, p = welch_test_from_moments(m1, v1, n1, m0, v0, n0)
    return BalanceTestResult(
        p_value=p, statistic=stat, df=df,
        n_treated=len(treated_values), n_controls=len(control_values),
    )


def balance_levels_test(panel, weights, variable, pre_year):
    """Matched-sample equality test of pre-treatment levels.

    Treated means are compared against the match-weighted control mean with a
    Welch-style unequal-variance statistic; control dispersion uses Kish's
    effective sample size so repeated matches do not overstate precision.
    """
    values = panel.values_in_year(variable, pre_year)
    treated_vals = [values[i] for i in weights.treated_ids if i in values.index]
    totals = weights.control_totals()
    pairs = [(values[k], w) for k, w in totals.items() if k in values.index]
    control_vals = [v for v, _ in pairs]
    control_w = [w for _, w in pairs]
    return _matched_balance_test(
        np.asarray(treated_vals), np.asarray(control_vals), np.asarray(control_w)
    )


def balance_trends_test(panel, weights, variable, from_year, to_year):
    """Same matched test applied to per-firm log changes between two years."""
    changes = log_change(panel, variable, from_year, to_year)
    treated_vals = [changes[i] for i in weights.treated_ids if i in changes]
    totals = weights.control_totals()
    pairs = [(changes[k], w) for k, w in totals.items() if k in changes]
    control_vals = [v for v, _ in pairs]
    control_w = [w for _, w in pairs]
    return _matched_balance_test(
        np.asarray(treated_vals), np.asarray(control_vals), np.asarray(control_w)
    )


@dataclass(frozen=True)
class BalanceRow:
    variable: str
    p_levels: float
    n_treated_levels: int
    n_controls_levels: int
    p_trends: float | None
    n_treated_trends: int | None
    n_controls_trends: int | None


@dataclass(frozen=True)
class BalanceReport:
    rows: tuple

    def to_text(self):
        header = f"{'variable':<22}{'p-level':>10}{'n-tr':>7}{'n-co':>7}{'p-trend':>10}{'n-tr':>7}{'n-co':>7}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            trend = "" if r.p_trends is None else f"{r.p_trends:10.4f}{r.n_treated_trends:7d}{r.n_controls_trends:7d}"
            lines.append(
                f"{r.variable:<22}{r.p_levels:10.4f}{r.n_treated_levels:7d}{r.n_controls_levels:7d}{trend}"
            )
        return "\n".join(lines) + "\n"

    def to_csv(self):
        lines = ["variable,p_levels,n_treated_levels,n_controls_levels,p_trends,n_treated_trends,n_controls_trends"]
        for r in self.rows:
            trend = ["", "", ""] if r.p_trends is None else [
                repr(r.p_trends), str(r.n_treated_trends), str(r.n_controls_trends)
            ]
            lines.append(",".join([
                r.variable, repr(r.p_levels), str(r.n_treated_levels),
                str(r.n_controls_levels), *trend,
            ]))
        return "\n".join(lines) + "\n"


def balance_report(panel, weights, variables, windows=None, trend_years=None):
    """Per-variable levels and trends balance table for a matched sample."""
    windows = windows or panel.phase_windows
    pre_year = windows.base_year
    if trend_years is None:
        pre = sorted(windows.pretreatment_years)
        trend_years = (pre[0], pre[-1]) if len(pre) >= 2 else None
    rows = []
    for variable in variables:
        levels = balance_levels_test(panel, weights, variable, pre_year)
        trends = None
        if trend_years is not None:
            try:
                trends = balance_trends_test(panel, weights, variable, *trend_years)
            except (EstimationError, PanelError):
                trends = None
        rows.append(BalanceRow(
            variable=variable,
            p_levels=levels.p_value,
            n_treated_levels=levels.n_treated,
            n_controls_levels=levels.n_controls,
            p_trends=None if trends is None else trends.p_value,
            n_treated_trends=None if trends is None else trends.n_treated,
            n_controls_trends=None if trends is None else trends.n_controls,
        ))
    return BalanceReport(tuple(rows))
