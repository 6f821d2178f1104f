"""Nearest-neighbour matching and the matched difference-in-differences
treatment-effect estimators.

Matching pairs each treated unit with its closest controls and stores the
result as a normalized weight row per treated unit (weights over controls sum
to one).  The effect on the treated is the mean over treated units of the
pre-to-post change minus the weighted counterfactual change; a reweighted
least-squares variant uses all controls with odds weights instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

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

WEIGHT_ROW_TOL = 1e-12

#: Star conventions: ordered (threshold, marker) pairs, strictest first.
STAR_CONVENTIONS = {
    "three_tier": ((0.01, "***"), (0.05, "**"), (0.10, "*")),
    "five_percent": ((0.05, "*"),),
}


def significance_stars(p_value, convention="three_tier"):
    if p_value is None or (isinstance(p_value, float) and math.isnan(p_value)):
        return ""
    try:
        tiers = STAR_CONVENTIONS[convention]
    except KeyError:
        raise EstimationError(f"unknown star convention {convention!r}") from None
    for threshold, marker in tiers:
        if p_value < threshold:
            return marker
    return ""


@dataclass(frozen=True)
class MatchWeights:
    """Per-treated-unit weights over matched controls.

    ``weights[i]`` maps control ids to weights for treated unit ``i``; every
    row sums to one within 1e-12 and references only ids in ``control_ids``.
    ``dropped_treated`` lists treated units that could not be matched (only
    possible without replacement).
    """

    treated_ids: tuple
    control_ids: tuple
    weights: Mapping
    dropped_treated: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "treated_ids", tuple(self.treated_ids))
        object.__setattr__(self, "control_ids", tuple(self.control_ids))
        object.__setattr__(self, "dropped_treated", tuple(self.dropped_treated))
        controls = set(self.control_ids)
        for i in self.treated_ids:
            row = self.weights.get(i)
            if row is None:
                raise PanelError(f"missing weight row for treated unit {i!r}")
            total = 0.0
            for k, w in row.items():
                if k not in controls:
                    raise PanelError(
                        f"weight for {k!r} outside the control set (treated {i!r})"
                    )
                if w < 0:
                    raise PanelError(f"negative weight for control {k!r}")
                total += w
            if abs(total - 1.0) > WEIGHT_ROW_TOL:
                raise PanelError(
                    f"weights for treated {i!r} sum to {total!r}, expected 1"
                )

    @property
    def n_treated(self):
        return len(self.treated_ids)

    @property
    def n_controls(self):
        return len(self.control_ids)

    def control_totals(self):
        """Total weight received by each matched control, summed over treated."""
        totals = {}
        for i in self.treated_ids:
            for k, w in self.weights[i].items():
                if w > 0:
                    totals[k] = totals.get(k, 0.0) + w
        return totals


def _id_ranks(ids):
    order = np.argsort(ids, kind="mergesort")
    ranks = np.empty(len(ids), dtype=int)
    ranks[order] = np.arange(len(ids))
    return ranks


def _nearest(distances, id_ranks, k):
    """Indices of the k smallest distances, ties broken by ascending id."""
    order = np.lexsort((id_ranks, distances))
    return order[:k]


class NearestNeighborMatcher(BaseEstimator):
    """k-nearest-neighbour matching on a score or covariate vector.

    Parameters
    ----------
    k : int
        Neighbours per treated unit; capped at the number of available
        controls.
    with_replacement : bool
        Whether a control can serve several treated units.  Without
        replacement, treated units are processed in ascending id order and
        consume their matches.

    After ``fit(scores, treated, ids=...)`` the result is in ``weights_``.
    """

    def __init__(self, k=1, with_replacement=True):
        self.k = k
        self.with_replacement = with_replacement

    def fit(self, scores, treated, ids=None, exact=None):
        self.weights_ = nn_match(
            scores, treated, k=self.k, with_replacement=self.with_replacement,
            ids=ids, exact=exact,
        )
        return self


def nn_match(scores, treated, k=1, with_replacement=True, ids=None, exact=None):
    """Match each treated unit to its k nearest controls.

    ``scores`` may be a vector (absolute-difference distance) or a matrix of
    covariates, one row per unit (Euclidean distance on columns standardized
    by their pooled standard deviation).  ``exact`` optionally restricts the
    candidate controls of each treated unit to those sharing its key (e.g. an
    industry code).  Distance ties are broken by ascending unit id, which
    makes the result deterministic.  Matched controls inside a row share the
    weight equally: 1/k' each, with k' = min(k, available controls).
    """
    if k < 1:
        raise EstimationError(f"k must be >= 1, got {k}")
    Z = np.asarray(scores, dtype=float)
    one_dim = Z.ndim == 1
    if not one_dim:
        Z = as_float_matrix(Z, "scores")
        spans = Z.std(axis=0, ddof=1)
        spans[spans == 0] = 1.0
        Z = Z / spans
    check_finite(Z, "scores")
    treated = require_both_classes(treated)
    n = len(treated)
    if Z.shape[0] != n:
        raise EstimationError("scores and treatment flags differ in length")
    if ids is None:
        ids = np.arange(n)
    ids = np.asarray(ids)
    if len(ids) != n:
        raise EstimationError("ids and treatment flags differ in length")
    if exact is not None:
        exact = np.asarray(exact)
        if len(exact) != n:
            raise EstimationError("exact keys and treatment flags differ in length")

    treated_idx = np.flatnonzero(treated == 1)
    control_idx = np.flatnonzero(treated == 0)
    if control_idx.size == 0:
        raise EstimationError("no control units to match against")

    ctrl_ids = ids[control_idx]
    ctrl_ranks = _id_ranks(ctrl_ids)
    # process treated in ascending id order; matters only without replacement
    treated_order = treated_idx[np.argsort(ids[treated_idx], kind="mergesort")]

    available = np.ones(control_idx.size, dtype=bool)
    weights = {}
    dropped = []
    for t in treated_order:
        if exact is not None:
            candidate_mask = exact[control_idx] == exact[t]
        else:
            candidate_mask = np.ones(control_idx.size, dtype=bool)
        if not with_replacement:
            candidate_mask &= available
        cand = np.flatnonzero(candidate_mask)
        if cand.size == 0:
            dropped.append(ids[t])
            continue
        if one_dim:
            dist = np.abs(Z[control_idx[cand]] - Z[t])
        else:
            dist = np.sqrt(np.sum((Z[control_idx[cand]] - Z[t]) ** 2, axis=1))
        chosen = cand[_nearest(dist, ctrl_ranks[cand], min(k, cand.size))]
        share = 1.0 / len(chosen)
        weights[ids[t]] = {ctrl_ids[c]: share for c in chosen}
        if not with_replacement:
            available[chosen] = False

    matched_treated = [i for i in ids[treated_idx] if i in weights]
    return MatchWeights(
        treated_ids=tuple(sorted(matched_treated)),
        control_ids=tuple(sorted(ctrl_ids)),
        weights=weights,
        dropped_treated=tuple(dropped),
    )


# -- outcome changes -----------------------------------------------------------


@dataclass(frozen=True)
class PhaseChanges:
    """Per-firm log changes from the base year to a phase (or single year)."""

    changes: Mapping
    dropped: tuple
    phase_label: str

    def __getitem__(self, firm):
        return self.changes[firm]

    def __contains__(self, firm):
        return firm in self.changes


def phase_log_changes(panel, outcome, windows, phase):
    """Log change per firm: base-year level to the mean log level over the
    observed phase years.

    Multi-year phases are aggregated as the per-firm mean of log outcomes
    over the phase years the firm is observed in, giving one change per firm.
    Firms missing the base year or all phase years are dropped and reported.
    Nonpositive outcome values raise, since logs are undefined there.
    """
    if isinstance(phase, int) or (isinstance(phase, str) and phase.isdigit()):
        years = (int(phase),)
        label = str(phase)
    else:
        years = windows.years_for(phase)
        label = phase
    base_year = windows.base_year
    table = panel.pivot(outcome)

    if base_year not in table.columns:
        raise PanelError(f"base year {base_year} has no {outcome!r} observations")
    bad_years = [y for y in (base_year, *years) if y in table.columns]
    for y in bad_years:
        col = table[y].dropna()
        nonpos = col[col <= 0]
        if len(nonpos) > 0:
            raise PanelError(
                f"nonpositive {outcome!r} value {nonpos.iloc[0]!r} for firm "
                f"{nonpos.index[0]!r} in year {y}"
            )
    present = [y for y in years if y in table.columns]
    if not present:
        raise PanelError(f"no {outcome!r} observations in phase {label!r}")

    base = np.log(table[base_year])
    post = np.log(table[present]).mean(axis=1)  # skips NaN per firm
    delta = post - base
    ok = delta.notna()
    changes = dict(delta[ok])
    dropped = tuple(sorted(delta.index[~ok]))
    return PhaseChanges(changes=changes, dropped=dropped, phase_label=label)


# -- ATT estimators --------------------------------------------------------------


@dataclass(frozen=True)
class AttEstimate:
    """Point estimate of the effect on the treated for one outcome and phase."""

    estimate: float
    se: float
    p_value: float
    n_treated: int
    n_controls: int
    estimator: str
    outcome: str
    phase: str

    def __post_init__(self):
        if not math.isnan(self.se) and self.se < 0:
            raise EstimationError("standard error must be nonnegative")
        if not math.isnan(self.p_value) and not (0.0 <= self.p_value <= 1.0):
            raise EstimationError("p-value outside [0, 1]")


def _normal_p(estimate, se):
    if se is None or math.isnan(se) or se == 0.0:
        return math.nan
    return 2.0 * float(special.ndtr(-abs(estimate) / se))


def _treated_contributions(changes, weights):
    """Per-treated DD contributions delta_i, dropping units without data.

    Controls missing the outcome change are removed from each weight row and
    the remaining row is renormalized; treated units missing data or left
    without any matched control are dropped.  Returns (ids, deltas, pool
    size, report).
    """
    deltas = []
    kept = []
    dropped = list(changes.dropped)
    pool = {k for k in weights.control_ids if k in changes}
    for i in weights.treated_ids:
        if i not in changes:
            continue
        row = [(k, w) for k, w in weights.weights[i].items() if k in changes and w > 0]
        total = sum(w for _, w in row)
        if total <= 0:
            dropped.append(i)
            continue
        counterfactual = sum(changes[k] * w for k, w in row) / total
        deltas.append(changes[i] - counterfactual)
        kept.append(i)
    return kept, np.asarray(deltas, dtype=float), len(pool), tuple(dropped)


def bootstrap_se(deltas, n_boot=499, seed=0):
    """Normal-approximation SE of the mean from a resampling distribution.

    Resamples the per-treated contributions with replacement ``n_boot`` times
    (seeded, deterministic) and returns the standard deviation of the
    bootstrap means.
    """
    n = len(deltas)
    if n < 2 or n_boot < 2:
        return math.nan
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), n_boot, n]))
    idx = rng.integers(0, n, size=(n_boot, n))
    means = deltas[idx].mean(axis=1)
    return float(np.std(means, ddof=1))


def att_dd_matching(panel, weights, outcome, windows=None, phase="phase1",
                    n_boot=499, seed=0, estimator_tag=None):
    """Matched difference-in-differences effect on the treated.

    Implements the mean over treated units of the own log change minus the
    match-weighted control log change.  The SE comes from a seeded bootstrap
    over treated firms (set ``n_boot=0`` to skip); the p-value uses a normal
    approximation.
    """
    windows = windows or panel.phase_windows
    changes = phase_log_changes(panel, outcome, windows, phase)
    kept, deltas, pool, dropped = _treated_contributions(changes, weights)
    if len(deltas) == 0:
        raise EstimationError(
            f"no treated units with usable {outcome!r} data in phase {changes.phase_label!r}"
        )
    estimate = float(deltas.mean())
    se = bootstrap_se(deltas, n_boot, seed) if n_boot else math.nan
    if estimator_tag is None:
        k_max = max(len(weights.weights[i]) for i in weights.treated_ids)
        estimator_tag = f"NN(1:{k_max})"
    return AttEstimate(
        estimate=estimate,
        se=se,
        p_value=_normal_p(estimate, se),
        n_treated=len(deltas),
        n_controls=pool,
        estimator=estimator_tag,
        outcome=outcome,
        phase=changes.phase_label,
    )


@dataclass(frozen=True)
class RegressionResult:
    """Weighted least-squares fit of the DD equation."""

    coef: np.ndarray
    coef_names: tuple
    residuals: np.ndarray
    weights: np.ndarray
    vcov: np.ndarray
    design: np.ndarray = field(repr=False, default=None)
    unit_ids: tuple = ()

    def se(self):
        return np.sqrt(np.diag(self.vcov))


def weighted_least_squares(design, y, w):
    """Solve the weighted normal equations; returns (beta, residuals, XtWX)."""
    sw = np.sqrt(w)
    Xw = design * sw[:, None]
    yw = y * sw
    beta, _, rank, _ = np.linalg.lstsq(Xw, yw, rcond=None)
    if rank < design.shape[1]:
        raise EstimationError("singular weighted design matrix")
    residuals = y - design @ beta
    return beta, residuals, Xw.T @ Xw


def hc1_vcov(design, residuals, w):
    """Heteroskedasticity-robust (HC1) covariance for WLS estimates."""
    n, p = design.shape
    scores = design * (w * residuals)[:, None]
    bread = np.linalg.inv((design * w[:, None]).T @ design)
    meat = scores.T @ scores
    return bread @ meat @ bread * (n / (n - p))


def robust_cluster_se(result, clusters):
    """Cluster-robust sandwich covariance for a fitted regression.

    ``clusters`` maps unit ids (or row positions when the result carries no
    ids) to cluster labels.  Scores are summed within clusters before the
    outer product; the small-sample factor is G/(G-1) * (n-1)/(n-p), which
    reduces to the HC1 factor n/(n-p) when every cluster is a singleton.
    """
    design, residuals, w = result.design, result.residuals, result.weights
    n, p = design.shape
    keys = result.unit_ids if result.unit_ids else tuple(range(n))
    labels = np.asarray([clusters[k] for k in keys])
    unique = pd.unique(labels)
    G = len(unique)
    if G < 2:
        raise EstimationError("cluster-robust covariance needs at least 2 clusters")
    scores = design * (w * residuals)[:, None]
    frame = pd.DataFrame(scores)
    frame["_g"] = labels
    summed = frame.groupby("_g", sort=False).sum().to_numpy()
    bread = np.linalg.inv((design * w[:, None]).T @ design)
    meat = summed.T @ summed
    factor = (G / (G - 1.0)) * ((n - 1.0) / (n - p))
    return bread @ meat @ bread * factor


def att_reweighted_ols(panel, scores, outcome, covariates=None, windows=None,
                       phase="phase1", cluster_by_firm=False):
    """Propensity-reweighted least-squares DD estimate of the effect on the
    treated.

    Regresses the base-to-phase log change on a constant, the treatment flag
    and optional covariates.  Treated firms carry weight one; control weights
    are the propensity odds p/(1-p), normalized to sum to the number of
    treated units.  Standard errors are HC1-robust (scores must lie strictly
    inside the unit interval).

    ``scores`` aligns with ``covariates.unit_ids`` when a covariate set is
    given, otherwise it must be a mapping firm_id -> score.

    Returns (AttEstimate, RegressionResult).
    """
    windows = windows or panel.phase_windows
    changes = phase_log_changes(panel, outcome, windows, phase)

    if covariates is not None:
        if covariates.unit_ids is None:
            raise EstimationError("covariate set must carry unit_ids")
        ids = list(covariates.unit_ids)
        score_by_id = dict(zip(ids, as_float_vector(scores, "scores")))
    else:
        score_by_id = dict(scores)
        ids = sorted(score_by_id)

    usable = [i for i in ids if i in changes]
    if not usable:
        raise EstimationError(f"no units with usable {outcome!r} changes")
    d = panel.treatment_by_firm()
    treat = np.asarray([d[i] for i in usable], dtype=float)
    if treat.min() == treat.max():
        raise EstimationError("need both treated and control units in the regression")
    y = np.asarray([changes[i] for i in usable], dtype=float)
    p = np.asarray([score_by_id[i] for i in usable], dtype=float)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise EstimationError("propensity scores must lie strictly inside (0, 1)")

    n1 = float(treat.sum())
    odds = p / (1.0 - p)
    w = np.where(treat == 1, 1.0, odds)
    ctrl_sum = w[treat == 0].sum()
    w = np.where(treat == 0, w * (n1 / ctrl_sum), w)

    blocks = [np.ones(len(usable)), treat]
    names = ["const", "treatment"]
    if covariates is not None:
        pos = {u: j for j, u in enumerate(covariates.unit_ids)}
        rows = np.asarray([pos[i] for i in usable], dtype=int)
        blocks.append(covariates.matrix[rows])
        names.extend(covariates.names)
    design = np.column_stack(blocks)

    beta, residuals, _ = weighted_least_squares(design, y, w)
    result = RegressionResult(
        coef=beta,
        coef_names=tuple(names),
        residuals=residuals,
        weights=w,
        vcov=hc1_vcov(design, residuals, w),
        design=design,
        unit_ids=tuple(usable),
    )
    if cluster_by_firm:
        vcov = robust_cluster_se(result, {i: i for i in usable})
        result = RegressionResult(
            coef=beta, coef_names=tuple(names), residuals=residuals,
            weights=w, vcov=vcov, design=design, unit_ids=tuple(usable),
        )
    estimate = float(beta[1])
    se = float(math.sqrt(result.vcov[1, 1]))
    df = len(usable) - design.shape[1]
    p_value = 2.0 * float(stats.t.sf(abs(estimate) / se, df)) if se > 0 else math.nan
    att = AttEstimate(
        estimate=estimate,
        se=se,
        p_value=min(p_value, 1.0) if not math.isnan(p_value) else p_value,
        n_treated=int(n1),
        n_controls=int(len(usable) - n1),
        estimator="OLS w/R",
        outcome=outcome,
        phase=changes.phase_label,
    )
    return att, result


# -- result tables ---------------------------------------------------------------


ATT_CSV_COLUMNS = (
    "outcome", "phase", "estimator", "estimate", "se", "p", "stars",
    "n_treated", "n_controls",
)


def _fmt(value, digits):
    return "" if value is None or (isinstance(value, float) and math.isnan(value)) \
        else f"{value:.{digits}f}"


@dataclass(frozen=True)
class AttTable:
    estimates: tuple
    star_convention: str = "three_tier"

    def _cells(self):
        estimators = []
        for e in self.estimates:
            if e.estimator not in estimators:
                estimators.append(e.estimator)
        rows = {}
        for e in self.estimates:
            rows.setdefault((e.outcome, e.phase), {})[e.estimator] = e
        return estimators, rows

    def to_text(self):
        estimators, rows = self._cells()
        width = 18
        header = f"{'outcome':<16}{'phase':<10}"
        header += "".join(f"{name:>{width}}" for name in estimators)
        header += f"{'n-treated':>11}{'n-controls':>12}"
        lines = [header, "-" * len(header)]
        for (outcome, phase), cells in rows.items():
            line = f"{outcome:<16}{phase:<10}"
            for name in estimators:
                e = cells.get(name)
                if e is None:
                    line += " " * width
                    continue
                stars = significance_stars(e.p_value, self.star_convention)
                cell = f"{_fmt(e.estimate, 2)}{stars} ({_fmt(e.se, 2)})"
                line += f"{cell:>{width}}"
            counts = next(cells[name] for name in estimators if name in cells)
            line += f"{counts.n_treated:>11d}{counts.n_controls:>12d}"
            lines.append(line)
        return "\n".join(lines) + "\n"

    def to_csv(self):
        lines = [",".join(ATT_CSV_COLUMNS)]
        for e in self.estimates:
            lines.append(",".join([
                e.outcome, e.phase, e.estimator,
                repr(e.estimate),
                "" if math.isnan(e.se) else repr(e.se),
                "" if math.isnan(e.p_value) else repr(e.p_value),
                significance_stars(e.p_value, self.star_convention),
                str(e.n_treated), str(e.n_controls),
            ]))
        return "\n".join(lines) + "\n"


def att_table(estimates, star_convention="three_tier"):
    """Result table over outcomes and phases, one column per estimator."""
    return AttTable(tuple(estimates), star_convention)
