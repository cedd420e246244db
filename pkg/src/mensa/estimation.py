"""Effect estimation on matched pairs.

The workhorse is a saturated two-period / two-arm interaction model

    y = alpha + beta * healthy_treatment + gamma * treated
        + delta * healthy_treatment * treated + error

fitted by QR least squares; ``delta`` is the differential post-minus-pre
change of healthy-arm versus unhealthy-arm focal persons.  On top of it sit
the pooled cross-sectional regression, the 2x2 increase/no-increase
contingency analysis (Yates chi-squared + continuity-corrected McNemar),
dose-response stratification, quartile strata and per-category effects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from mensa.cohort import FocalUnit
from mensa.ingest import DAY_SECONDS, ItemCatalog, LogIndex
from mensa.matching import MatchedPair
from mensa.stats import chi2_sf_1df, spearman

OLS_RIDGE = 1e-10
_HARD_SINGULAR = 1e-10
_SOFT_SINGULAR = 1e-6


class CollinearityError(ValueError):
    def __init__(self, columns: list[str]):
        super().__init__(f"design matrix is rank deficient; collinear columns: {columns}")
        self.columns = columns


@dataclass
class OlsFit:
    coef: np.ndarray
    se: np.ndarray
    r2: float
    n: int
    names: list[str]


def ols(X: np.ndarray, y: np.ndarray, names: Optional[Sequence[str]] = None) -> OlsFit:
    """Least squares via QR with classical homoskedastic standard errors.

    Near-singular designs are stabilized with a 1e-10 ridge; exactly
    collinear columns raise :class:`CollinearityError` naming them.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n < p:
        raise ValueError("need at least as many rows as columns")
    if names is None:
        names = [f"x{j}" for j in range(p)]
    names = list(names)

    Q, R = np.linalg.qr(X)
    diag = np.abs(np.diag(R))
    scale = diag.max() if diag.max() > 0 else 1.0
    bad = [names[j] for j in range(p) if diag[j] <= _HARD_SINGULAR * scale]
    if bad:
        raise CollinearityError(bad)
    if np.any(diag <= _SOFT_SINGULAR * scale):
        # borderline conditioning: refit on the ridge-augmented system
        Xa = np.vstack([X, np.sqrt(OLS_RIDGE) * np.eye(p)])
        ya = np.concatenate([y, np.zeros(p)])
        Q, R = np.linalg.qr(Xa)
        coef = np.linalg.solve(R, Q.T @ ya)
    else:
        coef = np.linalg.solve(R, Q.T @ y)

    resid = y - X @ coef
    ssr = float(resid @ resid)
    dof = n - p
    sigma2 = ssr / dof if dof > 0 else 0.0
    r_inv = np.linalg.solve(R, np.eye(p))
    cov = sigma2 * (r_inv @ r_inv.T)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    centered = y - y.mean()
    sst = float(centered @ centered)
    r2 = 1.0 - ssr / sst if sst > 0 else 0.0
    return OlsFit(coef=coef, se=se, r2=float(min(max(r2, 0.0), 1.0)), n=n, names=names)


# ---------------------------------------------------------------------------
# outcomes

HEALTH_SCORE = "health_score"
HEALTHY_COUNT = "healthy_count"
UNHEALTHY_COUNT = "unhealthy_count"
CATEGORY_COUNT = "category_count"


@dataclass(frozen=True)
class OutcomeSpec:
    """What to measure inside a focal unit's pre or post window.

    ``window_days`` overrides the unit's own window length (used for the
    3/6/12-month horizons); outcomes are always computed from the focal
    unit's own transactions only.
    """
    kind: str = HEALTH_SCORE
    category: Optional[str] = None
    window_days: Optional[int] = None

    def __post_init__(self):
        if self.kind not in (HEALTH_SCORE, HEALTHY_COUNT, UNHEALTHY_COUNT, CATEGORY_COUNT):
            raise ValueError(f"unknown outcome kind {self.kind!r}")
        if self.kind == CATEGORY_COUNT and not self.category:
            raise ValueError("category_count outcome needs a category")

    def label(self) -> str:
        if self.kind == CATEGORY_COUNT:
            return f"category_count[{self.category}]"
        return self.kind


def outcome_value(unit: FocalUnit, window: str, index: LogIndex, catalog: ItemCatalog,
                  spec: OutcomeSpec) -> Optional[float]:
    """Outcome in the requested window; None when a mean-type outcome has no items."""
    days = spec.window_days if spec.window_days is not None else unit.window_days
    span = days * DAY_SECONDS
    if window == "pre":
        txs = index.user_window(unit.user_id, unit.t0 - span, unit.t0,
                                include_lo=True, include_hi=False)
    elif window == "post":
        txs = index.user_window(unit.user_id, unit.t0, unit.t0 + span,
                                include_lo=False, include_hi=True)
    else:
        raise ValueError("window must be 'pre' or 'post'")
    items = [it for tx in txs for it in tx.item_ids]
    if spec.kind == HEALTH_SCORE:
        if not items:
            return None
        return sum(catalog.label(it) for it in items) / len(items)
    if spec.kind == HEALTHY_COUNT:
        return float(sum(1 for it in items if catalog.label(it) == 1))
    if spec.kind == UNHEALTHY_COUNT:
        return float(sum(1 for it in items if catalog.label(it) == -1))
    return float(sum(1 for it in items if catalog.category(it) == spec.category))


# ---------------------------------------------------------------------------
# difference in differences

DID_NAMES = ["intercept", "healthy_treatment", "treated", "healthy_treatment:treated"]


@dataclass
class DidEstimate:
    delta: float
    alpha: float
    beta: float
    gamma: float
    se_delta: float
    ci: tuple[float, float]
    r2: float
    n_points: int
    ci_method: str
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "delta": self.delta, "alpha": self.alpha, "beta": self.beta,
            "gamma": self.gamma, "se_delta": self.se_delta,
            "ci_lo": self.ci[0], "ci_hi": self.ci[1], "r2": self.r2,
            "n_points": self.n_points, "ci_method": self.ci_method,
            "degenerate": self.degenerate,
        }


def _pair_outcomes(pairs: Sequence[MatchedPair], index: LogIndex, catalog: ItemCatalog,
                   spec: OutcomeSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(pre_h, post_h, pre_u, post_u) arrays; pairs missing any value are dropped."""
    rows = []
    for p in pairs:
        vals = (
            outcome_value(p.healthy_unit, "pre", index, catalog, spec),
            outcome_value(p.healthy_unit, "post", index, catalog, spec),
            outcome_value(p.unhealthy_unit, "pre", index, catalog, spec),
            outcome_value(p.unhealthy_unit, "post", index, catalog, spec),
        )
        if all(v is not None for v in vals):
            rows.append(vals)
    if not rows:
        return (np.zeros(0),) * 4
    arr = np.array(rows, dtype=float)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]


def did_from_outcomes(pre_h: np.ndarray, post_h: np.ndarray,
                      pre_u: np.ndarray, post_u: np.ndarray,
                      ci_method: str = "analytic", n_boot: int = 2000,
                      seed: int = 0) -> DidEstimate:
    n_pairs = len(pre_h)
    if n_pairs < 2:
        raise ValueError("need at least 2 matched pairs")
    y = np.concatenate([pre_u, post_u, pre_h, post_h])
    if np.ptp(y) == 0:
        return DidEstimate(delta=0.0, alpha=float(y[0]), beta=0.0, gamma=0.0,
                           se_delta=0.0, ci=(0.0, 0.0), r2=0.0,
                           n_points=4 * n_pairs, ci_method=ci_method, degenerate=True)
    h = np.concatenate([np.zeros(2 * n_pairs), np.ones(2 * n_pairs)])
    t = np.concatenate([np.zeros(n_pairs), np.ones(n_pairs)] * 2)
    X = np.column_stack([np.ones(4 * n_pairs), h, t, h * t])
    fit = ols(X, y, names=DID_NAMES)
    alpha, beta, gamma, delta = fit.coef
    se_delta = float(fit.se[3])
    if ci_method == "analytic":
        ci = (delta - 2 * se_delta, delta + 2 * se_delta)
    elif ci_method == "bootstrap":
        # saturated-design identity: the refitted interaction equals the
        # mean per-pair difference, so replicates need no regression
        d = (post_h - pre_h) - (post_u - pre_u)
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, n_pairs, size=(n_boot, n_pairs))
        reps = d[idx].mean(axis=1)
        ci = (float(np.percentile(reps, 2.5)), float(np.percentile(reps, 97.5)))
    else:
        raise ValueError(f"unknown ci_method {ci_method!r}")
    return DidEstimate(delta=float(delta), alpha=float(alpha), beta=float(beta),
                       gamma=float(gamma), se_delta=se_delta, ci=ci, r2=fit.r2,
                       n_points=4 * n_pairs, ci_method=ci_method)


def did(pairs: Sequence[MatchedPair], index: LogIndex, catalog: ItemCatalog,
        outcome: OutcomeSpec = OutcomeSpec(), ci_method: str = "analytic",
        n_boot: int = 2000, seed: int = 0) -> DidEstimate:
    pre_h, post_h, pre_u, post_u = _pair_outcomes(pairs, index, catalog, outcome)
    return did_from_outcomes(pre_h, post_h, pre_u, post_u,
                             ci_method=ci_method, n_boot=n_boot, seed=seed)


# ---------------------------------------------------------------------------
# pooled regression

POOLED_PREDICTORS = ["pre_health", "partner_pre_score", "event_count",
                     "pct_meals", "pct_lunchtime", "weekly_tx"]


@dataclass
class CoefRow:
    name: str
    coef: float
    se: float
    ci: tuple[float, float]
    significant: bool

    def to_dict(self) -> dict:
        return {"name": self.name, "coef": self.coef, "se": self.se,
                "ci_lo": self.ci[0], "ci_hi": self.ci[1],
                "significant": self.significant}


@dataclass
class PooledRegression:
    rows: list[CoefRow]
    r2: float
    n_units: int

    def to_dict(self) -> dict:
        return {"schema": 1, "r2": self.r2, "n_units": self.n_units,
                "coefficients": [r.to_dict() for r in self.rows]}


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / (sd if sd > 0 else 1.0)


def pooled_regression(pairs: Sequence[MatchedPair], index: LogIndex,
                      catalog: ItemCatalog) -> PooledRegression:
    """Post-treatment healthiness regressed on standardized pre-treatment
    predictors over all matched units (both arms pooled)."""
    units: list[FocalUnit] = []
    for p in pairs:
        units.extend((p.healthy_unit, p.unhealthy_unit))
    if len(units) < 10:
        raise ValueError("pooled regression needs at least 10 units")
    spec = OutcomeSpec(kind=HEALTH_SCORE)
    rows = []
    for u in units:
        post = outcome_value(u, "post", index, catalog, spec)
        if post is None:
            continue
        rows.append((
            post, u.covariates.pre_health, u.partner_pre_score, float(u.event_count),
            u.covariates.pct_meals, u.covariates.pct_lunchtime, u.covariates.weekly_tx,
        ))
    arr = np.array(rows, dtype=float)
    y = _standardize(arr[:, 0])
    X = np.column_stack([np.ones(len(arr))] +
                        [_standardize(arr[:, k]) for k in range(1, arr.shape[1])])
    fit = ols(X, y, names=["intercept"] + POOLED_PREDICTORS)
    out = []
    for name, c, s in zip(fit.names[1:], fit.coef[1:], fit.se[1:]):
        lo, hi = c - 2 * s, c + 2 * s
        out.append(CoefRow(name=name, coef=float(c), se=float(s), ci=(float(lo), float(hi)),
                           significant=bool(lo > 0 or hi < 0)))
    return PooledRegression(rows=out, r2=fit.r2, n_units=len(arr))


# ---------------------------------------------------------------------------
# contingency analysis

@dataclass
class ContingencyTable:
    both_inc: int
    healthy_only_inc: int
    unhealthy_only_inc: int
    neither: int

    @property
    def total(self) -> int:
        return self.both_inc + self.healthy_only_inc + self.unhealthy_only_inc + self.neither

    def to_dict(self) -> dict:
        return {"both_increase": self.both_inc,
                "healthy_only_increase": self.healthy_only_inc,
                "unhealthy_only_increase": self.unhealthy_only_inc,
                "neither_increase": self.neither,
                "total_pairs": self.total}


@dataclass
class ContingencyResult:
    table: ContingencyTable
    chi2_stat: Optional[float]
    chi2_p: Optional[float]
    mcnemar_stat: Optional[float]
    mcnemar_p: Optional[float]  # None when there are no discordant pairs
    corrected: bool

    def to_dict(self) -> dict:
        return {"schema": 1, "table": self.table.to_dict(),
                "chi2_stat": self.chi2_stat, "chi2_p": self.chi2_p,
                "mcnemar_stat": self.mcnemar_stat, "mcnemar_p": self.mcnemar_p,
                "corrected": self.corrected}


def contingency_from_counts(both_inc: int, healthy_only_inc: int, unhealthy_only_inc: int,
                            neither: int, corrected: bool = True) -> ContingencyResult:
    table = ContingencyTable(both_inc, healthy_only_inc, unhealthy_only_inc, neither)
    # 2x2 layout: rows = unhealthy-arm increase yes/no, cols = healthy-arm yes/no
    a, b = both_inc, unhealthy_only_inc
    c, d = healthy_only_inc, neither
    n = table.total
    row1, row2 = a + b, c + d
    col1, col2 = a + c, b + d
    chi2_stat = chi2_p = None
    if n > 0 and row1 and row2 and col1 and col2:
        dev = abs(a * d - b * c)
        if corrected:
            dev = max(dev - n / 2.0, 0.0)
        chi2_stat = n * dev * dev / (row1 * row2 * col1 * col2)
        chi2_p = chi2_sf_1df(chi2_stat)
    disc = healthy_only_inc + unhealthy_only_inc
    mcnemar_stat = mcnemar_p = None
    if disc > 0:
        dev = abs(healthy_only_inc - unhealthy_only_inc)
        if corrected:
            dev = max(dev - 1.0, 0.0)
        mcnemar_stat = dev * dev / disc
        mcnemar_p = chi2_sf_1df(mcnemar_stat)
    return ContingencyResult(table=table, chi2_stat=chi2_stat, chi2_p=chi2_p,
                             mcnemar_stat=mcnemar_stat, mcnemar_p=mcnemar_p,
                             corrected=corrected)


def contingency(pairs: Sequence[MatchedPair], index: LogIndex, catalog: ItemCatalog,
                outcome: OutcomeSpec = OutcomeSpec(),
                corrected: bool = True) -> ContingencyResult:
    """Pair-level increase (post > pre, strictly) cross-tabulated across arms."""
    if not pairs:
        raise ValueError("need at least 1 matched pair")
    pre_h, post_h, pre_u, post_u = _pair_outcomes(pairs, index, catalog, outcome)
    h_inc = post_h > pre_h
    u_inc = post_u > pre_u
    return contingency_from_counts(
        both_inc=int(np.sum(h_inc & u_inc)),
        healthy_only_inc=int(np.sum(h_inc & ~u_inc)),
        unhealthy_only_inc=int(np.sum(~h_inc & u_inc)),
        neither=int(np.sum(~h_inc & ~u_inc)),
        corrected=corrected,
    )


# ---------------------------------------------------------------------------
# dose-response

@dataclass
class DoseBin:
    dose_median: float
    n_pairs: int
    estimate: DidEstimate

    def to_dict(self) -> dict:
        return {"dose_median": self.dose_median, "n_pairs": self.n_pairs,
                "estimate": self.estimate.to_dict()}


@dataclass
class DoseResponse:
    bins: list[DoseBin]
    spearman_rho: Optional[float]
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"schema": 1, "spearman_rho": self.spearman_rho,
                "bins": [b.to_dict() for b in self.bins], "notes": self.notes}


def dose_response(pairs: Sequence[MatchedPair], index: LogIndex, catalog: ItemCatalog,
                  n_bins: int = 4, outcome: OutcomeSpec = OutcomeSpec()) -> DoseResponse:
    """Effect stratified by the pre-treatment partner score gap (the dose)."""
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    doses = np.array([p.healthy_unit.partner_pre_score - p.unhealthy_unit.partner_pre_score
                      for p in pairs])
    order = np.argsort(doses, kind="stable")
    chunks = [list(chunk) for chunk in np.array_split(order, n_bins) if len(chunk)]
    notes: list[str] = []
    merged: list[list[int]] = []
    for chunk in chunks:
        if len(chunk) < 2 and merged:
            merged[-1].extend(chunk)
            notes.append("merged an undersized dose bin into its lower neighbor")
        else:
            merged.append(chunk)
    if len(merged) >= 2 and len(merged[0]) < 2:
        merged[1] = merged[0] + merged[1]
        merged = merged[1:]
        notes.append("merged an undersized dose bin into its upper neighbor")
    bins = []
    for chunk in merged:
        sub = [pairs[i] for i in chunk]
        est = did(sub, index, catalog, outcome=outcome, ci_method="analytic")
        bins.append(DoseBin(
            dose_median=float(np.median(doses[chunk])),
            n_pairs=len(sub), estimate=est,
        ))
    rho = None
    if len(bins) >= 2:
        rho = spearman([b.dose_median for b in bins], [b.estimate.delta for b in bins])
    return DoseResponse(bins=bins, spearman_rho=rho, notes=notes)


# ---------------------------------------------------------------------------
# quartile strata

@dataclass
class StratumCell:
    quartile: int  # 0..3 over pooled focal pre-scores
    arm: str
    horizon_days: int
    n_units: int
    mean_diff: Optional[float]
    ci: Optional[tuple[float, float]]

    def to_dict(self) -> dict:
        return {"quartile": self.quartile, "arm": self.arm,
                "horizon_days": self.horizon_days, "n_units": self.n_units,
                "mean_diff": self.mean_diff,
                "ci_lo": self.ci[0] if self.ci else None,
                "ci_hi": self.ci[1] if self.ci else None,
                "missing": self.mean_diff is None}


@dataclass
class StrataResult:
    quartile_edges: tuple[float, float, float]
    cells: list[StratumCell]

    def to_dict(self) -> dict:
        return {"schema": 1, "quartile_edges": list(self.quartile_edges),
                "cells": [c.to_dict() for c in self.cells]}


def strata_by_pre_health(pairs: Sequence[MatchedPair], index: LogIndex, catalog: ItemCatalog,
                         horizons: Sequence[int] = (91, 183, 366),
                         n_boot: int = 1000, seed: int = 0) -> StrataResult:
    """Mean post-minus-pre healthiness change per pre-score quartile, arm and
    horizon, with percentile bootstrap CIs over units."""
    units: list[tuple[FocalUnit, str]] = []
    for p in pairs:
        units.append((p.healthy_unit, "healthy"))
        units.append((p.unhealthy_unit, "unhealthy"))
    arms = {"healthy": 0, "unhealthy": 0}
    for _, arm in units:
        arms[arm] += 1
    if min(arms.values()) < 4:
        raise ValueError("need at least 4 units per arm")
    pre_scores = np.array([u.covariates.pre_health for u, _ in units])
    q1, q2, q3 = (float(np.percentile(pre_scores, p)) for p in (25, 50, 75))
    edges = (q1, q2, q3)
    quartile = np.digitize(pre_scores, bins=edges, right=True)

    rng = np.random.default_rng(seed)
    cells = []
    for q in range(4):
        for arm in ("healthy", "unhealthy"):
            for horizon in horizons:
                sel = [u for (u, a), uq in zip(units, quartile) if a == arm and uq == q]
                diffs = []
                for u in sel:
                    post = outcome_value(u, "post", index, catalog,
                                         OutcomeSpec(kind=HEALTH_SCORE, window_days=horizon))
                    if post is not None:
                        diffs.append(post - u.covariates.pre_health)
                if not diffs:
                    cells.append(StratumCell(q, arm, horizon, 0, None, None))
                    continue
                d = np.array(diffs)
                idx = rng.integers(0, len(d), size=(n_boot, len(d)))
                reps = d[idx].mean(axis=1)
                cells.append(StratumCell(
                    quartile=q, arm=arm, horizon_days=horizon, n_units=len(d),
                    mean_diff=float(d.mean()),
                    ci=(float(np.percentile(reps, 2.5)), float(np.percentile(reps, 97.5))),
                ))
    return StrataResult(quartile_edges=edges, cells=cells)


# ---------------------------------------------------------------------------
# category effects

@dataclass
class CategoryEffect:
    category: str
    estimate: DidEstimate
    significant: bool

    def to_dict(self) -> dict:
        return {"category": self.category, "significant": self.significant,
                "estimate": self.estimate.to_dict()}


def category_effects(pairs: Sequence[MatchedPair], index: LogIndex,
                     catalog: ItemCatalog) -> list[CategoryEffect]:
    """One interaction estimate per food category with any focal purchases,
    sorted by effect size (descending)."""
    purchased: set[str] = set()
    for p in pairs:
        for unit in (p.healthy_unit, p.unhealthy_unit):
            for window in ("pre", "post"):
                span = unit.window_days * DAY_SECONDS
                lo, hi = ((unit.t0 - span, unit.t0) if window == "pre"
                          else (unit.t0, unit.t0 + span))
                txs = index.user_window(unit.user_id, lo, hi,
                                        include_lo=(window == "pre"),
                                        include_hi=(window == "post"))
                for tx in txs:
                    for it in tx.item_ids:
                        cat = catalog.category(it)
                        if cat is not None:
                            purchased.add(cat)
    effects = []
    for cat in sorted(purchased):
        est = did(pairs, index, catalog,
                  outcome=OutcomeSpec(kind=CATEGORY_COUNT, category=cat))
        significant = bool(est.ci[0] > 0 or est.ci[1] < 0) and not est.degenerate
        effects.append(CategoryEffect(category=cat, estimate=est, significant=significant))
    effects.sort(key=lambda e: (-e.estimate.delta, e.category))
    return effects
