"""Caliper + exact-constraint pairing of focal units via max-weight matching.

An edge between a healthy-arm and an unhealthy-arm unit is admissible when
the propensity gap is within the caliper and the pair agrees exactly on
onset calendar month, preferred shop, and the sign of the pre-treatment
healthiness score.  Edge weight is 1 / (1 + Mahalanobis distance) over the
numeric covariates; the assignment is solved exactly with the Hungarian
algorithm on each connected component (padded to square).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from mensa.cohort import NUMERIC_COVARIATES, FocalUnit, Treatment
from mensa.ingest import local_date

SMD_FLAG_THRESHOLD = 0.2


@dataclass(frozen=True)
class Edge:
    healthy: FocalUnit
    unhealthy: FocalUnit
    weight: float
    propensity_gap: float
    mahalanobis_d: float


@dataclass(frozen=True)
class MatchedPair:
    healthy_unit: FocalUnit
    unhealthy_unit: FocalUnit
    propensity_gap: float
    mahalanobis_d: float


@dataclass
class BalanceRow:
    covariate: str
    smd_before: float
    smd_after: float
    flagged: bool          # after-matching SMD >= 0.2
    degenerate: bool = False  # zero variance with a nonzero mean gap


@dataclass
class BalanceTable:
    rows: list[BalanceRow]

    def flagged(self) -> list[str]:
        return [r.covariate for r in self.rows if r.flagged]

    def to_dict(self) -> dict:
        def clean(x: float):
            return x if np.isfinite(x) else None

        return {
            "schema": 1,
            "threshold": SMD_FLAG_THRESHOLD,
            "covariates": {
                r.covariate: {
                    "smd_before": clean(r.smd_before),
                    "smd_after": clean(r.smd_after),
                    "flagged": r.flagged,
                    "degenerate": r.degenerate,
                }
                for r in self.rows
            },
        }


def _onset_month(unit: FocalUnit, tz_hours: float) -> tuple[int, int]:
    d = local_date(unit.t0, tz_hours)
    return (d.year, d.month)


def pooled_covariance(units: Sequence[FocalUnit]) -> np.ndarray:
    """Covariance of the numeric covariates over all focal units (both arms),
    ridge-repaired if singular."""
    X = np.array([u.covariates.numeric() for u in units])
    cov = np.cov(X, rowvar=False, ddof=1) if len(units) > 1 else np.zeros((X.shape[1],) * 2)
    cov = np.atleast_2d(cov)
    d = cov.shape[0]
    if np.linalg.matrix_rank(cov) < d:
        ridge = max(1e-8 * np.trace(cov) / d, 1e-12)
        cov = cov + ridge * np.eye(d)
    return cov


def admissible_edges(healthy: Sequence[FocalUnit], unhealthy: Sequence[FocalUnit],
                     prop_healthy: Sequence[float], prop_unhealthy: Sequence[float],
                     caliper: float = 0.1, tz_hours: float = 1.0) -> list[Edge]:
    if len(healthy) != len(prop_healthy) or len(unhealthy) != len(prop_unhealthy):
        raise ValueError("propensities must align with unit lists")
    all_units = list(healthy) + list(unhealthy)
    cov_inv = np.linalg.inv(pooled_covariance(all_units))

    h_keys = [( _onset_month(u, tz_hours), u.covariates.preferred_shop,
                np.sign(u.covariates.pre_health)) for u in healthy]
    u_keys = [( _onset_month(u, tz_hours), u.covariates.preferred_shop,
                np.sign(u.covariates.pre_health)) for u in unhealthy]
    h_num = np.array([u.covariates.numeric() for u in healthy]) if healthy else np.zeros((0, 4))
    u_num = np.array([u.covariates.numeric() for u in unhealthy]) if unhealthy else np.zeros((0, 4))

    edges: list[Edge] = []
    for i, hu in enumerate(healthy):
        for j, uu in enumerate(unhealthy):
            gap = abs(prop_healthy[i] - prop_unhealthy[j])
            if gap > caliper:
                continue
            if h_keys[i] != u_keys[j]:
                continue
            diff = h_num[i] - u_num[j]
            d2 = float(diff @ cov_inv @ diff)
            d_m = float(np.sqrt(max(d2, 0.0)))
            edges.append(Edge(
                healthy=hu, unhealthy=uu, weight=1.0 / (1.0 + d_m),
                propensity_gap=gap, mahalanobis_d=d_m,
            ))
    return edges


def _hungarian_max(weights: np.ndarray) -> list[tuple[int, int]]:
    """Exact max-weight perfect assignment on a square matrix.

    Potentials-based O(n^3) shortest-augmenting-path formulation, run on the
    negated matrix (minimization); fully deterministic.
    """
    n = weights.shape[0]
    cost = -weights
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match_col = np.zeros(n + 1, dtype=np.int64)  # column -> assigned row (0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match_col[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            free = ~used
            free[0] = False
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            cols = np.arange(1, n + 1)
            improve = free[1:] & (cur < minv[1:])
            minv[1:][improve] = cur[improve]
            way[cols[improve]] = j0
            free_cols = cols[free[1:]]
            j1 = int(free_cols[np.argmin(minv[free_cols])])
            delta = minv[j1]
            u[match_col[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        while j0:
            j1 = int(way[j0])
            match_col[j0] = match_col[j1]
            j0 = j1
    return [(int(match_col[j]) - 1, j - 1) for j in range(1, n + 1)]


def _components(edges: Sequence[Edge]) -> list[list[Edge]]:
    parent: dict[tuple[str, object], tuple[str, object]] = {}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb

    def node(side: str, unit: FocalUnit):
        return (side, (unit.user_id, unit.t0))

    for e in edges:
        for nd in (node("h", e.healthy), node("u", e.unhealthy)):
            parent.setdefault(nd, nd)
        union(node("h", e.healthy), node("u", e.unhealthy))
    groups: dict[tuple, list[Edge]] = {}
    for e in edges:
        groups.setdefault(find(node("h", e.healthy)), []).append(e)
    return [groups[k] for k in sorted(groups, key=str)]


def max_weight_matching(edges: Sequence[Edge]) -> list[MatchedPair]:
    """Matching (each unit in at most one pair) maximizing total edge weight."""
    pairs: list[MatchedPair] = []
    for comp in _components(list(edges)):
        h_units = sorted({(e.healthy.user_id, e.healthy.t0) for e in comp})
        u_units = sorted({(e.unhealthy.user_id, e.unhealthy.t0) for e in comp})
        h_pos = {k: i for i, k in enumerate(h_units)}
        u_pos = {k: i for i, k in enumerate(u_units)}
        n = max(len(h_units), len(u_units))
        W = np.zeros((n, n))
        lookup: dict[tuple[int, int], Edge] = {}
        for e in comp:
            i = h_pos[(e.healthy.user_id, e.healthy.t0)]
            j = u_pos[(e.unhealthy.user_id, e.unhealthy.t0)]
            if e.weight > W[i, j]:  # keep the best of parallel edges
                W[i, j] = e.weight
                lookup[(i, j)] = e
        for i, j in _hungarian_max(W):
            e = lookup.get((i, j))
            if e is not None:  # drop zero-weight padding assignments
                pairs.append(MatchedPair(
                    healthy_unit=e.healthy, unhealthy_unit=e.unhealthy,
                    propensity_gap=e.propensity_gap, mahalanobis_d=e.mahalanobis_d,
                ))
    pairs.sort(key=lambda p: (p.healthy_unit.user_id, p.healthy_unit.t0))
    return pairs


def _smd(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    mean_gap = abs(float(a.mean()) - float(b.mean()))
    pooled = np.sqrt((float(a.var(ddof=1)) + float(b.var(ddof=1))) / 2.0) \
        if len(a) > 1 and len(b) > 1 else 0.0
    if pooled == 0.0:
        if mean_gap == 0.0:
            return 0.0, False
        return float("inf"), True  # degenerate: zero variance, nonzero gap
    return mean_gap / pooled, False


def balance(units_before: Sequence[FocalUnit], pairs_after: Sequence[MatchedPair]) -> BalanceTable:
    healthy_before = [u for u in units_before if u.treatment is Treatment.HEALTHY_PARTNER]
    unhealthy_before = [u for u in units_before if u.treatment is Treatment.UNHEALTHY_PARTNER]
    if len(healthy_before) < 2 or len(unhealthy_before) < 2:
        raise ValueError("balance needs at least 2 units per arm")
    hb = np.array([u.covariates.numeric() for u in healthy_before])
    ub = np.array([u.covariates.numeric() for u in unhealthy_before])
    rows = []
    for k, name in enumerate(NUMERIC_COVARIATES):
        before, degen_b = _smd(hb[:, k], ub[:, k])
        if pairs_after:
            ha = np.array([p.healthy_unit.covariates.numeric()[k] for p in pairs_after])
            ua = np.array([p.unhealthy_unit.covariates.numeric()[k] for p in pairs_after])
            after, degen_a = _smd(ha, ua)
        else:
            after, degen_a = float("nan"), False
        rows.append(BalanceRow(
            covariate=name,
            smd_before=before,
            smd_after=after,
            flagged=bool(after >= SMD_FLAG_THRESHOLD),
            degenerate=degen_b or degen_a,
        ))
    return BalanceTable(rows=rows)
