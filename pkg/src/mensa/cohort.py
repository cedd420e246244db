"""Construction of incident-user focal units with active comparators.

A (user, tie) becomes a focal unit when the tie's onset t0 is the user's
only onset within +/- ``window_days``, the user has enough transactions in
both the pre window [t0 - W, t0) and the post window (t0, t0 + W], and the
partner's purchases in the aligned pre window classify the partner as
clearly healthy- or unhealthy-eating (outside the margin band around zero).
Both endpoints of a tie can yield focal units independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from mensa.health import score
from mensa.ingest import DAY_SECONDS, ItemCatalog, LogIndex, Transaction, local_datetime
from mensa.ties import Tie

NUMERIC_COVARIATES = ("pct_lunchtime", "pct_meals", "pre_health", "weekly_tx")
MEAL_CATEGORY = "meal"


class Treatment(str, Enum):
    HEALTHY_PARTNER = "healthy_partner"
    UNHEALTHY_PARTNER = "unhealthy_partner"


@dataclass(frozen=True)
class CohortConfig:
    window_days: int = 183
    margin: float = 0.1
    lunch_start_hour: float = 11.0
    lunch_end_hour: float = 14.0
    min_pre_tx: int = 10
    tz_hours: float = 1.0

    def __post_init__(self):
        if self.window_days <= 0:
            raise ValueError("window_days must be positive")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.min_pre_tx < 1:
            raise ValueError("min_pre_tx must be at least 1")

    @property
    def window_seconds(self) -> int:
        return self.window_days * DAY_SECONDS


@dataclass(frozen=True)
class CovariateVector:
    preferred_shop: str
    pct_lunchtime: float
    pct_meals: float
    pre_health: float
    weekly_tx: float

    def numeric(self) -> np.ndarray:
        return np.array([self.pct_lunchtime, self.pct_meals, self.pre_health, self.weekly_tx])


@dataclass(frozen=True)
class FocalUnit:
    user_id: str
    t0: int
    partner_id: str
    treatment: Treatment
    partner_pre_score: float
    covariates: CovariateVector
    window_days: int
    event_count: int

    @property
    def pre_window(self) -> tuple[int, int]:
        """[t0 - W, t0), half-open on the right."""
        return (self.t0 - self.window_days * DAY_SECONDS, self.t0)

    @property
    def post_window(self) -> tuple[int, int]:
        """(t0, t0 + W], half-open on the left."""
        return (self.t0, self.t0 + self.window_days * DAY_SECONDS)


@dataclass
class Cohort:
    units: list[FocalUnit]
    exclusions: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.units)

    def by_arm(self) -> tuple[list[FocalUnit], list[FocalUnit]]:
        healthy = [u for u in self.units if u.treatment is Treatment.HEALTHY_PARTNER]
        unhealthy = [u for u in self.units if u.treatment is Treatment.UNHEALTHY_PARTNER]
        return healthy, unhealthy


def lunchtime_fraction(transactions: Sequence[Transaction], config: CohortConfig) -> float:
    """Fraction of purchased items bought inside the configured lunch window."""
    n_items = 0
    n_lunch = 0
    for tx in transactions:
        dt = local_datetime(tx.timestamp, config.tz_hours)
        hour = dt.hour + dt.minute / 60 + dt.second / 3600
        in_lunch = config.lunch_start_hour <= hour < config.lunch_end_hour
        n_items += len(tx.item_ids)
        if in_lunch:
            n_lunch += len(tx.item_ids)
    if n_items == 0:
        raise ValueError("no items in window")
    return n_lunch / n_items


def _covariates(pre_txs: Sequence[Transaction], catalog: ItemCatalog,
                config: CohortConfig) -> CovariateVector:
    shop_counts: dict[str, int] = {}
    for tx in pre_txs:
        shop_counts[tx.shop_id] = shop_counts.get(tx.shop_id, 0) + 1
    top = max(shop_counts.values())
    preferred = min(s for s, c in shop_counts.items() if c == top)
    items = [it for tx in pre_txs for it in tx.item_ids]
    n_meals = sum(1 for it in items if catalog.category(it) == MEAL_CATEGORY)
    return CovariateVector(
        preferred_shop=preferred,
        pct_lunchtime=lunchtime_fraction(pre_txs, config),
        pct_meals=n_meals / len(items),
        pre_health=score(items, catalog).value,
        weekly_tx=len(pre_txs) / (config.window_days / 7.0),
    )


def build_focal_units(index: LogIndex, ties: Iterable[Tie], catalog: ItemCatalog,
                      config: CohortConfig) -> Cohort:
    """Derive every eligible focal unit; ineligible candidates are counted,
    not raised."""
    onsets_by_user: dict[str, list[Tie]] = {}
    for tie in ties:
        onsets_by_user.setdefault(tie.user_a, []).append(tie)
        onsets_by_user.setdefault(tie.user_b, []).append(tie)

    window = config.window_seconds
    exclusions = {
        "overlapping_onsets": 0,
        "too_few_pre_tx": 0,
        "too_few_post_tx": 0,
        "partner_no_pre_purchases": 0,
        "inside_margin_band": 0,
    }
    units: list[FocalUnit] = []
    for user in sorted(onsets_by_user):
        user_ties = onsets_by_user[user]
        for tie in user_ties:
            t0 = tie.onset_timestamp
            others = [t for t in user_ties if t is not tie]
            if any(abs(t.onset_timestamp - t0) <= window for t in others):
                exclusions["overlapping_onsets"] += 1
                continue
            pre_txs = index.user_window(user, t0 - window, t0, include_lo=True, include_hi=False)
            if len(pre_txs) < config.min_pre_tx:
                exclusions["too_few_pre_tx"] += 1
                continue
            post_txs = index.user_window(user, t0, t0 + window, include_lo=False, include_hi=True)
            if len(post_txs) < config.min_pre_tx:
                exclusions["too_few_post_tx"] += 1
                continue
            partner = tie.user_b if user == tie.user_a else tie.user_a
            partner_items = [
                it for tx in index.user_window(partner, t0 - window, t0,
                                               include_lo=True, include_hi=False)
                for it in tx.item_ids
            ]
            if not partner_items:
                exclusions["partner_no_pre_purchases"] += 1
                continue
            partner_score = score(partner_items, catalog).value
            if partner_score > config.margin / 2:
                treatment = Treatment.HEALTHY_PARTNER
            elif partner_score < -config.margin / 2:
                treatment = Treatment.UNHEALTHY_PARTNER
            else:
                exclusions["inside_margin_band"] += 1
                continue
            units.append(FocalUnit(
                user_id=user,
                t0=t0,
                partner_id=partner,
                treatment=treatment,
                partner_pre_score=partner_score,
                covariates=_covariates(pre_txs, catalog, config),
                window_days=config.window_days,
                event_count=tie.event_count,
            ))
    units.sort(key=lambda u: (u.user_id, u.t0))
    return Cohort(units=units, exclusions=exclusions)


def unit_to_dict(unit: FocalUnit) -> dict:
    return {
        "user_id": unit.user_id,
        "t0": unit.t0,
        "partner_id": unit.partner_id,
        "treatment": unit.treatment.value,
        "partner_pre_score": unit.partner_pre_score,
        "covariates": {
            "preferred_shop": unit.covariates.preferred_shop,
            "pct_lunchtime": unit.covariates.pct_lunchtime,
            "pct_meals": unit.covariates.pct_meals,
            "pre_health": unit.covariates.pre_health,
            "weekly_tx": unit.covariates.weekly_tx,
        },
        "window_days": unit.window_days,
        "event_count": unit.event_count,
    }


def unit_from_dict(d: dict) -> FocalUnit:
    cov = d["covariates"]
    return FocalUnit(
        user_id=d["user_id"],
        t0=int(d["t0"]),
        partner_id=d["partner_id"],
        treatment=Treatment(d["treatment"]),
        partner_pre_score=float(d["partner_pre_score"]),
        covariates=CovariateVector(
            preferred_shop=cov["preferred_shop"],
            pct_lunchtime=float(cov["pct_lunchtime"]),
            pct_meals=float(cov["pct_meals"]),
            pre_health=float(cov["pre_health"]),
            weekly_tx=float(cov["weekly_tx"]),
        ),
        window_days=int(d["window_days"]),
        event_count=int(d["event_count"]),
    )
