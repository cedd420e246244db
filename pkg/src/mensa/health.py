"""Healthiness scoring of purchase sets.

A purchase set's score is the mean of per-item labels (+1 healthy,
-1 unhealthy, 0 unclassifiable), so it always lies in [-1, +1].
Unclassifiable and unknown items stay in the denominator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from mensa.ingest import ItemCatalog


class NoPurchasesError(ValueError):
    """Raised when asked to score an empty purchase set; scores are never fabricated."""


@dataclass(frozen=True)
class HealthScore:
    value: float
    n_items: int


def score(item_ids: Iterable[str], catalog: ItemCatalog) -> HealthScore:
    items = list(item_ids)
    if not items:
        raise NoPurchasesError("cannot score an empty purchase set")
    total = sum(catalog.label(it) for it in items)
    return HealthScore(value=total / len(items), n_items=len(items))
