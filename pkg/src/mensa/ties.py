"""Co-eating tie inference from queue proximity in transaction logs.

Two badge transactions count as a proximity event when they are strictly
adjacent in the same (shop, register, local day) queue — no transaction of
any payment type between them — made by distinct users at most
``proximity_window`` seconds apart (inclusive).  A pair accumulating at
least ``tie_threshold`` events forms a tie whose onset is the first event.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional

from mensa.ingest import LogIndex, iso_week


@dataclass(frozen=True)
class ProximityEvent:
    user_a: str  # lexicographically smaller of the pair
    user_b: str
    timestamp: int  # timestamp of the earlier transaction of the pair
    shop_id: str
    register_id: str


@dataclass(frozen=True)
class Tie:
    user_a: str
    user_b: str
    event_count: int
    onset_timestamp: int
    events: tuple[ProximityEvent, ...]

    @property
    def pair(self) -> tuple[str, str]:
        return (self.user_a, self.user_b)


def detect_proximity(index: LogIndex, proximity_window: int = 60) -> list[ProximityEvent]:
    """Scan every register-day queue for adjacent same-window badge pairs."""
    if proximity_window <= 0:
        raise ValueError("proximity_window must be positive")
    events: list[ProximityEvent] = []
    for (shop, register, _day), queue in index.by_register_day.items():
        for first, second in zip(queue, queue[1:]):
            if not (first.is_badge and second.is_badge):
                continue
            if first.user_id == second.user_id:
                continue
            if second.timestamp - first.timestamp > proximity_window:
                continue
            a, b = sorted((first.user_id, second.user_id))
            events.append(ProximityEvent(
                user_a=a, user_b=b, timestamp=first.timestamp,
                shop_id=shop, register_id=register,
            ))
    events.sort(key=lambda e: (e.timestamp, e.user_a, e.user_b))
    return events


def infer_ties(events: Iterable[ProximityEvent], tie_threshold: int = 10) -> list[Tie]:
    if tie_threshold < 1:
        raise ValueError("tie_threshold must be at least 1")
    by_pair: dict[tuple[str, str], list[ProximityEvent]] = {}
    for ev in events:
        by_pair.setdefault((ev.user_a, ev.user_b), []).append(ev)
    ties = []
    for (a, b), evs in sorted(by_pair.items()):
        if len(evs) < tie_threshold:
            continue
        evs = sorted(evs, key=lambda e: e.timestamp)
        ties.append(Tie(
            user_a=a, user_b=b, event_count=len(evs),
            onset_timestamp=evs[0].timestamp, events=tuple(evs),
        ))
    ties.sort(key=lambda t: (t.onset_timestamp, t.user_a, t.user_b))
    return ties


def onset_seasonality(ties: Iterable[Tie], index: LogIndex) -> dict:
    """Weekly onset histogram plus onset share / purchase share per ISO week."""
    onset_weekly: dict[int, int] = {}
    for tie in ties:
        week = iso_week(tie.onset_timestamp, index.tz_hours)
        onset_weekly[week] = onset_weekly.get(week, 0) + 1
    purchase_weekly: dict[int, int] = {}
    for tx in index.transactions:
        week = iso_week(tx.timestamp, index.tz_hours)
        purchase_weekly[week] = purchase_weekly.get(week, 0) + 1
    n_onsets = sum(onset_weekly.values())
    n_purchases = sum(purchase_weekly.values())
    ratio: dict[int, float] = {}
    if n_onsets and n_purchases:
        for week, p_count in purchase_weekly.items():
            onset_share = onset_weekly.get(week, 0) / n_onsets
            purchase_share = p_count / n_purchases
            ratio[week] = onset_share / purchase_share
    return {
        "schema": 1,
        "n_onsets": n_onsets,
        "onset_weekly": {str(w): c for w, c in sorted(onset_weekly.items())},
        "purchase_weekly": {str(w): c for w, c in sorted(purchase_weekly.items())},
        "onset_to_purchase_ratio": {str(w): r for w, r in sorted(ratio.items())},
    }


@dataclass(frozen=True)
class TiePrecision:
    """Precision of inferred ties against external group labels.

    ``precision`` is ``None`` when no tie had both endpoints covered by the
    group map ("no coverage"), which is distinct from a measured 0.0.
    """
    n_scored: int
    n_same_group: int

    @property
    def covered(self) -> bool:
        return self.n_scored > 0

    @property
    def precision(self) -> Optional[float]:
        if not self.covered:
            return None
        return self.n_same_group / self.n_scored


def evaluate_ties(ties: Iterable[Tie], groups: Mapping[str, str]) -> TiePrecision:
    n_scored = 0
    n_same = 0
    for tie in ties:
        if tie.user_a in groups and tie.user_b in groups:
            n_scored += 1
            if groups[tie.user_a] == groups[tie.user_b]:
                n_same += 1
    return TiePrecision(n_scored=n_scored, n_same_group=n_same)


def write_ties_csv(ties: Iterable[Tie], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user_a", "user_b", "event_count", "onset_timestamp"])
        for tie in ties:
            writer.writerow([tie.user_a, tie.user_b, tie.event_count, tie.onset_timestamp])


def read_groups_csv(path: str | Path) -> dict[str, str]:
    groups: dict[str, str] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ("user_id", "group_id"):
            raise ValueError(f"{path}: expected header user_id,group_id")
        for row in reader:
            if row:
                groups[row[0]] = row[1]
    return groups
