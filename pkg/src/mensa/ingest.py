"""Parsing, validation and indexing of transaction logs and item catalogs.

Input formats
-------------
Transaction log (CSV):
    header ``tx_id,timestamp,user_id,shop_id,register_id,item_ids`` where
    ``item_ids`` is ``;``-separated and an empty ``user_id`` marks a cash
    payment.  JSONL with the same field names (``item_ids`` as a list) is
    accepted as well; the format is chosen by file extension (``.jsonl`` /
    ``.json``) with a content sniff as fallback.

Catalog (CSV):
    header ``item_id,name,category,health_label`` with ``health_label`` in
    {-1, 0, 1}.  Optional leading comment lines starting with ``#`` may
    declare the closed category set as ``# categories: a,b,c``.

Timestamps are UTC seconds; calendar concepts (day, ISO week, lunchtime)
are evaluated in a configurable local timezone, default UTC+1.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

DAY_SECONDS = 86400
DEFAULT_TZ_HOURS = 1.0

LOG_FIELDS = ("tx_id", "timestamp", "user_id", "shop_id", "register_id", "item_ids")
CATALOG_FIELDS = ("item_id", "name", "category", "health_label")


class IngestError(ValueError):
    """Malformed or inconsistent input data."""


def local_datetime(timestamp: int, tz_hours: float = DEFAULT_TZ_HOURS) -> datetime:
    tz = timezone(timedelta(hours=tz_hours))
    return datetime.fromtimestamp(timestamp, tz=tz)


def local_date(timestamp: int, tz_hours: float = DEFAULT_TZ_HOURS) -> date:
    return local_datetime(timestamp, tz_hours).date()


def local_day_number(timestamp: int, tz_hours: float = DEFAULT_TZ_HOURS) -> int:
    """Local calendar day as an epoch-day count (fixed-offset timezone)."""
    return (timestamp + int(tz_hours * 3600)) // DAY_SECONDS


def iso_week(timestamp: int, tz_hours: float = DEFAULT_TZ_HOURS) -> int:
    return local_date(timestamp, tz_hours).isocalendar()[1]


@dataclass(frozen=True, slots=True)
class Transaction:
    tx_id: str
    timestamp: int
    user_id: Optional[str]  # None for cash payments
    shop_id: str
    register_id: str
    item_ids: tuple[str, ...]

    @property
    def is_badge(self) -> bool:
        return self.user_id is not None

    def validate(self) -> None:
        if self.timestamp <= 0:
            raise IngestError(f"transaction {self.tx_id!r}: timestamp must be positive")
        if not self.item_ids:
            raise IngestError(f"transaction {self.tx_id!r}: empty item list")


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    category: str
    health_label: int


class ItemCatalog:
    """Item id -> (name, category, health label in {-1, 0, +1})."""

    def __init__(self, entries: dict[str, CatalogEntry], categories: Iterable[str] | None = None):
        for item_id, entry in entries.items():
            if entry.health_label not in (-1, 0, 1):
                raise IngestError(f"item {item_id!r}: health_label must be -1, 0 or 1")
        self.entries = dict(entries)
        if categories is None:
            categories = {e.category for e in entries.values()}
        self.categories = frozenset(categories)
        unknown = {e.category for e in entries.values()} - self.categories
        if unknown:
            raise IngestError(f"categories outside declared set: {sorted(unknown)}")

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self.entries

    def label(self, item_id: str) -> int:
        """Health label of the item; unknown items count as 0 (unclassifiable)."""
        entry = self.entries.get(item_id)
        return entry.health_label if entry is not None else 0

    def category(self, item_id: str) -> Optional[str]:
        entry = self.entries.get(item_id)
        return entry.category if entry is not None else None


def parse_catalog(path: str | Path) -> ItemCatalog:
    path = Path(path)
    declared: Optional[list[str]] = None
    entries: dict[str, CatalogEntry] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        rows = []
        for raw in fh:
            if raw.startswith("#"):
                body = raw[1:].strip()
                if body.lower().startswith("categories:"):
                    declared = [c.strip() for c in body.split(":", 1)[1].split(",") if c.strip()]
                continue
            rows.append(raw)
        reader = csv.reader(rows)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CATALOG_FIELDS:
            raise IngestError(f"catalog {path}: expected header {','.join(CATALOG_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise IngestError(f"catalog {path} row {lineno}: expected 4 fields, got {len(row)}")
            item_id, name, category, label_s = (f.strip() for f in row)
            try:
                label = int(label_s)
            except ValueError:
                raise IngestError(f"catalog {path} row {lineno}: bad health_label {label_s!r}") from None
            if label not in (-1, 0, 1):
                raise IngestError(f"catalog {path} row {lineno}: health_label must be -1, 0 or 1")
            if declared is not None and category not in declared:
                raise IngestError(f"catalog {path} row {lineno}: category {category!r} not declared")
            if item_id in entries:
                raise IngestError(f"catalog {path} row {lineno}: duplicate item_id {item_id!r}")
            entries[item_id] = CatalogEntry(name=name, category=category, health_label=label)
    return ItemCatalog(entries, categories=declared)


class LogIndex:
    """Immutable chronological views over a parsed transaction log.

    ``by_user`` holds badge transactions per user; ``by_register_day`` holds
    every transaction (badge and cash) per (shop, register, local calendar
    day) queue.  Safe for concurrent readers once built.
    """

    def __init__(self, transactions: list[Transaction], catalog: ItemCatalog,
                 tz_hours: float = DEFAULT_TZ_HOURS):
        self.tz_hours = tz_hours
        self.transactions = sorted(transactions, key=lambda t: (t.timestamp, t.tx_id))
        seen: set[str] = set()
        unknown_items = 0
        for tx in self.transactions:
            tx.validate()
            if tx.tx_id in seen:
                raise IngestError(f"duplicate tx_id {tx.tx_id!r}")
            seen.add(tx.tx_id)
            unknown_items += sum(1 for it in tx.item_ids if it not in catalog)

        self.by_user: dict[str, list[Transaction]] = {}
        self.by_register_day: dict[tuple[str, str, int], list[Transaction]] = {}
        tz_offset = int(tz_hours * 3600)
        for tx in self.transactions:
            if tx.user_id is not None:
                self.by_user.setdefault(tx.user_id, []).append(tx)
            day = (tx.timestamp + tz_offset) // DAY_SECONDS
            self.by_register_day.setdefault((tx.shop_id, tx.register_id, day), []).append(tx)

        self._user_ts = {u: np.array([t.timestamp for t in txs], dtype=np.int64)
                         for u, txs in self.by_user.items()}
        self.warnings = {"unknown_items": unknown_items}

    def __len__(self) -> int:
        return len(self.transactions)

    @property
    def n_badge(self) -> int:
        return sum(len(v) for v in self.by_user.values())

    def user_window(self, user_id: str, lo: int, hi: int, *,
                    include_lo: bool = True, include_hi: bool = False) -> list[Transaction]:
        """Badge transactions of ``user_id`` with timestamp in the given interval."""
        txs = self.by_user.get(user_id)
        if not txs:
            return []
        ts = self._user_ts[user_id]
        left = int(np.searchsorted(ts, lo, side="left" if include_lo else "right"))
        right = int(np.searchsorted(ts, hi, side="right" if include_hi else "left"))
        return txs[left:right]


def _sniff_jsonl(path: Path) -> bool:
    if path.suffix.lower() in (".jsonl", ".json"):
        return True
    with path.open(encoding="utf-8") as fh:
        first = fh.readline().lstrip()
    return first.startswith("{")


def _row_to_transaction(fields: dict, where: str) -> Transaction:
    try:
        raw_ts = fields["timestamp"]
        ts = int(raw_ts)
    except (KeyError, TypeError, ValueError):
        raise IngestError(f"{where}: bad timestamp {fields.get('timestamp')!r}") from None
    user = fields.get("user_id")
    if user in ("", None):
        user = None
    items = fields["item_ids"]
    if isinstance(items, str):
        items = tuple(i for i in items.split(";") if i)
    else:
        items = tuple(str(i) for i in items)
    tx = Transaction(
        tx_id=str(fields["tx_id"]),
        timestamp=ts,
        user_id=user,
        shop_id=str(fields["shop_id"]),
        register_id=str(fields["register_id"]),
        item_ids=items,
    )
    if not tx.tx_id:
        raise IngestError(f"{where}: empty tx_id")
    if tx.timestamp <= 0:
        raise IngestError(f"{where}: timestamp must be positive")
    if not tx.item_ids:
        raise IngestError(f"{where}: empty item list")
    return tx


def parse_log(path: str | Path, catalog: ItemCatalog,
              tz_hours: float = DEFAULT_TZ_HOURS) -> LogIndex:
    """Parse a transaction log file into a :class:`LogIndex`.

    Rows referencing unknown item ids are kept (their labels read as 0) and
    tallied in ``index.warnings``; structurally malformed rows and duplicate
    transaction ids raise :class:`IngestError` with the row number.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"log file not found: {path}")
    transactions: list[Transaction] = []
    if _sniff_jsonl(path):
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError:
                    raise IngestError(f"{path} row {lineno}: invalid JSON") from None
                missing = [f for f in LOG_FIELDS if f not in obj]
                if missing:
                    raise IngestError(f"{path} row {lineno}: missing fields {missing}")
                transactions.append(_row_to_transaction(obj, f"{path} row {lineno}"))
    else:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != LOG_FIELDS:
                raise IngestError(f"{path}: expected header {','.join(LOG_FIELDS)}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(LOG_FIELDS):
                    raise IngestError(
                        f"{path} row {lineno}: expected {len(LOG_FIELDS)} fields, got {len(row)}")
                transactions.append(
                    _row_to_transaction(dict(zip(LOG_FIELDS, row)), f"{path} row {lineno}"))
    return LogIndex(transactions, catalog, tz_hours=tz_hours)


def write_log(transactions: Iterable[Transaction], path: str | Path) -> None:
    """Write transactions in the canonical CSV schema, sorted for determinism."""
    path = Path(path)
    rows = sorted(transactions, key=lambda t: (t.timestamp, t.tx_id))
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for tx in rows:
            writer.writerow([
                tx.tx_id, tx.timestamp, tx.user_id or "",
                tx.shop_id, tx.register_id, ";".join(tx.item_ids),
            ])


def write_catalog(catalog: ItemCatalog, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write("# categories: " + ",".join(sorted(catalog.categories)) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CATALOG_FIELDS)
        for item_id in sorted(catalog.entries):
            e = catalog.entries[item_id]
            writer.writerow([item_id, e.name, e.category, e.health_label])


def descriptive_report(index: LogIndex, catalog: ItemCatalog) -> dict:
    """Purchase descriptives: per-category counts, weekly transaction volume
    and the daily fraction of unhealthy items."""
    category_counts: dict[str, int] = {}
    weekly: dict[int, int] = {}
    daily_items: dict[str, int] = {}
    daily_unhealthy: dict[str, int] = {}
    n_items = 0
    for tx in index.transactions:
        week = iso_week(tx.timestamp, index.tz_hours)
        weekly[week] = weekly.get(week, 0) + 1
        day = local_date(tx.timestamp, index.tz_hours).isoformat()
        for item in tx.item_ids:
            n_items += 1
            cat = catalog.category(item) or "unknown"
            category_counts[cat] = category_counts.get(cat, 0) + 1
            daily_items[day] = daily_items.get(day, 0) + 1
            if catalog.label(item) == -1:
                daily_unhealthy[day] = daily_unhealthy.get(day, 0) + 1
    return {
        "schema": 1,
        "n_transactions": len(index),
        "n_badge_transactions": index.n_badge,
        "n_items": n_items,
        "warnings": dict(index.warnings),
        "category_counts": dict(sorted(category_counts.items())),
        "weekly_tx": {str(w): c for w, c in sorted(weekly.items())},
        "daily_unhealthy_fraction": {
            d: daily_unhealthy.get(d, 0) / daily_items[d] for d in sorted(daily_items)
        },
    }
