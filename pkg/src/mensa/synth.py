"""Synthetic transaction logs with known ground truth.

World model
-----------
Every user carries a latent preference theta in [-1, 1].  Within the
non-neutral item share, a purchased item is healthy with probability
(1 + theta) / 2, so the expected item score at preference theta is
(1 - neutral_share) * theta.  Planted tie pairs co-visit a register within
60 seconds on ``covisits_per_pair`` distinct days, the first of which is
the onset.  After onset both endpoints drift linearly toward the partner's
pre-onset preference:

    theta(t) = theta0 + influence * ((t - t0) / 183 days) * (theta_partner - theta0)

Tied users draw theta as sign * magnitude with magnitude from
``preference_levels``; partner signs agree with probability
(1 + homophily) / 2, which plants the homophily confound the matched
design must remove.

Implied effect
--------------
Averaged over a post window of W days with roughly uniform purchase times,
a unit's post-minus-pre score drift is
(1 - neutral_share) * influence * (W / 183) / 2 * (theta_partner - theta0).
Across matched arms the own-theta terms cancel and the partner targets
differ by 2 * mean(preference_levels), hence

    delta = influence * (1 - neutral_share) * mean(preference_levels) * W / 183

which :func:`implied_delta` returns (``window fraction`` = W / 183).
With influence = 0 this is the null world.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from mensa.ingest import DAY_SECONDS, CatalogEntry, ItemCatalog, Transaction

DRIFT_REFERENCE_DAYS = 183.0
_DAY_OPEN_HOUR = 7.0
_DAY_CLOSE_HOUR = 20.0


class SynthConfigError(ValueError):
    """Infeasible generator configuration."""


@dataclass(frozen=True)
class CategorySpec:
    name: str
    health_label: int
    popularity: float


DEFAULT_CATALOG: tuple[CategorySpec, ...] = (
    CategorySpec("coffee", 1, 0.30),
    CategorySpec("meal", 1, 0.25),
    CategorySpec("fruit", 1, 0.07),
    CategorySpec("salad", 1, 0.06),
    CategorySpec("soup", 1, 0.05),
    CategorySpec("tea", 1, 0.04),
    CategorySpec("wrap", 1, 0.03),
    CategorySpec("soft_drink", -1, 0.08),
    CategorySpec("pizza", -1, 0.06),
    CategorySpec("dessert", -1, 0.06),
    CategorySpec("kebab", -1, 0.04),
    CategorySpec("crepe", -1, 0.03),
    CategorySpec("condiment", -1, 0.02),
    CategorySpec("snack_bar", 0, 0.05),
)


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 400
    n_days: int = 540
    seed: int = 0
    n_ties: int = 120
    homophily: float = 0.6      # >= 0; probability of same-sign partners is (1+h)/2
    influence: float = 0.15     # kappa: preference drift per 183 days per unit gap
    lunch_share: float = 0.6
    semester_calendar: tuple[tuple[int, int], ...] = ((42, 160), (245, 364), (407, 525))
    break_volume_factor: float = 0.45
    onset_burst_week: int = 38  # ISO week attracting extra onsets
    burst_share: float = 0.5
    covisits_per_pair: int = 15
    tx_per_day: float = 0.7
    cash_share: float = 0.05
    items_per_tx_max: int = 3
    n_shops: int = 4
    registers_per_shop: int = 4
    preference_levels: tuple[float, ...] = (0.2, 0.8)
    neutral_share: float = 0.05
    onset_margin_days: int = 183
    base_date: str = "2015-01-05"
    tz_hours: float = 1.0
    catalog_spec: tuple[CategorySpec, ...] = DEFAULT_CATALOG

    def __post_init__(self):
        if self.n_users < 2:
            raise SynthConfigError("n_users must be at least 2")
        if 2 * self.n_ties > self.n_users:
            raise SynthConfigError("n_ties cannot exceed n_users / 2")
        if self.homophily < 0:
            raise SynthConfigError("homophily must be non-negative")
        for frac_name in ("lunch_share", "break_volume_factor", "burst_share",
                          "cash_share", "neutral_share"):
            v = getattr(self, frac_name)
            if not 0.0 <= v <= 1.0:
                raise SynthConfigError(f"{frac_name} must be in [0, 1]")
        if self.covisits_per_pair < 1:
            raise SynthConfigError("covisits_per_pair must be at least 1")
        if not any(c.health_label == 1 for c in self.catalog_spec) or \
                not any(c.health_label == -1 for c in self.catalog_spec):
            raise SynthConfigError("catalog_spec needs healthy and unhealthy categories")
        if self.neutral_share > 0 and not any(c.health_label == 0 for c in self.catalog_spec):
            raise SynthConfigError("neutral_share > 0 needs a neutral category")

    def catalog(self) -> ItemCatalog:
        entries = {
            f"it_{c.name}": CatalogEntry(name=c.name, category=c.name,
                                         health_label=c.health_label)
            for c in self.catalog_spec
        }
        return ItemCatalog(entries, categories=[c.name for c in self.catalog_spec])


@dataclass(frozen=True)
class PlantedTie:
    user_a: str
    user_b: str
    onset_day: int
    onset_timestamp: int
    covisits: int


@dataclass
class GroundTruth:
    """Written separately from the log so the pipeline under test cannot read it."""
    seed: int
    implied_delta: float
    ties: list[PlantedTie]
    theta0: dict[str, float]
    partner_target: dict[str, float]  # tied user -> partner's pre-onset theta
    onset_day: dict[str, int]
    config: dict

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "seed": self.seed,
            "implied_delta": self.implied_delta,
            "ties": [asdict(t) for t in self.ties],
            "theta0": self.theta0,
            "partner_target": self.partner_target,
            "onset_day": self.onset_day,
            "config": self.config,
        }


def config_to_dict(config: SynthConfig) -> dict:
    d = asdict(config)
    d["semester_calendar"] = [list(x) for x in config.semester_calendar]
    d["preference_levels"] = list(config.preference_levels)
    d["catalog_spec"] = [asdict(c) for c in config.catalog_spec]
    return d


def config_from_dict(d: dict) -> SynthConfig:
    d = dict(d)
    if "semester_calendar" in d:
        d["semester_calendar"] = tuple(tuple(x) for x in d["semester_calendar"])
    if "preference_levels" in d:
        d["preference_levels"] = tuple(d["preference_levels"])
    if "catalog_spec" in d:
        d["catalog_spec"] = tuple(CategorySpec(**c) for c in d["catalog_spec"])
    return SynthConfig(**d)


def implied_delta(config: SynthConfig, window_days: int = 183) -> float:
    """Closed-form expected interaction effect; see the module docstring."""
    mean_level = float(np.mean(config.preference_levels))
    return (config.influence * (1.0 - config.neutral_share) * mean_level
            * window_days / DRIFT_REFERENCE_DAYS)


def _day_starts(config: SynthConfig) -> np.ndarray:
    base = date.fromisoformat(config.base_date)
    tz = timezone(timedelta(hours=config.tz_hours))
    first = datetime(base.year, base.month, base.day, tzinfo=tz).timestamp()
    return (int(first) + DAY_SECONDS * np.arange(config.n_days)).astype(np.int64)


def _season_factor(config: SynthConfig) -> np.ndarray:
    factor = np.full(config.n_days, config.break_volume_factor)
    for start, end in config.semester_calendar:
        factor[max(start, 0):min(end + 1, config.n_days)] = 1.0
    return factor


def _burst_days(config: SynthConfig, lo: int, hi: int) -> np.ndarray:
    base = date.fromisoformat(config.base_date)
    days = np.arange(lo, hi + 1)
    weeks = np.array([(base + timedelta(days=int(d))).isocalendar()[1] for d in days])
    return days[weeks == config.onset_burst_week]


def _time_of_day(rng: np.random.Generator, n: int, lunch_share: float) -> np.ndarray:
    """Seconds past local midnight: lunch window 11-14h, otherwise 7-11h or 14-20h."""
    lunch = rng.random(n) < lunch_share
    tod = np.empty(n)
    tod[lunch] = (11.0 + 3.0 * rng.random(int(lunch.sum()))) * 3600
    other = (~lunch).sum()
    v = rng.random(other) * 9.0  # 4 morning hours + 5 afternoon hours
    tod[~lunch] = np.where(v < 4.0, (_DAY_OPEN_HOUR + v) * 3600, (14.0 + (v - 4.0)) * 3600)
    return tod.astype(np.int64)


class _ItemSampler:
    def __init__(self, config: SynthConfig):
        by_label: dict[int, list[CategorySpec]] = {1: [], -1: [], 0: []}
        for c in config.catalog_spec:
            by_label[c.health_label].append(c)
        self.ids: dict[int, np.ndarray] = {}
        self.cum: dict[int, np.ndarray] = {}
        for label, cats in by_label.items():
            if not cats:
                continue
            pop = np.array([c.popularity for c in cats], dtype=float)
            self.ids[label] = np.array([f"it_{c.name}" for c in cats])
            self.cum[label] = np.cumsum(pop / pop.sum())
        self.neutral_share = config.neutral_share

    def draw(self, rng: np.random.Generator, theta_per_item: np.ndarray) -> np.ndarray:
        n = len(theta_per_item)
        label = np.where(rng.random(n) < (1.0 + theta_per_item) / 2.0, 1, -1)
        if self.neutral_share > 0:
            label[rng.random(n) < self.neutral_share] = 0
        out = np.empty(n, dtype=object)
        for lab in (1, -1, 0):
            mask = label == lab
            if not mask.any():
                continue
            picks = np.searchsorted(self.cum[lab], rng.random(int(mask.sum())))
            out[mask] = self.ids[lab][picks]
        return out


# generation-time record: (timestamp, user_idx, seq, shop, register, items, cash)
_TxRecord = tuple[int, int, int, str, str, tuple[str, ...], bool]


def _theta_path(theta0: float, target: Optional[float], onset_day: Optional[int],
                influence: float, n_days: int) -> np.ndarray:
    path = np.full(n_days, theta0)
    if target is not None and onset_day is not None and influence != 0.0:
        days = np.arange(n_days)
        progress = np.clip((days - onset_day) / DRIFT_REFERENCE_DAYS, 0.0, None)
        path = theta0 + influence * progress * (target - theta0)
    return np.clip(path, -1.0, 1.0)


def generate(config: SynthConfig) -> tuple[list[Transaction], GroundTruth]:
    """Build the full transaction list (canonically ordered) and its ground truth."""
    n_users = config.n_users
    seeds = np.random.SeedSequence(config.seed).spawn(1 + n_users + config.n_ties)
    structure_rng = np.random.default_rng(seeds[0])
    day_starts = _day_starts(config)
    season = _season_factor(config)
    sampler = _ItemSampler(config)

    shops = [f"s{i:02d}" for i in range(config.n_shops)]
    registers = {s: [f"r{i}" for i in range(config.registers_per_shop)] for s in shops}
    user_ids = [f"u{i:05d}" for i in range(n_users)]
    preferred = structure_rng.integers(0, config.n_shops, size=n_users)

    # latent preferences: tied users get sign * two-point magnitude with
    # homophily-correlated signs; background users are uniform
    levels = np.asarray(config.preference_levels)
    theta0 = structure_rng.uniform(-levels.max(), levels.max(), size=n_users)
    tied = structure_rng.permutation(n_users)[: 2 * config.n_ties]
    same_sign_p = min((1.0 + config.homophily) / 2.0, 0.98)
    partner_target: dict[str, float] = {}
    onset_day_by_user: dict[str, int] = {}

    lo, hi = config.onset_margin_days, config.n_days - config.onset_margin_days - 1
    if hi < lo:
        raise SynthConfigError("n_days too short for the onset margin")
    if config.n_days - lo - 1 < config.covisits_per_pair:
        raise SynthConfigError("not enough post-onset days for the requested co-visits")
    burst_days = _burst_days(config, lo, hi)
    if config.burst_share > 0 and len(burst_days) == 0:
        raise SynthConfigError(
            f"onset_burst_week {config.onset_burst_week} outside the eligible calendar")

    planted: list[PlantedTie] = []
    pair_members: list[tuple[int, int]] = []
    for k in range(config.n_ties):
        a, b = int(tied[2 * k]), int(tied[2 * k + 1])
        sign_a = 1.0 if structure_rng.random() < 0.5 else -1.0
        sign_b = sign_a if structure_rng.random() < same_sign_p else -sign_a
        theta0[a] = sign_a * structure_rng.choice(levels)
        theta0[b] = sign_b * structure_rng.choice(levels)
        if config.burst_share > 0 and structure_rng.random() < config.burst_share:
            onset_day = int(structure_rng.choice(burst_days))
        else:
            onset_day = int(structure_rng.integers(lo, hi + 1))
        pair_members.append((a, b))
        partner_target[user_ids[a]] = float(theta0[b])
        partner_target[user_ids[b]] = float(theta0[a])
        onset_day_by_user[user_ids[a]] = onset_day
        onset_day_by_user[user_ids[b]] = onset_day

    records: list[_TxRecord] = []
    seq_counter: dict[int, int] = {}

    def emit(user_idx: int, ts_array, shop_arr, reg_arr, items_list, cash_arr):
        seq = seq_counter.get(user_idx, 0)
        for ts, shop, reg, items, cash in zip(ts_array, shop_arr, reg_arr,
                                              items_list, cash_arr):
            records.append((int(ts), user_idx, seq, shop, reg, tuple(items), bool(cash)))
            seq += 1
        seq_counter[user_idx] = seq

    theta_paths: dict[int, np.ndarray] = {}
    for uidx in range(n_users):
        uid = user_ids[uidx]
        theta_paths[uidx] = _theta_path(
            float(theta0[uidx]), partner_target.get(uid), onset_day_by_user.get(uid),
            config.influence, config.n_days)

    # daily purchase streams, one independent substream per user
    for uidx in range(n_users):
        rng = np.random.default_rng(seeds[1 + uidx])
        counts = rng.poisson(config.tx_per_day * season)
        n_tx = int(counts.sum())
        if n_tx == 0:
            continue
        days = np.repeat(np.arange(config.n_days), counts)
        ts = day_starts[days] + _time_of_day(rng, n_tx, config.lunch_share)
        shop = shops[int(preferred[uidx])]
        regs = registers[shop]
        reg_idx = rng.integers(0, len(regs), size=n_tx)
        cash = rng.random(n_tx) < config.cash_share
        n_items = rng.integers(1, config.items_per_tx_max + 1, size=n_tx)
        theta_per_item = np.repeat(theta_paths[uidx][days], n_items)
        all_items = sampler.draw(rng, theta_per_item)
        split = np.cumsum(n_items)[:-1]
        items_list = np.split(all_items, split)
        emit(uidx, ts, [shop] * n_tx, [regs[i] for i in reg_idx], items_list, cash)

    # planted co-visits: adjacent badge transactions within 60 s
    for k, (a, b) in enumerate(pair_members):
        rng = np.random.default_rng(seeds[1 + n_users + k])
        onset_day = onset_day_by_user[user_ids[a]]
        later = np.arange(onset_day + 1, config.n_days)
        extra = rng.choice(later, size=config.covisits_per_pair - 1, replace=False)
        visit_days = np.concatenate([[onset_day], np.sort(extra)])
        shop = shops[int(preferred[a])]
        regs = registers[shop]
        onset_ts = None
        for d in visit_days:
            tod = int(_time_of_day(rng, 1, config.lunch_share)[0])
            ts_a = int(day_starts[d]) + tod
            ts_b = ts_a + int(rng.integers(5, 31))
            reg = regs[int(rng.integers(0, len(regs)))]
            for uidx, ts in ((a, ts_a), (b, ts_b)):
                n_items = int(rng.integers(1, config.items_per_tx_max + 1))
                items = sampler.draw(rng, np.full(n_items, theta_paths[uidx][d]))
                emit(uidx, [ts], [shop], [reg], [items], [False])
            if onset_ts is None:
                onset_ts = ts_a
        ua, ub = sorted((user_ids[a], user_ids[b]))
        planted.append(PlantedTie(user_a=ua, user_b=ub, onset_day=int(onset_day),
                                  onset_timestamp=int(onset_ts),
                                  covisits=config.covisits_per_pair))

    records.sort(key=lambda r: r[:3])
    transactions = [
        Transaction(
            tx_id=f"t{i:07d}",
            timestamp=ts,
            user_id=None if cash else user_ids[uidx],
            shop_id=shop,
            register_id=reg,
            item_ids=items,
        )
        for i, (ts, uidx, _seq, shop, reg, items, cash) in enumerate(records)
    ]
    truth = GroundTruth(
        seed=config.seed,
        implied_delta=implied_delta(config),
        ties=sorted(planted, key=lambda t: (t.user_a, t.user_b)),
        theta0={user_ids[i]: float(theta0[i]) for i in range(n_users)},
        partner_target=partner_target,
        onset_day=onset_day_by_user,
        config=config_to_dict(config),
    )
    return transactions, truth


def write_truth(truth: GroundTruth, path: str | Path) -> None:
    Path(path).write_text(json.dumps(truth.to_dict(), sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")


def load_truth(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_groups(truth: GroundTruth, path: str | Path) -> None:
    """Planted pairs as group labels, for tie-precision evaluation."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user_id", "group_id"])
        for k, tie in enumerate(truth.ties):
            writer.writerow([tie.user_a, f"g{k:04d}"])
            writer.writerow([tie.user_b, f"g{k:04d}"])


def generate_files(config: SynthConfig, log_path: str | Path, truth_path: str | Path,
                   catalog_path: Optional[str | Path] = None,
                   groups_path: Optional[str | Path] = None) -> GroundTruth:
    from mensa.ingest import write_catalog, write_log

    transactions, truth = generate(config)
    write_log(transactions, log_path)
    write_truth(truth, truth_path)
    if catalog_path is not None:
        write_catalog(config.catalog(), catalog_path)
    if groups_path is not None:
        write_groups(truth, groups_path)
    return truth
