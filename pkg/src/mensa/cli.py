"""Command-line pipeline: subcommands over shared JSON config and artifacts.

Each stage writes versioned JSON (plus flat CSV series for plotting) into
the output directory and later stages read those artifacts back, so stages
can run separately or chained via ``run-all``.  All randomness is seeded
and reports embed the resolved config, making reruns byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import mensa
from mensa import estimation, matching, propensity, sensitivity, synth, ties
from mensa.cohort import Cohort, CohortConfig, build_focal_units, unit_from_dict, unit_to_dict
from mensa.ingest import descriptive_report, parse_catalog, parse_log
from mensa.matching import MatchedPair

ENV_OUTPUT_DIR = "MENSA_OUTPUT_DIR"


class CliError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    log: Optional[str] = None
    catalog: Optional[str] = None
    output_dir: str = "mensa_out"
    tz_hours: float = 1.0
    proximity_window: int = 60
    tie_threshold: int = 10
    window_days: int = 183
    margin: float = 0.1
    lunch_start_hour: float = 11.0
    lunch_end_hour: float = 14.0
    min_pre_tx: int = 10
    model_kind: str = "logistic"
    caliper: float = 0.1
    seed: int = 0
    bootstrap: int = 2000
    horizons: tuple[int, ...] = (91, 183, 366)
    dose_bins: int = 4
    alpha: float = 0.05
    gamma_step: float = 0.01
    threads: int = 1
    synth: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: Optional[str]) -> "PipelineConfig":
        if path is None:
            return cls()
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        if "horizons" in raw:
            raw["horizons"] = tuple(raw["horizons"])
        return cls(**raw)

    def resolved(self) -> dict:
        d = asdict(self)
        d["horizons"] = list(self.horizons)
        return d

    def cohort_config(self) -> CohortConfig:
        return CohortConfig(
            window_days=self.window_days, margin=self.margin,
            lunch_start_hour=self.lunch_start_hour, lunch_end_hour=self.lunch_end_hour,
            min_pre_tx=self.min_pre_tx, tz_hours=self.tz_hours,
        )

    def synth_config(self) -> synth.SynthConfig:
        overrides = dict(self.synth)
        overrides.setdefault("seed", self.seed)
        overrides.setdefault("tz_hours", self.tz_hours)
        return synth.config_from_dict(overrides)


def _apply_overrides(config: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    updates = {}
    for flag, key in (("log", "log"), ("catalog", "catalog"), ("out", "output_dir"),
                      ("seed", "seed"), ("caliper", "caliper"), ("margin", "margin"),
                      ("window_days", "window_days"), ("tie_threshold", "tie_threshold"),
                      ("bootstrap", "bootstrap"), ("threads", "threads"),
                      ("model", "model_kind")):
        value = getattr(args, flag, None)
        if value is not None:
            updates[key] = value
    env_out = os.environ.get(ENV_OUTPUT_DIR)
    if env_out:
        updates["output_dir"] = env_out
    config = replace(config, **updates)
    if config.threads < 1:
        raise CliError("--threads must be at least 1")
    return config


def _out_dir(config: PipelineConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _report_payload(config: PipelineConfig, body: dict) -> dict:
    return {
        "schema": 1,
        "tool": {"name": "mensa", "version": mensa.__version__},
        "config": config.resolved(),
        **body,
    }


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _read_json(path: Path, producer: str) -> dict:
    if not path.exists():
        raise CliError(f"missing artifact {path}; run 'mensa {producer}' first")
    return json.loads(path.read_text(encoding="utf-8"))


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _require_inputs(config: PipelineConfig) -> tuple[Path, Path]:
    if not config.log or not config.catalog:
        raise CliError("log and catalog paths are required (config file or --log/--catalog)")
    log, cat = Path(config.log), Path(config.catalog)
    if not log.exists():
        raise CliError(f"log file not found: {log}")
    if not cat.exists():
        raise CliError(f"catalog file not found: {cat}")
    return log, cat


def _load_indexed(config: PipelineConfig):
    log, cat = _require_inputs(config)
    catalog = parse_catalog(cat)
    index = parse_log(log, catalog, tz_hours=config.tz_hours)
    return index, catalog


# ---------------------------------------------------------------------------
# stages

def stage_simulate(config: PipelineConfig) -> dict:
    out = _out_dir(config)
    scfg = config.synth_config()
    truth = synth.generate_files(
        scfg,
        log_path=out / "log.csv",
        truth_path=out / "truth.json",
        catalog_path=out / "catalog.csv",
        groups_path=out / "groups.csv",
    )
    body = {
        "simulate": {
            "n_planted_ties": len(truth.ties),
            "implied_delta": truth.implied_delta,
            "log": str(out / "log.csv"),
            "catalog": str(out / "catalog.csv"),
        }
    }
    _write_json(out / "simulate.json", _report_payload(config, body))
    return body


def stage_ingest_report(config: PipelineConfig) -> dict:
    out = _out_dir(config)
    index, catalog = _load_indexed(config)
    report = descriptive_report(index, catalog)
    _write_json(out / "ingest_report.json", _report_payload(config, {"ingest": report}))
    return {"ingest": report}


def stage_infer_ties(config: PipelineConfig) -> dict:
    out = _out_dir(config)
    index, _catalog = _load_indexed(config)
    events = ties.detect_proximity(index, proximity_window=config.proximity_window)
    tie_list = ties.infer_ties(events, tie_threshold=config.tie_threshold)
    ties.write_ties_csv(tie_list, out / "ties.csv")
    seasonality = ties.onset_seasonality(tie_list, index)
    body = {"ties": {"n_events": len(events), "n_ties": len(tie_list),
                     "seasonality": seasonality}}
    _write_json(out / "ties_report.json", _report_payload(config, body))
    return body


def _read_ties_csv(path: Path) -> list[ties.Tie]:
    out: list[ties.Tie] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append(ties.Tie(
                user_a=row["user_a"], user_b=row["user_b"],
                event_count=int(row["event_count"]),
                onset_timestamp=int(row["onset_timestamp"]), events=(),
            ))
    return out


def stage_build_cohort(config: PipelineConfig) -> dict:
    out = _out_dir(config)
    ties_path = out / "ties.csv"
    if not ties_path.exists():
        raise CliError(f"missing artifact {ties_path}; run 'mensa infer-ties' first")
    index, catalog = _load_indexed(config)
    tie_list = _read_ties_csv(ties_path)
    cohort = build_focal_units(index, tie_list, catalog, config.cohort_config())
    payload = _report_payload(config, {
        "cohort": {
            "n_units": len(cohort.units),
            "exclusions": cohort.exclusions,
            "units": [unit_to_dict(u) for u in cohort.units],
        }
    })
    _write_json(out / "cohort.json", payload)
    return {"cohort": {"n_units": len(cohort.units), "exclusions": cohort.exclusions}}


def _load_cohort(out: Path) -> Cohort:
    doc = _read_json(out / "cohort.json", "build-cohort")
    units = [unit_from_dict(d) for d in doc["cohort"]["units"]]
    return Cohort(units=units, exclusions=doc["cohort"].get("exclusions", {}))


def stage_match(config: PipelineConfig) -> dict:
    out = _out_dir(config)
    cohort = _load_cohort(out)
    healthy, unhealthy = cohort.by_arm()
    if len(healthy) < 2 or len(unhealthy) < 2:
        raise CliError("need at least 2 focal units per arm to match")
    model = propensity.fit(cohort.units, kind=config.model_kind, seed=config.seed)
    propensity.save_model(model, out / "propensity_model.json")
    scores = propensity.predict_many(model, cohort.units)
    labels = [u.treatment.value == "healthy_partner" for u in cohort.units]
    model_auc = propensity.auc(zip(scores.tolist(), labels))
    importance = propensity.feature_importance(model)

    p_map = {id(u): float(s) for u, s in zip(cohort.units, scores)}
    edges = matching.admissible_edges(
        healthy, unhealthy,
        [p_map[id(u)] for u in healthy], [p_map[id(u)] for u in unhealthy],
        caliper=config.caliper, tz_hours=config.tz_hours,
    )
    pairs = matching.max_weight_matching(edges)
    table = matching.balance(cohort.units, pairs)

    _write_csv(out / "pairs.csv",
               ["healthy_user", "unhealthy_user", "t0_healthy", "t0_unhealthy",
                "propensity_gap", "mahalanobis_d"],
               [[p.healthy_unit.user_id, p.unhealthy_unit.user_id,
                 p.healthy_unit.t0, p.unhealthy_unit.t0,
                 f"{p.propensity_gap:.10g}", f"{p.mahalanobis_d:.10g}"] for p in pairs])
    matched_payload = _report_payload(config, {
        "matched": {
            "n_pairs": len(pairs),
            "n_edges": len(edges),
            "auc": model_auc,
            "feature_importance": [{"feature": n, "importance": v} for n, v in importance],
            "pairs": [{
                "healthy": unit_to_dict(p.healthy_unit),
                "unhealthy": unit_to_dict(p.unhealthy_unit),
                "propensity_gap": p.propensity_gap,
                "mahalanobis_d": p.mahalanobis_d,
            } for p in pairs],
        }
    })
    _write_json(out / "matched.json", matched_payload)
    _write_json(out / "balance.json", _report_payload(config, {"balance": table.to_dict()}))
    return {"matching": {"n_pairs": len(pairs), "auc": model_auc,
                         "balance": table.to_dict(),
                         "feature_importance": [
                             {"feature": n, "importance": v} for n, v in importance]}}


def _load_pairs(out: Path) -> list[MatchedPair]:
    doc = _read_json(out / "matched.json", "match")
    pairs = []
    for p in doc["matched"]["pairs"]:
        pairs.append(MatchedPair(
            healthy_unit=unit_from_dict(p["healthy"]),
            unhealthy_unit=unit_from_dict(p["unhealthy"]),
            propensity_gap=float(p["propensity_gap"]),
            mahalanobis_d=float(p["mahalanobis_d"]),
        ))
    return pairs


def stage_estimate(config: PipelineConfig, counts_file: Optional[str] = None) -> dict:
    out = _out_dir(config)
    if counts_file is not None:
        counts = json.loads(Path(counts_file).read_text(encoding="utf-8"))
        result = estimation.contingency_from_counts(
            both_inc=int(counts["both_increase"]),
            healthy_only_inc=int(counts["healthy_only_increase"]),
            unhealthy_only_inc=int(counts["unhealthy_only_increase"]),
            neither=int(counts["neither_increase"]),
        )
        body = {"estimates": {"contingency": result.to_dict(), "source": "counts_file"}}
        _write_json(out / "estimates.json", _report_payload(config, body))
        return body

    index, catalog = _load_indexed(config)
    pairs = _load_pairs(out)
    if len(pairs) < 2:
        raise CliError("need at least 2 matched pairs to estimate")

    score_spec = estimation.OutcomeSpec(kind=estimation.HEALTH_SCORE)
    did_rows = {}
    for name, spec in (
        ("health_score", score_spec),
        ("healthy_count", estimation.OutcomeSpec(kind=estimation.HEALTHY_COUNT)),
        ("unhealthy_count", estimation.OutcomeSpec(kind=estimation.UNHEALTHY_COUNT)),
    ):
        analytic = estimation.did(pairs, index, catalog, outcome=spec, ci_method="analytic")
        boot = estimation.did(pairs, index, catalog, outcome=spec, ci_method="bootstrap",
                              n_boot=config.bootstrap, seed=config.seed)
        did_rows[name] = {"analytic": analytic.to_dict(), "bootstrap": boot.to_dict()}

    pooled = estimation.pooled_regression(pairs, index, catalog)
    table = estimation.contingency(pairs, index, catalog, outcome=score_spec)
    dose = estimation.dose_response(pairs, index, catalog, n_bins=config.dose_bins,
                                    outcome=score_spec)
    strata = estimation.strata_by_pre_health(pairs, index, catalog,
                                             horizons=config.horizons,
                                             n_boot=config.bootstrap, seed=config.seed)
    categories = estimation.category_effects(pairs, index, catalog)

    body = {"estimates": {
        "n_pairs": len(pairs),
        "did": did_rows,
        "pooled_regression": pooled.to_dict(),
        "contingency": table.to_dict(),
        "dose_response": dose.to_dict(),
        "strata": strata.to_dict(),
        "category_effects": [c.to_dict() for c in categories],
    }}
    _write_json(out / "estimates.json", _report_payload(config, body))

    flat = []
    for name, row in did_rows.items():
        a = row["analytic"]
        flat.append([name, f"{a['delta']:.10g}", f"{a['se_delta']:.10g}",
                     f"{a['ci_lo']:.10g}", f"{a['ci_hi']:.10g}", f"{a['r2']:.10g}",
                     a["n_points"]])
    for c in categories:
        e = c.estimate
        flat.append([f"category:{c.category}", f"{e.delta:.10g}", f"{e.se_delta:.10g}",
                     f"{e.ci[0]:.10g}", f"{e.ci[1]:.10g}", f"{e.r2:.10g}", e.n_points])
    _write_csv(out / "estimates.csv",
               ["outcome", "delta", "se", "ci_lo", "ci_hi", "r2", "n"], flat)
    _write_csv(out / "dose_bins.csv",
               ["dose_median", "n_pairs", "delta", "se", "ci_lo", "ci_hi"],
               [[f"{b.dose_median:.10g}", b.n_pairs, f"{b.estimate.delta:.10g}",
                 f"{b.estimate.se_delta:.10g}", f"{b.estimate.ci[0]:.10g}",
                 f"{b.estimate.ci[1]:.10g}"] for b in dose.bins])
    _write_csv(out / "strata.csv",
               ["quartile", "arm", "horizon_days", "n_units", "mean_diff", "ci_lo", "ci_hi"],
               [[c.quartile, c.arm, c.horizon_days, c.n_units,
                 "" if c.mean_diff is None else f"{c.mean_diff:.10g}",
                 "" if c.ci is None else f"{c.ci[0]:.10g}",
                 "" if c.ci is None else f"{c.ci[1]:.10g}"] for c in strata.cells])
    return body


def stage_sensitivity(config: PipelineConfig, discordant_pos: Optional[int] = None,
                      discordant_total: Optional[int] = None) -> dict:
    out = _out_dir(config)
    if discordant_pos is None or discordant_total is None:
        doc = _read_json(out / "estimates.json", "estimate")
        table = doc["estimates"]["contingency"]["table"]
        discordant_pos = int(table["healthy_only_increase"])
        discordant_total = discordant_pos + int(table["unhealthy_only_increase"])
    if discordant_total < 1:
        raise CliError("no discordant pairs; sensitivity analysis undefined")
    result = sensitivity.rosenbaum_binary(discordant_pos, discordant_total,
                                          alpha=config.alpha, gamma_step=config.gamma_step)
    body = {"sensitivity": result.to_dict()}
    if result.gamma_critical > 1.0:
        grid = sensitivity.default_lambda_grid(result.gamma_critical)
        curve = sensitivity.amplify(result.gamma_critical, grid)
        body["amplification"] = curve.to_dict()
        _write_csv(out / "amplification.csv", ["lambda", "delta"],
                   [[f"{l:.10g}", f"{d:.10g}"] for l, d in curve.points])
    _write_json(out / "sensitivity.json", _report_payload(config, body))
    _write_csv(out / "sensitivity_curve.csv", ["gamma", "p"],
               [[f"{g:.10g}", f"{p:.10g}"] for g, p in result.p_curve])
    return body


def stage_run_all(config: PipelineConfig) -> dict:
    summary = {}
    summary.update(stage_ingest_report(config))
    summary.update(stage_infer_ties(config))
    summary.update(stage_build_cohort(config))
    summary.update(stage_match(config))
    summary.update(stage_estimate(config))
    summary.update(stage_sensitivity(config))
    out = _out_dir(config)
    _write_json(out / "summary.json", _report_payload(config, summary))
    return summary


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="pipeline config JSON")
    parser.add_argument("--log", help="transaction log path")
    parser.add_argument("--catalog", help="item catalog path")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--caliper", type=float)
    parser.add_argument("--margin", type=float)
    parser.add_argument("--window-days", dest="window_days", type=int)
    parser.add_argument("--tie-threshold", dest="tie_threshold", type=int)
    parser.add_argument("--bootstrap", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--model", choices=["logistic", "random_forest"])


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mensa",
        description="co-eating tie inference and matched effect estimation",
    )
    parser.add_argument("--version", action="version", version=mensa.__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "ingest-report", "infer-ties", "build-cohort",
                 "match", "run-all"):
        p = sub.add_parser(name)
        _add_common(p)
    p_est = sub.add_parser("estimate")
    _add_common(p_est)
    p_est.add_argument("--counts-file", help="contingency counts JSON (pair-level fixture)")
    p_sens = sub.add_parser("sensitivity")
    _add_common(p_sens)
    p_sens.add_argument("--discordant-pos", type=int)
    p_sens.add_argument("--discordant-total", type=int)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        config = _apply_overrides(PipelineConfig.load(args.config), args)
        if args.command == "simulate":
            stage_simulate(config)
        elif args.command == "ingest-report":
            stage_ingest_report(config)
        elif args.command == "infer-ties":
            stage_infer_ties(config)
        elif args.command == "build-cohort":
            stage_build_cohort(config)
        elif args.command == "match":
            stage_match(config)
        elif args.command == "estimate":
            stage_estimate(config, counts_file=args.counts_file)
        elif args.command == "sensitivity":
            stage_sensitivity(config, discordant_pos=args.discordant_pos,
                              discordant_total=args.discordant_total)
        elif args.command == "run-all":
            stage_run_all(config)
        else:  # pragma: no cover
            raise CliError(f"unknown command {args.command!r}")
    except Exception as exc:  # surface a clean message, nonzero exit
        print(f"mensa: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
