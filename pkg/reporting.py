"""
Functions for writing experiment artifacts and reports.

Layout:
    <out>/<exp_id>/config.json, report.json | report.csv
    <out>/<exp_id>/repeat_<k>/events.log, ledger.snapshot, report.json | report.csv, rounds.jsonl,
                              reputation.csv, delays.csv, blobs/<hex>
    <out>/summary.json, summary.csv (sweeps)
"""
import json
import logging
import os
from typing import Dict, List

import pandas as pd

from dag_ledger import snapshot_lines
from metrics import MetricsReport, delay_distribution
from utils import write_lines

logger = logging.getLogger(__name__)

EVENTS_FILE = "events.log"
SNAPSHOT_FILE = "ledger.snapshot"
ROUNDS_FILE = "rounds.jsonl"
REPUTATION_FILE = "reputation.csv"
DELAYS_FILE = "delays.csv"
BLOB_DIR = "blobs"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
CONFIG_FILE = "config.json"
SUMMARY_JSON = "summary.json"
SUMMARY_CSV = "summary.csv"


def _dump_json(obj, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def _to_csv(df: pd.DataFrame, path: str) -> None:
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def repeat_report(world, outcome) -> Dict:
    dist = delay_distribution(outcome.delays)
    return {
        "schema": 1,
        "repeat": outcome.repeat,
        "config": dict(sorted(world.cfg.echo().items())),
        "tps": outcome.tps,
        "anchors": outcome.anchors,
        "delay_quantiles": dist.quantiles(),
        "final_accuracy": outcome.final_accuracy,
        "final_scores": outcome.final_scores,
        "final_reliability": outcome.final_reliability,
        "adversaries": outcome.adversaries,
        "max_payload_bytes": outcome.max_payload_bytes,
        "void_rounds": sum(1 for r in outcome.rounds if r["void"]),
    }


def write_repeat_artifacts(world, outcome, path: str) -> None:
    """Persist one repeat: logs, ledger snapshot, per-round records, reputation, delays, blobs."""
    os.makedirs(path, exist_ok=True)
    write_lines(os.path.join(path, EVENTS_FILE), world.events.lines())
    write_lines(os.path.join(path, SNAPSHOT_FILE), snapshot_lines(world.snapshot_node()))
    write_lines(os.path.join(path, ROUNDS_FILE),
                (json.dumps(r, sort_keys=True, separators=(",", ":")) for r in outcome.rounds))
    world.manager.reputation.export_csv(os.path.join(path, REPUTATION_FILE))
    _to_csv(pd.DataFrame({"delay_s": outcome.delays}), os.path.join(path, DELAYS_FILE))
    world.store.persist(os.path.join(path, BLOB_DIR))

    report = repeat_report(world, outcome)
    if world.cfg.format == "csv":
        flat = {k: v for k, v in report.items() if not isinstance(v, dict)}
        flat.update({f"delay_{k}": v for k, v in report["delay_quantiles"].items()})
        _to_csv(pd.DataFrame([flat]), os.path.join(path, REPORT_CSV))
    else:
        _dump_json(report, os.path.join(path, REPORT_JSON))
    logger.info(f"Repeat artifacts written to {path}")


def write_experiment_report(report: MetricsReport, path: str, fmt: str = "structured") -> None:
    os.makedirs(path, exist_ok=True)
    _dump_json(dict(sorted(report.config.items())), os.path.join(path, CONFIG_FILE))
    if fmt == "csv":
        df = pd.DataFrame({"repeat": range(len(report.tps_samples)), "tps": report.tps_samples})
        for key, value in report.summary_row().items():
            df[key] = value
        _to_csv(df, os.path.join(path, REPORT_CSV))
    else:
        _dump_json(report.to_dict(), os.path.join(path, REPORT_JSON))
    logger.info(f"Experiment report written to {path}")


def write_sweep_summary(reports: List[MetricsReport], out_root: str) -> None:
    os.makedirs(out_root, exist_ok=True)
    _dump_json([r.to_dict() for r in reports], os.path.join(out_root, SUMMARY_JSON))
    _to_csv(pd.DataFrame([r.summary_row() for r in reports]), os.path.join(out_root, SUMMARY_CSV))
    logger.info(f"Sweep summary written to {out_root}")


def format_report(report: MetricsReport) -> str:
    """Human-readable summary for the terminal."""
    lines = [f"Rounds: {report.rounds}, repeats: {report.repeats}",
             f"TPS mean: {report.tps_mean:.3f}"]
    if report.tps_std is not None:
        lines.append(f"TPS std: {report.tps_std:.3f} (variability {report.variability_pct:.2f}%)")
    q = report.delay_quantiles
    lines.append(f"Delay p25/p50/p75/max: {q['p25']:.2f} / {q['p50']:.2f} / {q['p75']:.2f} / {q['max']:.2f} s")
    return "\n".join(lines)
