"""
Throughput, variability and confirmation-delay metrics computed from event logs.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import Config
from simnet import EventLog

logger = logging.getLogger(__name__)

REPORT_SCHEMA = 1
ANCHOR_SUBMITTED = "anchor_submitted"
ANCHOR_CONFIRMED = "anchor_confirmed"


class MetricsError(Exception):
    """Base class for metrics errors."""


class EmptyRun(MetricsError):
    pass


class TooFewSamples(MetricsError):
    pass


class NoConfirmations(MetricsError):
    pass


def run_span(events: EventLog, span_mode: str = "submission") -> Tuple[float, float]:
    """
    (start, end) of a run. `submission` spans first anchor submission to last confirmation,
    `wall` spans time 0 to last confirmation.
    """
    submitted = events.of_kind(ANCHOR_SUBMITTED)
    confirmed = events.of_kind(ANCHOR_CONFIRMED)
    if not submitted or not confirmed:
        raise EmptyRun("run has no confirmed anchor transactions")
    end = max(r.t for r in confirmed)
    if span_mode == "wall":
        return 0.0, end
    if span_mode != "submission":
        raise ValueError(f"unknown span mode '{span_mode}'")
    return min(r.t for r in submitted), end


def compute_tps(events: EventLog, span_mode: str = "submission", span: Optional[float] = None) -> float:
    """Confirmed anchor transactions per second of run span."""
    confirmed = events.of_kind(ANCHOR_CONFIRMED)
    if not confirmed:
        raise EmptyRun("run has no confirmed anchor transactions")
    if span is None:
        start, end = run_span(events, span_mode)
        span = end - start
    if not span > 0:
        raise EmptyRun(f"run span must be positive, got {span}")
    return len(confirmed) / span


def variability(tps_samples: Sequence[float]) -> Tuple[float, float, float]:
    """Sample mean, sample std (n - 1) and coefficient of variation in percent."""
    samples = np.asarray(tps_samples, dtype=np.float64)
    if samples.size < 2:
        raise TooFewSamples(f"need at least 2 samples, got {samples.size}")
    mean = float(samples.mean())
    std = float(samples.std(ddof=1))
    pct = std / mean * 100.0 if mean > 0 else 0.0
    return mean, std, pct


def delay_samples(events: EventLog) -> List[float]:
    """Per-anchor confirmation delay (confirm time minus submit time), in confirmation order."""
    submitted = {r.digest: r.t for r in events.of_kind(ANCHOR_SUBMITTED)}
    delays = []
    for r in events.of_kind(ANCHOR_CONFIRMED):
        if r.digest in submitted:
            delays.append(r.t - submitted[r.digest])
    return delays


@dataclass
class DelayDistribution:
    samples: List[float]
    p25: float
    p50: float
    p75: float
    max: float

    def quantiles(self) -> Dict[str, float]:
        return {"p25": self.p25, "p50": self.p50, "p75": self.p75, "max": self.max}


def delay_distribution(source) -> DelayDistribution:
    """Delay samples plus quartiles by linear interpolation between order statistics."""
    samples = delay_samples(source) if isinstance(source, EventLog) else [float(s) for s in source]
    if not samples:
        raise NoConfirmations("no confirmed transactions")
    p25, p50, p75 = (float(q) for q in np.percentile(samples, [25, 50, 75], method="linear"))
    return DelayDistribution(samples, p25, p50, p75, float(max(samples)))


@dataclass
class MetricsReport:
    tps_samples: List[float]
    tps_mean: float
    tps_std: Optional[float]
    variability_pct: Optional[float]
    delay_samples: List[float]
    delay_quantiles: Dict[str, float]
    config: Dict = field(default_factory=dict)
    rounds: int = 0
    repeats: int = 0
    extras: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "schema": REPORT_SCHEMA,
            "config": dict(sorted(self.config.items())),
            "rounds": self.rounds,
            "repeats": self.repeats,
            "tps_samples": list(self.tps_samples),
            "tps_mean": self.tps_mean,
            "tps_std": self.tps_std,
            "variability_pct": self.variability_pct,
            "delay_quantiles": dict(self.delay_quantiles),
            "delay_count": len(self.delay_samples),
            **self.extras,
        }

    def summary_row(self) -> Dict:
        return {"rounds": self.rounds, "repeats": self.repeats, "tps_mean": self.tps_mean,
                "tps_std": self.tps_std, "variability_pct": self.variability_pct,
                **{f"delay_{k}": v for k, v in self.delay_quantiles.items()}}

    def delays_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame({"delay_s": self.delay_samples})


def build_report(tps_samples: Sequence[float], delay_samples: Sequence[float], config_echo: Mapping,
                 rounds: int, repeats: int) -> MetricsReport:
    tps = [float(x) for x in tps_samples]
    if not tps:
        raise EmptyRun("no TPS samples")
    if len(tps) >= 2:
        mean, std, pct = variability(tps)
    else:
        mean, std, pct = tps[0], None, None
    dist = delay_distribution(delay_samples)
    return MetricsReport(tps, mean, std, pct, list(dist.samples), dist.quantiles(), dict(config_echo),
                         rounds, repeats)


def reference_consistency(rows: Mapping[int, Tuple[float, float, float]] = None,
                          tolerance_pp: float = 0.1,
                          consistent_rows: Sequence[int] = Config.REFERENCE_CONSISTENT_ROWS) -> Dict[int, bool]:
    """
    Check recorded (mean, std, pct) throughput rows against pct = std / mean * 100. Rows outside
    `consistent_rows` are reported but not expected to agree.
    """
    rows = Config.REFERENCE_THROUGHPUT if rows is None else rows
    checks = {}
    for key in sorted(rows):
        mean, std, pct = rows[key]
        agrees = abs(std / mean * 100.0 - pct) <= tolerance_pp
        checks[key] = agrees
        if key in consistent_rows and not agrees:
            logger.warning(f"Throughput row {key}: {std}/{mean} does not give {pct}%")
    return checks
