"""
Verifier-side trust logic: update verification, reputation scoring, reliability classification and
aggregation weights.

Reputation follows exponential smoothing, score' = alpha * score + (1 - alpha) * accuracy, with a
rejected submission counted as accuracy 0.
"""
import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Set

import numpy as np
import pandas as pd

from config import Config
from fl_core import MalformedBytes, ModelParams, Shapes, deserialize_params

logger = logging.getLogger(__name__)


class TrustError(Exception):
    """Base class for trust errors."""


class OutOfRange(TrustError, ValueError):
    pass


class NoReliableDevices(TrustError):
    pass


class RejectReason(str, Enum):
    HASH_MISMATCH = "HashMismatch"
    SHAPE_MISMATCH = "ShapeMismatch"
    NON_FINITE_WEIGHTS = "NonFiniteWeights"
    STALE_ROUND = "StaleRound"
    DUPLICATE = "Duplicate"
    UNAUTHENTICATED = "Unauthenticated"
    INCOHERENT = "Incoherent"


class Reliability(str, Enum):
    RELIABLE = "Reliable"
    UNRELIABLE = "Unreliable"


class HistoryEntry(NamedTuple):
    round: int
    accuracy: float
    score_after: float
    penalty: Optional[str] = None


@dataclass
class ReputationRecord:
    device_id: str
    score: float = Config.INITIAL_REPUTATION
    rounds_participated: int = 0
    last_round: int = 0
    history: List[HistoryEntry] = field(default_factory=list)


@dataclass(frozen=True)
class VerificationOutcome:
    accepted: bool
    reason: Optional[RejectReason] = None
    params: Optional[ModelParams] = field(default=None, compare=False)

    @classmethod
    def accept(cls, params: Optional[ModelParams] = None) -> "VerificationOutcome":
        return cls(True, None, params)

    @classmethod
    def reject(cls, reason: RejectReason) -> "VerificationOutcome":
        return cls(False, RejectReason(reason))

    @property
    def verdict(self) -> str:
        return "Accept" if self.accepted else f"Reject({self.reason.value})"


@dataclass(frozen=True)
class UpdateClaim:
    """What the verifier is told about one submitted update."""
    device_id: str
    round: int
    content_id: str
    shapes: Shapes
    credential: str = ""
    anchor_block: Optional[str] = None


def _check_unit(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise OutOfRange(f"{name} must be in [0, 1], got {value}")


def update_reputation(record: ReputationRecord, accuracy: float, alpha: float,
                      round_index: Optional[int] = None) -> ReputationRecord:
    _check_unit("accuracy", accuracy)
    _check_unit("alpha", alpha)
    _check_unit("score", record.score)
    score = alpha * record.score + (1.0 - alpha) * accuracy
    r = record.last_round + 1 if round_index is None else round_index
    return dataclasses.replace(
        record,
        score=score,
        rounds_participated=record.rounds_participated + 1,
        last_round=r,
        history=record.history + [HistoryEntry(r, float(accuracy), score)],
    )


def penalize(record: ReputationRecord, kind: RejectReason, alpha: float,
             round_index: Optional[int] = None) -> ReputationRecord:
    """A rejected submission is scored as accuracy 0: score' = alpha * score."""
    _check_unit("alpha", alpha)
    score = alpha * record.score
    r = record.last_round + 1 if round_index is None else round_index
    return dataclasses.replace(
        record,
        score=score,
        last_round=r,
        history=record.history + [HistoryEntry(r, 0.0, score, RejectReason(kind).value)],
    )


def classify(record: ReputationRecord, threshold: float) -> Reliability:
    return Reliability.UNRELIABLE if record.score < threshold else Reliability.RELIABLE


def aggregation_weights(records: Sequence[ReputationRecord], sample_counts: Sequence[int],
                        threshold: float) -> np.ndarray:
    """score * n for Reliable devices, 0 for Unreliable ones, normalized to sum 1."""
    if len(records) != len(sample_counts):
        raise ValueError("records and sample counts must be aligned")
    raw = np.array([
        r.score * n if classify(r, threshold) is Reliability.RELIABLE else 0.0
        for r, n in zip(records, sample_counts)
    ], dtype=np.float64)
    total = raw.sum()
    if not raw.size or total <= 0:
        raise NoReliableDevices(f"no reliable device among {len(records)}")
    return raw / total


def sample_weights(sample_counts: Sequence[int]) -> np.ndarray:
    """Plain FedAvg weighting by sample count."""
    raw = np.asarray(sample_counts, dtype=np.float64)
    if not raw.size or raw.sum() <= 0:
        raise NoReliableDevices("no samples to weight")
    return raw / raw.sum()


def verify_update(
    claim: UpdateClaim,
    store,
    ledger_view: Mapping[str, str],
    registry,
    current_round: int,
    accepted: Optional[Set[str]] = None,
) -> VerificationOutcome:
    """
    Integrity checks for one submission, in order: authentication, round, duplicate, content hash
    (blob present, hashing to its id, and matching the anchored hash), shapes, finite weights.

    `ledger_view` maps anchor block ids to the content hash they carry; `accepted` holds devices
    already accepted this round.
    """
    if not registry.authenticate(claim.device_id, claim.credential):
        return VerificationOutcome.reject(RejectReason.UNAUTHENTICATED)
    if claim.round != current_round:
        return VerificationOutcome.reject(RejectReason.STALE_ROUND)
    if accepted is not None and claim.device_id in accepted:
        return VerificationOutcome.reject(RejectReason.DUPLICATE)
    if not store.has(claim.content_id):
        return VerificationOutcome.reject(RejectReason.HASH_MISMATCH)
    try:
        blob = store.get(claim.content_id)
    except Exception as e:
        logger.warning(f"Blob {claim.content_id[:12]} from {claim.device_id} unreadable: {e}")
        return VerificationOutcome.reject(RejectReason.HASH_MISMATCH)
    if not store.verify(claim.content_id, blob):
        return VerificationOutcome.reject(RejectReason.HASH_MISMATCH)
    if claim.anchor_block is not None and ledger_view.get(claim.anchor_block) != claim.content_id:
        return VerificationOutcome.reject(RejectReason.HASH_MISMATCH)
    try:
        params = deserialize_params(blob)
    except MalformedBytes:
        return VerificationOutcome.reject(RejectReason.SHAPE_MISMATCH)
    if params.shapes != Shapes(*claim.shapes):
        return VerificationOutcome.reject(RejectReason.SHAPE_MISMATCH)
    if not params.is_finite():
        return VerificationOutcome.reject(RejectReason.NON_FINITE_WEIGHTS)
    return VerificationOutcome.accept(params)


def incoherent_devices(candidates: Mapping[str, ModelParams], reference: ModelParams,
                       factor: float = Config.OUTLIER_FACTOR, min_count: int = 3) -> Set[str]:
    """
    Devices whose update lies more than `factor` times the median distance away from the round's
    starting model. Needs at least `min_count` candidates.
    """
    if len(candidates) < min_count:
        return set()
    ids = sorted(candidates)
    distances = np.array([np.linalg.norm(candidates[d].weights - reference.weights) for d in ids])
    median = float(np.median(distances))
    flagged = {d for d, dist in zip(ids, distances) if dist > factor * median}
    if flagged:
        logger.debug(f"Median update distance {median:.4f}; incoherent: {sorted(flagged)}")
    return flagged


class ReputationTable:
    """Single-owner table of reputation records, mutated only by the round pipeline."""

    def __init__(self, device_ids: Iterable[str] = (), initial_score: float = Config.INITIAL_REPUTATION):
        _check_unit("initial_score", initial_score)
        self.initial_score = initial_score
        self.records: Dict[str, ReputationRecord] = {}
        for device_id in device_ids:
            self.ensure(device_id)

    def ensure(self, device_id: str) -> ReputationRecord:
        if device_id not in self.records:
            self.records[device_id] = ReputationRecord(device_id, score=self.initial_score)
        return self.records[device_id]

    def __getitem__(self, device_id: str) -> ReputationRecord:
        return self.records[device_id]

    def __contains__(self, device_id: str) -> bool:
        return device_id in self.records

    def apply_accuracy(self, device_id: str, accuracy: float, alpha: float, round_index: int) -> ReputationRecord:
        record = update_reputation(self.ensure(device_id), accuracy, alpha, round_index)
        self.records[device_id] = record
        return record

    def apply_penalty(self, device_id: str, reason: RejectReason, alpha: float, round_index: int) -> ReputationRecord:
        record = penalize(self.ensure(device_id), reason, alpha, round_index)
        self.records[device_id] = record
        logger.debug(f"Penalized {device_id} for {RejectReason(reason).value}: score {record.score:.4f}")
        return record

    def scores(self) -> Dict[str, float]:
        return {d: self.records[d].score for d in sorted(self.records)}

    def classify_all(self, threshold: float) -> Dict[str, Reliability]:
        return {d: classify(self.records[d], threshold) for d in sorted(self.records)}

    def canonical_bytes(self) -> bytes:
        """One `device_id,score,rounds_participated,last_round` line per device, sorted by id."""
        lines = [
            f"{d},{r.score!r},{r.rounds_participated},{r.last_round}"
            for d, r in sorted(self.records.items())
        ]
        return ("\n".join(lines) + "\n").encode("utf-8")

    def to_dataframe(self) -> pd.DataFrame:
        rows = [
            {"device_id": d, "round": h.round, "accuracy": h.accuracy, "score": h.score_after,
             "penalty": h.penalty or ""}
            for d, r in sorted(self.records.items())
            for h in r.history
        ]
        columns = ["device_id", "round", "accuracy", "score", "penalty"]
        df = pd.DataFrame(rows, columns=columns)
        if not df.empty:
            df = df.sort_values(["round", "device_id"], kind="stable").reset_index(drop=True)
        return df

    def export_csv(self, path: str) -> None:
        self.to_dataframe().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        logger.debug(f"Reputation table written to {path}")
