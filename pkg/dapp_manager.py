"""
DLT-DApp Manager pipeline.

The adapter authenticates and filters device submissions, stores weights off-chain and anchors their
hashes on the ledger. The verifier checks updates and keeps the reputation table. The aggregator
weights the accepted updates, runs FedAvg and anchors the global model together with a digest of
the reputation table.

AnchorRecord encoding (what goes into a ledger block payload) is compact JSON with sorted keys,
ASCII only, no whitespace:

    {"content_hash":<hex>,"contributing":[<block id>...],"device_id":<str>,"kind":<kind>,
     "meta":{<str>:<str>...},"round":<int>,"v":1}

`meta` always carries a `pad` entry of "0" characters that brings the record up to its kind's target
size. Records are never truncated.
"""
import hmac
import json
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Set, Tuple

import numpy as np

from config import Config
from dag_ledger import Block, LedgerNetwork
from fl_core import DataShard, ModelParams, Shapes, deserialize_params, evaluate, fedavg, serialize_params
from offchain_store import ContentStore, IntegrityFailure
from trust import (
    NoReliableDevices,
    RejectReason,
    Reliability,
    ReputationTable,
    UpdateClaim,
    VerificationOutcome,
    aggregation_weights,
    incoherent_devices,
    sample_weights,
    verify_update,
)
from utils import digest_hex, to_micros

logger = logging.getLogger(__name__)

ANCHOR_VERSION = 1


class DAppError(Exception):
    """Base class for pipeline errors."""


class Unauthenticated(DAppError):
    pass


class Duplicate(DAppError):
    pass


class CollectionClosed(DAppError):
    pass


class NotFinalized(DAppError):
    pass


class SubmissionTooLarge(DAppError):
    pass


class MalformedSubmission(DAppError):
    pass


class QuorumNotMet(DAppError):
    """Raised by close_round for void rounds; `result` holds the recorded void RoundResult."""

    def __init__(self, message: str, result: Optional["RoundResult"] = None):
        super().__init__(message)
        self.result = result


class AnchorKind(str, Enum):
    DEVICE_UPDATE = "DeviceUpdate"
    GLOBAL_MODEL = "GlobalModel"
    REPUTATION_DIGEST = "ReputationDigest"


_BAND_KEYS = {
    AnchorKind.DEVICE_UPDATE: "device_update",
    AnchorKind.GLOBAL_MODEL: "global_model",
    AnchorKind.REPUTATION_DIGEST: "reputation_digest",
}


def payload_band(kind: AnchorKind) -> Tuple[int, int, int]:
    return Config.PAYLOAD_BANDS[_BAND_KEYS[AnchorKind(kind)]]


@dataclass
class AnchorRecord:
    kind: AnchorKind
    round: int
    content_hash: str
    device_id: str = ""
    contributing: Tuple[str, ...] = ()
    meta: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "content_hash": self.content_hash,
            "contributing": list(self.contributing),
            "device_id": self.device_id,
            "kind": AnchorKind(self.kind).value,
            "meta": {k: str(v) for k, v in self.meta.items()},
            "round": int(self.round),
            "v": ANCHOR_VERSION,
        }


def _compact(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def encode_anchor(record: AnchorRecord) -> bytes:
    """Canonical bytes of a record, padded up to its kind's target size."""
    if AnchorKind(record.kind) is AnchorKind.GLOBAL_MODEL and not record.contributing:
        raise ValueError("a GlobalModel record needs at least one contributing update")
    _, target, _ = payload_band(record.kind)
    body = record.to_dict()
    body["meta"]["pad"] = ""
    bare = _compact(body)
    body["meta"]["pad"] = "0" * max(0, target - len(bare))
    return _compact(body)


def decode_anchor(payload: bytes) -> AnchorRecord:
    try:
        body = json.loads(payload.decode("ascii"))
        meta = dict(body["meta"])
        meta.pop("pad", None)
        return AnchorRecord(
            kind=AnchorKind(body["kind"]),
            round=int(body["round"]),
            content_hash=body["content_hash"],
            device_id=body["device_id"],
            contributing=tuple(body["contributing"]),
            meta=meta,
        )
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as e:
        raise MalformedSubmission(f"not an anchor record: {e}")


# --- Registry and submissions ---

@dataclass
class RegistryEntry:
    credential_digest: str
    enrolled: bool = True


class DeviceRegistry:
    """Permissioned device registry holding a pre-shared key digest per device."""

    def __init__(self):
        self._entries: Dict[str, RegistryEntry] = {}

    def enroll(self, device_id: str, credential: str) -> None:
        self._entries[device_id] = RegistryEntry(digest_hex(credential.encode("utf-8")))

    def revoke(self, device_id: str) -> None:
        if device_id in self._entries:
            self._entries[device_id].enrolled = False

    def authenticate(self, device_id: str, credential: str) -> bool:
        entry = self._entries.get(device_id)
        if entry is None or not entry.enrolled:
            return False
        return hmac.compare_digest(entry.credential_digest, digest_hex(str(credential).encode("utf-8")))

    def enrolled(self) -> List[str]:
        return sorted(d for d, e in self._entries.items() if e.enrolled)

    def __contains__(self, device_id: str) -> bool:
        return device_id in self._entries


def authenticate(device_id: str, credential: str, registry: DeviceRegistry) -> bool:
    return registry.authenticate(device_id, credential)


@dataclass(frozen=True)
class Submission:
    device_id: str
    credential: str
    round: int
    n_samples: int
    shapes: Shapes
    blob: bytes


def encode_submission(submission: Submission) -> bytes:
    """u32 header length | compact sorted JSON header | params blob."""
    header = _compact({
        "credential": submission.credential,
        "device_id": submission.device_id,
        "n_samples": int(submission.n_samples),
        "round": int(submission.round),
        "shapes": [int(s) for s in submission.shapes],
    })
    return struct.pack(">I", len(header)) + header + submission.blob


def decode_submission(data: bytes) -> Submission:
    if len(data) < 4:
        raise MalformedSubmission("submission shorter than its length prefix")
    (n,) = struct.unpack(">I", data[:4])
    if len(data) < 4 + n:
        raise MalformedSubmission("truncated submission header")
    try:
        header = json.loads(data[4:4 + n].decode("ascii"))
        return Submission(
            device_id=str(header["device_id"]),
            credential=str(header["credential"]),
            round=int(header["round"]),
            n_samples=int(header["n_samples"]),
            shapes=Shapes(*header["shapes"]),
            blob=bytes(data[4 + n:]),
        )
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as e:
        raise MalformedSubmission(f"bad submission header: {e}")


@dataclass(frozen=True)
class RoundConfig:
    round: int
    start_time: float
    deadline: float
    quorum: int = 1
    alpha: float = Config.ALPHA
    threshold: float = Config.THRESHOLD
    penalty_alpha: Optional[float] = None
    reputation_enabled: bool = True
    outlier_factor: float = Config.OUTLIER_FACTOR

    def __post_init__(self):
        if self.round < 1:
            raise ValueError("rounds are numbered from 1")
        if not self.deadline > self.start_time:
            raise ValueError("deadline must be after the round start")
        if self.quorum < 1:
            raise ValueError("quorum must be >= 1")

    @property
    def effective_penalty_alpha(self) -> float:
        return self.alpha if self.penalty_alpha is None else self.penalty_alpha


@dataclass
class RoundResult:
    round: int
    global_params: ModelParams
    accepted: Tuple[str, ...] = ()
    weights: Dict[str, float] = field(default_factory=dict)
    anchor_block: Optional[str] = None
    reputation_block: Optional[str] = None
    global_hash: Optional[str] = None
    contributing: Tuple[str, ...] = ()
    rejections: List[Tuple[str, str]] = field(default_factory=list)
    accuracies: Dict[str, float] = field(default_factory=dict)
    scores: Dict[str, float] = field(default_factory=dict)
    reliability: Dict[str, str] = field(default_factory=dict)
    global_accuracy: float = 0.0
    started_at: float = 0.0
    closed_at: float = 0.0
    void: bool = False
    void_reason: str = ""

    def to_record(self) -> Dict:
        """JSON-ready summary without the parameter vector."""
        return {
            "round": self.round,
            "void": self.void,
            "void_reason": self.void_reason,
            "accepted": list(self.accepted),
            "weights": dict(sorted(self.weights.items())),
            "anchor_block": self.anchor_block,
            "reputation_block": self.reputation_block,
            "global_hash": self.global_hash,
            "contributing": list(self.contributing),
            "rejections": [list(r) for r in self.rejections],
            "accuracies": dict(sorted(self.accuracies.items())),
            "scores": dict(sorted(self.scores.items())),
            "reliability": dict(sorted(self.reliability.items())),
            "global_accuracy": self.global_accuracy,
            "started_at": self.started_at,
            "closed_at": self.closed_at,
        }


@dataclass
class PendingUpdate:
    submission: Submission
    content_id: Optional[str]
    block_id: Optional[str]
    forced: Optional[RejectReason] = None


AnchorHook = Callable[[AnchorRecord, Block, float], None]


class DltAdapter:
    """Gateway between devices and the ledger: authenticate, filter, store off-chain, anchor."""

    def __init__(self, registry: DeviceRegistry, store: ContentStore, ledger: LedgerNetwork,
                 entry_node: str, rng: np.random.Generator, on_anchor: Optional[AnchorHook] = None):
        self.registry = registry
        self.store = store
        self.ledger = ledger
        self.entry_node = entry_node
        self.rng = rng
        self.on_anchor = on_anchor
        self.collecting_round: Optional[int] = None
        # round -> authenticated devices that sent a submission for that round
        self.heard: Dict[int, Set[str]] = {}
        self._seen: Set[Tuple[int, str]] = set()
        # anchor block id -> content hash it commits to
        self.anchors: Dict[str, str] = {}
        self.update_blocks: Dict[Tuple[int, str], str] = {}

    def open(self, round_index: int) -> None:
        self.collecting_round = round_index
        self.heard = {r: devices for r, devices in self.heard.items() if r >= round_index}

    def close(self) -> None:
        self.collecting_round = None

    def anchor(self, record: AnchorRecord, now: float) -> Block:
        payload = encode_anchor(record)
        lo, _, hi = payload_band(record.kind)
        if not lo <= len(payload) <= hi:
            logger.warning(f"{AnchorKind(record.kind).value} anchor of {len(payload)} bytes outside band {lo}-{hi}")
        block = self.ledger.submit(self.entry_node, payload, now, self.rng)
        self.anchors[block.id] = record.content_hash
        if self.on_anchor is not None:
            self.on_anchor(record, block, now)
        logger.debug(f"Anchored {AnchorKind(record.kind).value} r{record.round} {record.device_id} as {block.id[:12]}")
        return block

    def ingest(self, submission: Submission, now: float) -> Tuple[AnchorRecord, Block, str]:
        """
        Filter then anchor one submission. Raises Unauthenticated, CollectionClosed (no round open,
        or a submission for another round) and Duplicate before any store or ledger traffic.
        """
        if not self.registry.authenticate(submission.device_id, submission.credential):
            raise Unauthenticated(f"device {submission.device_id!r} failed authentication")
        self.heard.setdefault(submission.round, set()).add(submission.device_id)
        if self.collecting_round is None or submission.round != self.collecting_round:
            raise CollectionClosed(f"not collecting round {submission.round} (open: {self.collecting_round})")
        key = (submission.round, submission.device_id)
        if key in self._seen:
            raise Duplicate(f"device {submission.device_id} already submitted for round {submission.round}")
        if len(submission.blob) > Config.MAX_BLOB_BYTES:
            raise SubmissionTooLarge(f"{len(submission.blob)} byte blob from {submission.device_id}")
        self._seen.add(key)
        cid = self.store.put(submission.blob)
        record = AnchorRecord(
            kind=AnchorKind.DEVICE_UPDATE,
            round=submission.round,
            content_hash=cid,
            device_id=submission.device_id,
            meta={
                "blob_bytes": str(len(submission.blob)),
                "fw": Config.FIRMWARE_TAG,
                "n_samples": str(submission.n_samples),
                "shapes": "x".join(str(s) for s in submission.shapes),
                "submitted_at_us": str(to_micros(now)),
            },
        )
        block = self.anchor(record, now)
        self.update_blocks[key] = block.id
        return record, block, cid


class DltVerifier:
    """Checks updates, scores them on a held-out shard and maintains reputations."""

    def __init__(self, registry: DeviceRegistry, store: ContentStore, validation: DataShard,
                 reputation: ReputationTable):
        self.registry = registry
        self.store = store
        self.validation = validation
        self.reputation = reputation

    def check(self, pending: List[PendingUpdate], ledger_view: Mapping[str, str], cfg: RoundConfig,
              reference: ModelParams) -> List[VerificationOutcome]:
        accepted: Set[str] = set()
        outcomes = []
        for item in pending:
            sub = item.submission
            if item.forced is not None:
                outcomes.append(VerificationOutcome.reject(item.forced))
                continue
            claim = UpdateClaim(sub.device_id, sub.round, item.content_id or "", sub.shapes,
                                credential=sub.credential, anchor_block=item.block_id)
            outcome = verify_update(claim, self.store, ledger_view, self.registry, cfg.round, accepted)
            if outcome.accepted:
                accepted.add(sub.device_id)
            outcomes.append(outcome)

        if cfg.reputation_enabled:
            candidates = {p.submission.device_id: o.params for p, o in zip(pending, outcomes) if o.accepted}
            flagged = incoherent_devices(candidates, reference, cfg.outlier_factor)
            outcomes = [
                VerificationOutcome.reject(RejectReason.INCOHERENT)
                if o.accepted and p.submission.device_id in flagged else o
                for p, o in zip(pending, outcomes)
            ]
        return outcomes

    def score(self, device_id: str, params: ModelParams) -> float:
        return evaluate(params, self.validation)

    def apply(self, pending: List[PendingUpdate], outcomes: List[VerificationOutcome],
              accuracies: Dict[str, float], cfg: RoundConfig) -> None:
        """Reputation updates in arrival order: accuracy for accepted updates, a penalty per reject."""
        if not cfg.reputation_enabled:
            return
        for item, outcome in zip(pending, outcomes):
            device_id = item.submission.device_id
            if device_id not in self.reputation:
                continue
            if outcome.accepted:
                self.reputation.apply_accuracy(device_id, accuracies[device_id], cfg.alpha, cfg.round)
            else:
                self.reputation.apply_penalty(device_id, outcome.reason, cfg.effective_penalty_alpha, cfg.round)


class DltAggregator:
    """Weighted FedAvg over verified updates; publishes and anchors the global model."""

    def __init__(self, store: ContentStore, adapter: DltAdapter, initial: ModelParams):
        self.store = store
        self.adapter = adapter
        self.global_params = initial

    def weights(self, devices: List[str], sample_counts: List[int], reputation: ReputationTable,
                cfg: RoundConfig) -> np.ndarray:
        if not cfg.reputation_enabled:
            return sample_weights(sample_counts)
        return aggregation_weights([reputation[d] for d in devices], sample_counts, cfg.threshold)

    def aggregate(self, params: List[ModelParams], weights: np.ndarray) -> ModelParams:
        return fedavg(list(zip(params, weights)))

    def publish(self, params: ModelParams, round_index: int, contributing: List[str],
                n_contributors: int, now: float) -> Tuple[Block, str]:
        blob = serialize_params(params)
        cid = self.store.put(blob)
        record = AnchorRecord(
            kind=AnchorKind.GLOBAL_MODEL,
            round=round_index,
            content_hash=cid,
            contributing=tuple(contributing),
            meta={"blob_bytes": str(len(blob)), "n_contributors": str(n_contributors),
                  "published_at_us": str(to_micros(now))},
        )
        self.global_params = params
        return self.adapter.anchor(record, now), cid

    def anchor_reputation(self, reputation: ReputationTable, round_index: int, now: float) -> Block:
        """Store the canonical reputation table off-chain and anchor its id with per-device scores."""
        cid = self.store.put(reputation.canonical_bytes())
        meta = {f"s:{d}": f"{s:.6f}" for d, s in reputation.scores().items()}
        record = AnchorRecord(kind=AnchorKind.REPUTATION_DIGEST, round=round_index, content_hash=cid, meta=meta)
        return self.adapter.anchor(record, now)


class DAppManager:
    """Round pipeline: open a collection window, ingest submissions, then verify, weigh and aggregate."""

    def __init__(self, registry: DeviceRegistry, store: ContentStore, ledger: LedgerNetwork,
                 entry_node: str, validation: DataShard, initial: ModelParams,
                 rng: np.random.Generator, initial_reputation: float = Config.INITIAL_REPUTATION,
                 on_anchor: Optional[AnchorHook] = None):
        self.registry = registry
        self.store = store
        self.ledger = ledger
        self.adapter = DltAdapter(registry, store, ledger, entry_node, rng, on_anchor)
        self.reputation = ReputationTable(registry.enrolled(), initial_reputation)
        self.verifier = DltVerifier(registry, store, validation, self.reputation)
        self.aggregator = DltAggregator(store, self.adapter, initial)
        self.results: Dict[int, RoundResult] = {}
        self.global_anchors: Dict[int, Tuple[str, str]] = {}
        self.current: Optional[RoundConfig] = None
        self.last_closed = 0
        self.dropped = 0
        self._pending: List[PendingUpdate] = []

    @property
    def global_params(self) -> ModelParams:
        return self.aggregator.global_params

    def open_round(self, cfg: RoundConfig) -> None:
        if self.current is not None:
            raise DAppError(f"round {self.current.round} is still open")
        if cfg.round != self.last_closed + 1:
            raise DAppError(f"round {cfg.round} cannot follow round {self.last_closed}")
        self.current = cfg
        self.adapter.open(cfg.round)
        logger.debug(f"Round {cfg.round} open at t={cfg.start_time:.3f}, deadline t={cfg.deadline:.3f}")

    def ingest_update(self, submission: Submission, now: float) -> Optional[AnchorRecord]:
        """
        Route one submission. Returns the anchored record, or None when it was dropped
        (unauthenticated) or queued for rejection (duplicate, stale or late).
        """
        if self.current is not None and now > self.current.deadline:
            self.adapter.close()
        try:
            record, block, cid = self.adapter.ingest(submission, now)
        except Unauthenticated as e:
            self.dropped += 1
            logger.warning(f"Dropped submission: {e}")
            return None
        except Duplicate:
            self._pending.append(PendingUpdate(submission, None, None, RejectReason.DUPLICATE))
            return None
        except CollectionClosed:
            self._pending.append(PendingUpdate(submission, None, None, RejectReason.STALE_ROUND))
            return None
        self._pending.append(PendingUpdate(submission, cid, block.id))
        return record

    def ready_to_close(self, now: float) -> bool:
        if self.current is None:
            return False
        if now >= self.current.deadline:
            return True
        return set(self.registry.enrolled()) <= self.adapter.heard.get(self.current.round, set())

    def close_round(self, now: float) -> RoundResult:
        """
        Verify, score and aggregate everything received. Raises QuorumNotMet (carrying the void
        result) when too few updates pass, in which case the previous global model carries forward.
        """
        cfg = self.current
        if cfg is None:
            raise CollectionClosed("no round is open")
        self.adapter.close()
        pending, self._pending = self._pending, []
        reference = self.aggregator.global_params

        outcomes = self.verifier.check(pending, self.adapter.anchors, cfg, reference)
        accepted = [(p, o) for p, o in zip(pending, outcomes) if o.accepted]
        accuracies = {p.submission.device_id: self.verifier.score(p.submission.device_id, o.params)
                      for p, o in accepted}
        self.verifier.apply(pending, outcomes, accuracies, cfg)

        result = RoundResult(
            round=cfg.round,
            global_params=reference,
            accepted=tuple(p.submission.device_id for p, _ in accepted),
            rejections=[(p.submission.device_id, o.reason.value) for p, o in zip(pending, outcomes) if not o.accepted],
            accuracies=accuracies,
            started_at=cfg.start_time,
            closed_at=now,
        )
        for device_id, reason in result.rejections:
            logger.warning(f"Round {cfg.round}: rejected update from {device_id} ({reason})")

        try:
            if len(accepted) < cfg.quorum:
                raise QuorumNotMet(f"round {cfg.round}: {len(accepted)} accepted updates, quorum {cfg.quorum}")
            devices = [p.submission.device_id for p, _ in accepted]
            weights = self.aggregator.weights(devices, [p.submission.n_samples for p, _ in accepted],
                                              self.reputation, cfg)
        except (QuorumNotMet, NoReliableDevices) as e:
            return self._finish_void(result, cfg, now, str(e))

        params = self.aggregator.aggregate([o.params for _, o in accepted], weights)
        contributing = [p.block_id for (p, _), w in zip(accepted, weights) if w > 0]
        block, cid = self.aggregator.publish(params, cfg.round, contributing, len(contributing), now)
        result.global_params = params
        result.weights = {d: float(w) for d, w in zip(devices, weights)}
        result.anchor_block = block.id
        result.global_hash = cid
        result.contributing = tuple(contributing)
        result.global_accuracy = evaluate(params, self.verifier.validation)
        self.global_anchors[cfg.round] = (block.id, cid)
        self._finish(result, cfg, now)
        logger.info(f"Round {cfg.round} closed at t={now:.3f}: {len(contributing)} contributors, "
                    f"accuracy {result.global_accuracy:.3f}")
        return result

    def _finish(self, result: RoundResult, cfg: RoundConfig, now: float) -> None:
        rep_block = self.aggregator.anchor_reputation(self.reputation, cfg.round, now)
        result.reputation_block = rep_block.id
        result.scores = self.reputation.scores()
        result.reliability = {d: r.value for d, r in self.reputation.classify_all(cfg.threshold).items()}
        self.results[cfg.round] = result
        self.last_closed = cfg.round
        self.current = None

    def _finish_void(self, result: RoundResult, cfg: RoundConfig, now: float, reason: str) -> RoundResult:
        result.void = True
        result.void_reason = reason
        result.global_accuracy = evaluate(result.global_params, self.verifier.validation)
        self._finish(result, cfg, now)
        logger.warning(f"Round {cfg.round} void: {reason}")
        raise QuorumNotMet(reason, result=result)

    def run_round(self, cfg: RoundConfig, submissions: Iterable[Submission], now: Optional[float] = None) -> RoundResult:
        """open_round, ingest every submission at the round start, close_round."""
        self.open_round(cfg)
        for submission in submissions:
            self.ingest_update(submission, cfg.start_time)
        return self.close_round(cfg.start_time if now is None else now)

    def fetch_global(self, round_index: int) -> ModelParams:
        """Resolve the round's GlobalModel anchor, fetch the blob and check it against the anchored hash."""
        if round_index not in self.global_anchors:
            raise NotFinalized(f"no global model finalized for round {round_index}")
        block_id, cid = self.global_anchors[round_index]
        node = self.ledger.nodes[self.adapter.entry_node]
        block = node.known_blocks.get(block_id)
        if block is None or decode_anchor(block.payload).content_hash != cid:
            raise IntegrityFailure(f"round {round_index} anchor does not commit to {cid[:12]}")
        blob = self.store.get(cid)
        if not self.store.verify(cid, blob):
            raise IntegrityFailure(f"global blob for round {round_index} does not match its anchor")
        return deserialize_params(blob)

    def reliability(self, threshold: float) -> Dict[str, Reliability]:
        return self.reputation.classify_all(threshold)
