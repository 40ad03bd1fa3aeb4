"""
Service layer orchestrating experiments: builds a seeded world per repeat, runs every round through
the simulated network, and collects metrics, artifacts and audits.
"""
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

import reporting
from config import ExperimentConfig, sweep_configs
from dag_ledger import Coordinator, LedgerNetwork, is_anchor, load_snapshot, verify_chain_integrity
from dapp_manager import (
    AnchorKind,
    DAppManager,
    DeviceRegistry,
    MalformedSubmission,
    QuorumNotMet,
    RoundConfig,
    RoundResult,
    decode_anchor,
    decode_submission,
)
from data_fetcher import fetch_csv_dataset, make_synthetic_dataset
from fl_core import Shapes, deserialize_params, init_model, serialize_params
from metrics import MetricsReport, build_report, compute_tps, delay_samples
from offchain_store import ContentStore
from simnet import (
    DeviceActor,
    DeviceRoundConfig,
    DeviceTiming,
    EventLog,
    MessageBus,
    SimClock,
    TopicMessage,
    device_round,
    global_topic,
    update_topic,
)
from utils import digest_hex, read_lines, seeded_rng

logger = logging.getLogger(__name__)

# Independent random streams per (seed, repeat)
STREAM_DATA, STREAM_INIT, STREAM_TIPS, STREAM_PHASE, STREAM_JITTER, STREAM_TRAIN = range(6)

ADAPTER = "adapter"
AGGREGATOR = "aggregator"


@dataclass
class RepeatOutcome:
    repeat: int
    tps: float
    delays: List[float]
    rounds: List[Dict]
    final_scores: Dict[str, float] = field(default_factory=dict)
    final_reliability: Dict[str, str] = field(default_factory=dict)
    final_accuracy: float = 0.0
    adversaries: Dict[str, str] = field(default_factory=dict)
    anchors: int = 0
    max_payload_bytes: int = 0
    payload_sizes: Dict[str, List[int]] = field(default_factory=dict)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    report: MetricsReport
    repeats: List[RepeatOutcome]


def assign_adversaries(cfg: ExperimentConfig, device_ids: List[str]) -> Dict[str, str]:
    """Adversary kinds go to the highest-numbered devices, in the order they were given."""
    assigned = {}
    pool = list(reversed(device_ids))
    for kind, count in cfg.adversaries:
        for _ in range(count):
            assigned[pool.pop(0)] = kind
    return assigned


def load_dataset(cfg: ExperimentConfig, repeat: int):
    key = (cfg.seed, repeat, STREAM_DATA)
    if cfg.dataset_csv:
        return fetch_csv_dataset(cfg.dataset_csv, cfg.n_clients, key, cfg.non_iid_alpha)
    return make_synthetic_dataset(
        key,
        n_clients=cfg.n_clients,
        non_iid_alpha=cfg.non_iid_alpha,
        n_classes=cfg.n_classes,
        input_dim=cfg.input_dim,
        samples_per_client=cfg.samples_per_client,
        validation_size=cfg.validation_size,
    )


class SimulationWorld:
    """
    One repeat's world: clock, bus, ledger nodes with their coordinator, the DApp manager and the
    device actors, all seeded from (seed, repeat).
    """

    def __init__(self, cfg: ExperimentConfig, repeat: int):
        self.cfg = cfg
        self.repeat = repeat
        key = (cfg.seed, repeat)
        self.clock = SimClock(realtime=cfg.realtime)
        self.events = EventLog()
        self.bus = MessageBus(self.clock, cfg.bus_latency_s)

        node_ids = [f"node{i + 1}" for i in range(cfg.ledger_nodes)]
        latency = np.full((len(node_ids), len(node_ids)), cfg.gossip_latency_s)
        np.fill_diagonal(latency, 0.0)
        self.ledger = LedgerNetwork(node_ids, latency, scheduler=self.clock.schedule,
                                    pow_cost_s=cfg.pow_cost_s, max_block_rate=cfg.max_block_rate)
        self.ledger.on_milestone = self._on_milestone_received
        self.entry_node = node_ids[0]
        self.coordinator = Coordinator(self.ledger.nodes[node_ids[-1]], cfg.milestone_interval_s)

        shards, validation = load_dataset(cfg, repeat)
        n_classes = cfg.n_classes
        if cfg.dataset_csv:
            n_classes = int(max(max(s.labels.max() for s in shards), validation.labels.max())) + 1
        self.shapes = Shapes(shards[0].features.shape[1], cfg.hidden_dim, n_classes)

        self.store = ContentStore()
        self.registry = DeviceRegistry()
        device_ids = [s.owner for s in shards]
        self.adversaries = assign_adversaries(cfg, device_ids)
        timing = DeviceTiming(cfg.compute_base_s, cfg.compute_sigma, cfg.cold_start_base_s,
                              cfg.cold_start_sigma, cfg.network_delay_s)
        self.actors: List[DeviceActor] = []
        for i, shard in enumerate(shards):
            credential = digest_hex(f"psk:{cfg.seed}:{repeat}:{shard.owner}".encode("utf-8"))
            self.registry.enroll(shard.owner, credential)
            self.actors.append(DeviceActor(
                device_id=shard.owner,
                shard=shard,
                credential=credential,
                jitter_rng=seeded_rng(*key, STREAM_JITTER, i),
                timing=timing,
                train_seed=(*key, STREAM_TRAIN, i),
                adversary=self.adversaries.get(shard.owner),
            ))

        self.manager = DAppManager(
            self.registry, self.store, self.ledger, self.entry_node, validation,
            init_model((*key, STREAM_INIT), self.shapes), seeded_rng(*key, STREAM_TIPS),
            initial_reputation=cfg.initial_reputation, on_anchor=self._on_anchor,
        )
        self.device_cfg = DeviceRoundConfig(cfg.exp_id, cfg.local_epochs, cfg.learning_rate, cfg.batch_size)
        self.results: List[RoundResult] = []
        self.anchor_ids: List[str] = []
        self.payload_sizes: Dict[str, List[int]] = {k.value: [] for k in AnchorKind}
        self.finished = False
        self._closing = False
        self._phase = float(seeded_rng(*key, STREAM_PHASE).uniform(0.0, cfg.milestone_interval_s))

        self.bus.subscribe(update_topic(cfg.exp_id, "+"), self._on_update)
        for actor in self.actors:
            self.bus.subscribe(global_topic(cfg.exp_id, "+"), lambda msg, a=actor: self._on_global(a, msg))

    # --- ledger side ---

    def _on_anchor(self, record, block, now: float) -> None:
        self.anchor_ids.append(block.id)
        self.payload_sizes[record.kind.value].append(len(block.payload))
        self.events.record(now, ADAPTER, "anchor_submitted", block.id)

    def _on_milestone_received(self, node_id: str, milestone, newly, now: float) -> None:
        self.events.record(now, node_id, "milestone_received", milestone.block.id)

    def _unconfirmed(self) -> int:
        confirmed = self.coordinator.node.confirmed
        return sum(1 for b in self.anchor_ids if b not in confirmed)

    def _milestone(self) -> None:
        now = self.clock.now
        milestone, newly = self.ledger.issue_milestone(self.coordinator, now)
        node = self.coordinator.node
        self.events.record(milestone.block.issued_at, node.node_id, "milestone_issued", milestone.block.id)
        confirmed = sorted(
            (b for b in newly if is_anchor(node.known_blocks[b])),
            key=lambda b: (node.known_blocks[b].issued_at, b),
        )
        for block_id in confirmed:
            self.events.record(milestone.block.issued_at, node.node_id, "anchor_confirmed", block_id)
        if not self.finished or self._unconfirmed():
            self.clock.schedule(self.coordinator.next_due(), self._milestone)

    # --- round side ---

    def _start_round(self, round_index: int) -> None:
        now = self.clock.now
        cfg = self.cfg
        round_cfg = RoundConfig(
            round=round_index, start_time=now, deadline=now + cfg.round_deadline_s,
            quorum=cfg.effective_quorum, alpha=cfg.alpha, threshold=cfg.threshold,
            penalty_alpha=cfg.penalty_alpha, reputation_enabled=cfg.reputation_enabled,
            outlier_factor=cfg.outlier_factor,
        )
        self.manager.open_round(round_cfg)
        self._closing = False
        blob = serialize_params(self.manager.global_params)
        self.events.record(now, AGGREGATOR, "round_opened", digest_hex(blob))
        self.bus.publish(global_topic(cfg.exp_id, round_index), blob)
        self.clock.schedule(round_cfg.deadline, lambda: self._deadline(round_index))

    def _on_global(self, actor: DeviceActor, msg: TopicMessage) -> None:
        round_index = int(msg.topic.rsplit("/", 1)[1])
        device_round(actor, deserialize_params(msg.payload), round_index, self.device_cfg,
                     self.clock, self.bus, self.events)

    def _on_update(self, msg: TopicMessage) -> None:
        now = self.clock.now
        self.events.record(now, ADAPTER, "update_received", digest_hex(msg.payload))
        try:
            submission = decode_submission(msg.payload)
        except MalformedSubmission as e:
            logger.warning(f"Unreadable submission on {msg.topic}: {e}")
            return
        self.manager.ingest_update(submission, now)
        if self.manager.ready_to_close(now):
            self._schedule_close()

    def _deadline(self, round_index: int) -> None:
        current = self.manager.current
        if current is not None and current.round == round_index:
            self._schedule_close()

    def _schedule_close(self) -> None:
        if self._closing:
            return
        self._closing = True
        self.clock.schedule(self.clock.now + self.cfg.aggregation_delay_s, self._close)

    def _close(self) -> None:
        now = self.clock.now
        try:
            result = self.manager.close_round(now)
        except QuorumNotMet as e:
            result = e.result
        self.results.append(result)
        self.events.record(now, AGGREGATOR, "round_closed", result.global_hash or "")
        if result.round < self.cfg.rounds:
            self._start_round(result.round + 1)
        else:
            self.finished = True

    def run(self) -> RepeatOutcome:
        self.clock.schedule(self._phase, self._milestone)
        self.clock.schedule(0.0, lambda: self._start_round(1))
        self.clock.run()
        if self._unconfirmed():
            logger.warning(f"Repeat {self.repeat}: {self._unconfirmed()} anchors left unconfirmed")

        last = self.results[-1]
        final_accuracy = last.global_accuracy
        outcome = RepeatOutcome(
            repeat=self.repeat,
            tps=compute_tps(self.events, self.cfg.span_mode),
            delays=delay_samples(self.events),
            rounds=[r.to_record() for r in self.results],
            final_scores=self.manager.reputation.scores(),
            final_reliability={d: r.value for d, r in self.manager.reliability(self.cfg.threshold).items()},
            final_accuracy=final_accuracy,
            adversaries=dict(sorted(self.adversaries.items())),
            anchors=len(self.anchor_ids),
            max_payload_bytes=max(len(b.payload) for b in self.coordinator.node.known_blocks.values()),
            payload_sizes=self.payload_sizes,
        )
        logger.info(f"Repeat {self.repeat}: {outcome.anchors} anchors, TPS {outcome.tps:.3f}, "
                    f"final accuracy {final_accuracy:.3f}")
        return outcome

    def snapshot_node(self):
        return self.coordinator.node


def repeat_dir(cfg: ExperimentConfig, repeat: int, out_root: Optional[str] = None) -> str:
    return os.path.join(out_root or cfg.out, cfg.exp_id, f"repeat_{repeat}")


def run_repeat(cfg: ExperimentConfig, repeat: int, write: bool = True) -> RepeatOutcome:
    """Run one seeded repeat and, when asked, persist its artifacts."""
    world = SimulationWorld(cfg, repeat)
    outcome = world.run()
    if write:
        reporting.write_repeat_artifacts(world, outcome, repeat_dir(cfg, repeat))
    return outcome


def _run_repeat_job(args: Tuple[ExperimentConfig, int, bool]) -> RepeatOutcome:
    cfg, repeat, write = args
    return run_repeat(cfg, repeat, write)


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """
    Run every repeat (sequentially, or on `cfg.workers` processes) and merge the results in repeat
    order so the report is identical either way.
    """
    logger.info(f"Experiment {cfg.exp_id}: {cfg.rounds} rounds x {cfg.repeats} repeats, {cfg.n_clients} clients")
    jobs = [(cfg, k, write) for k in range(cfg.repeats)]
    if cfg.workers > 1 and cfg.repeats > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            outcomes = list(pool.map(_run_repeat_job, jobs))
    else:
        outcomes = [_run_repeat_job(job) for job in jobs]

    delays = [d for o in outcomes for d in o.delays]
    report = build_report([o.tps for o in outcomes], delays, cfg.echo(), cfg.rounds, cfg.repeats)
    report.extras = {
        "exp_id": cfg.exp_id,
        "final_accuracy": [o.final_accuracy for o in outcomes],
        "max_payload_bytes": max(o.max_payload_bytes for o in outcomes),
        "round_records": sum(len(o.rounds) for o in outcomes),
    }
    if write:
        reporting.write_experiment_report(report, os.path.join(cfg.out, cfg.exp_id), cfg.format)
    if report.variability_pct is not None:
        logger.info(f"Experiment {cfg.exp_id}: TPS {report.tps_mean:.3f} +/- {report.tps_std:.3f} "
                    f"({report.variability_pct:.2f}%), median delay {report.delay_quantiles['p50']:.2f}s")
    return ExperimentResult(cfg, report, outcomes)


def run_sweep(cfg: ExperimentConfig, rounds_list: Optional[Tuple[int, ...]] = None,
              write: bool = True) -> List[ExperimentResult]:
    """One experiment per sweep point plus a merged summary."""
    configs = sweep_configs(cfg) if rounds_list is None else sweep_configs(cfg, tuple(rounds_list))
    results = [run_experiment(c, write=write) for c in configs]
    if write:
        reporting.write_sweep_summary([r.report for r in results], cfg.out)
    return results


# --- Audits ---

def audit_repeat(path: str) -> List[Dict]:
    """
    Integrity audit of one persisted repeat: ledger ids and parent links, off-chain blob hashes, and
    anchors that point at content or contributions that are missing.
    """
    snapshot_path = os.path.join(path, reporting.SNAPSHOT_FILE)
    # undecodable bytes surface as malformed records rather than aborting the audit
    state, unreadable = load_snapshot(read_lines(snapshot_path, errors="replace"))
    violations = [v.to_dict() for v in unreadable]
    unreadable_ids = {v.block_id for v in unreadable if v.block_id}
    chain = verify_chain_integrity(state, unreadable=unreadable_ids)
    violations.extend(v.to_dict() for v in chain)
    tampered = {v["block_id"] for v in violations if v["kind"] in ("id_mismatch", "malformed_block")}

    blob_dir = os.path.join(path, reporting.BLOB_DIR)
    store = ContentStore.open(blob_dir) if os.path.isdir(blob_dir) else ContentStore()
    violations.extend(store.audit())

    for block_id in sorted(state.known_blocks):
        block = state.known_blocks[block_id]
        if block_id in tampered or not is_anchor(block):
            continue
        try:
            record = decode_anchor(block.payload)
        except MalformedSubmission:
            violations.append({"kind": "malformed_anchor", "block_id": block_id, "detail": "payload is not an anchor record"})
            continue
        if not store.has(record.content_hash):
            violations.append({"kind": "anchor_unresolved", "block_id": block_id,
                               "detail": f"content {record.content_hash} not in blob store"})
        for contributor in record.contributing:
            if contributor not in state.confirmed and contributor not in unreadable_ids:
                violations.append({"kind": "unconfirmed_contribution", "block_id": block_id,
                                   "detail": f"contributing block {contributor} not confirmed"})
    return violations


def find_repeat_dirs(path: str) -> List[str]:
    found = []
    for root, dirs, files in os.walk(path):
        dirs.sort()
        if reporting.SNAPSHOT_FILE in files:
            found.append(root)
    return found


def audit_path(path: str) -> Dict[str, List[Dict]]:
    """Audit every persisted repeat under `path`."""
    dirs = find_repeat_dirs(path)
    if not dirs:
        raise FileNotFoundError(f"no ledger snapshots under {path}")
    return {d: audit_repeat(d) for d in dirs}


def recompute_report(exp_dir: str) -> MetricsReport:
    """Rebuild an experiment's MetricsReport from its persisted event logs and config echo."""
    with open(os.path.join(exp_dir, reporting.CONFIG_FILE), "r", encoding="utf-8") as f:
        echo = json.load(f)
    span_mode = echo.get("span_mode", "submission")
    repeat_dirs = sorted(
        (d for d in os.listdir(exp_dir) if d.startswith("repeat_")),
        key=lambda d: int(d.split("_", 1)[1]),
    )
    tps, delays = [], []
    for d in repeat_dirs:
        events = EventLog.from_lines(read_lines(os.path.join(exp_dir, d, reporting.EVENTS_FILE)))
        tps.append(compute_tps(events, span_mode))
        delays.extend(delay_samples(events))
    return build_report(tps, delays, echo, int(echo["rounds"]), len(repeat_dirs))
