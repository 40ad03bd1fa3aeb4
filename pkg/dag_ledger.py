"""
Permissioned Tangle-style DAG ledger: blocks, tip selection, gossip between ledger nodes and
milestone-based confirmation.

Block ids are BLAKE2b-256 digests (hex) of the canonical encoding:

    u32 parent_count | parent_count x 32-byte parent id | u32 payload_len | payload |
    u32 issuer_len | issuer (utf-8) | u64 issued_at (microseconds)

All integers are big-endian.
"""
import json
import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from config import Config
from utils import digest_hex, quantize_time, to_micros

logger = logging.getLogger(__name__)

MILESTONE_MARKER = b"\x00MILESTONE"
GENESIS_ISSUER = "genesis"
EPS = 1e-9


class LedgerError(Exception):
    """Base class for ledger errors."""


class PayloadTooLarge(LedgerError):
    pass


class UnknownParent(LedgerError):
    pass


class EmptyLedger(LedgerError):
    pass


class TooEarly(LedgerError):
    pass


class InvalidBlock(LedgerError):
    pass


@dataclass(frozen=True)
class Block:
    parents: Tuple[str, ...]
    payload: bytes
    issuer: str
    issued_at: float
    id: str

    @property
    def is_genesis(self) -> bool:
        return not self.parents


@dataclass(frozen=True)
class Milestone:
    block: Block
    index: int
    confirmed: frozenset


@dataclass
class Violation:
    kind: str
    block_id: str
    detail: str = ""

    def to_dict(self) -> Dict:
        return {"kind": self.kind, "block_id": self.block_id, "detail": self.detail}


@dataclass
class NodeState:
    node_id: str
    known_blocks: Dict[str, Block] = field(default_factory=dict)
    tips: Set[str] = field(default_factory=set)
    confirmed: Set[str] = field(default_factory=set)
    inbox: Deque[Tuple[Block, float]] = field(default_factory=deque)
    # parent id -> blocks waiting for it
    orphans: Dict[str, List[Block]] = field(default_factory=dict)
    confirmed_at: Dict[str, float] = field(default_factory=dict)
    confirmed_by: Dict[str, int] = field(default_factory=dict)
    delays: Dict[str, float] = field(default_factory=dict)

    def orphan_count(self) -> int:
        return len({b.id for waiting in self.orphans.values() for b in waiting})


# --- Encoding ---

def encode_block(parents: Sequence[str], payload: bytes, issuer: str, issued_at: float) -> bytes:
    """Canonical length-prefixed encoding that block ids are derived from."""
    issuer_bytes = issuer.encode("utf-8")
    parts = [struct.pack(">I", len(parents))]
    for parent in parents:
        raw = bytes.fromhex(parent)
        if len(raw) != 32:
            raise InvalidBlock(f"parent id must be 32 bytes, got {len(raw)}")
        parts.append(raw)
    parts.append(struct.pack(">I", len(payload)))
    parts.append(bytes(payload))
    parts.append(struct.pack(">I", len(issuer_bytes)))
    parts.append(issuer_bytes)
    parts.append(struct.pack(">Q", to_micros(issued_at)))
    return b"".join(parts)


def derive_block_id(parents: Sequence[str], payload: bytes, issuer: str, issued_at: float) -> str:
    return digest_hex(encode_block(parents, payload, issuer, issued_at))


def genesis_block() -> Block:
    """The single empty-payload, parentless block every node starts from."""
    return Block(parents=(), payload=b"", issuer=GENESIS_ISSUER, issued_at=0.0,
                 id=derive_block_id((), b"", GENESIS_ISSUER, 0.0))


def milestone_payload(index: int) -> bytes:
    return MILESTONE_MARKER + struct.pack(">Q", index)


def is_milestone(block: Block) -> bool:
    return block.payload.startswith(MILESTONE_MARKER) and len(block.payload) == len(MILESTONE_MARKER) + 8


def milestone_index(block: Block) -> int:
    if not is_milestone(block):
        raise InvalidBlock(f"block {block.id[:12]} is not a milestone")
    return struct.unpack(">Q", block.payload[len(MILESTONE_MARKER):])[0]


def is_anchor(block: Block) -> bool:
    """True for data-carrying blocks (neither genesis nor milestone)."""
    return not block.is_genesis and not is_milestone(block)


def new_node_state(node_id: str) -> NodeState:
    genesis = genesis_block()
    return NodeState(node_id=node_id, known_blocks={genesis.id: genesis}, tips={genesis.id})


# --- Operations ---

def create_block(state: NodeState, parents: Sequence[str], payload: bytes, issuer: str, now: float) -> Block:
    """
    Build a block over known parents. Pure: the state is only read.

    Raises PayloadTooLarge above 32 KB and UnknownParent for parents the node has not seen.
    """
    if len(payload) > Config.MAX_PAYLOAD_BYTES:
        raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {Config.MAX_PAYLOAD_BYTES}")
    if not 1 <= len(parents) <= Config.MAX_PARENTS:
        raise InvalidBlock(f"a block needs 1-{Config.MAX_PARENTS} parents, got {len(parents)}")
    for parent in parents:
        if parent not in state.known_blocks:
            raise UnknownParent(f"parent {parent[:12]} unknown to {state.node_id}")
    issued_at = quantize_time(now)
    ordered = tuple(parents)
    return Block(parents=ordered, payload=bytes(payload), issuer=issuer, issued_at=issued_at,
                 id=derive_block_id(ordered, payload, issuer, issued_at))


def select_tips(state: NodeState, k: int, rng: np.random.Generator) -> List[str]:
    """Sample min(k, |tips|) distinct tips uniformly."""
    if not state.known_blocks or not state.tips:
        raise EmptyLedger(f"node {state.node_id} has no tips")
    ordered = sorted(state.tips)
    take = min(k, len(ordered))
    picks = rng.choice(len(ordered), size=take, replace=False)
    return [ordered[i] for i in picks]


def _check_well_formed(block: Block) -> None:
    if len(block.payload) > Config.MAX_PAYLOAD_BYTES:
        raise PayloadTooLarge(f"block {block.id[:12]} payload too large")
    if len(block.parents) > Config.MAX_PARENTS:
        raise InvalidBlock(f"block {block.id[:12]} has {len(block.parents)} parents")
    if not block.parents and block.id != genesis_block().id:
        raise InvalidBlock(f"parentless block {block.id[:12]} is not genesis")
    if derive_block_id(block.parents, block.payload, block.issuer, block.issued_at) != block.id:
        raise InvalidBlock(f"block id {block.id[:12]} does not match content")


def _attach(state: NodeState, block: Block, buffer_orphans: bool = True) -> List[Block]:
    """Attach a block and any orphans it unblocks; returns the newly attached blocks."""
    if block.id in state.known_blocks:
        return []
    _check_well_formed(block)
    missing = [p for p in block.parents if p not in state.known_blocks]
    if missing:
        if not buffer_orphans:
            raise UnknownParent(f"parent {missing[0][:12]} unknown to {state.node_id}")
        for parent in missing:
            waiting = state.orphans.setdefault(parent, [])
            if all(b.id != block.id for b in waiting):
                waiting.append(block)
        logger.debug(f"{state.node_id}: buffered {block.id[:12]} waiting for {len(missing)} parent(s)")
        return []

    attached = []
    queue = deque([block])
    while queue:
        current = queue.popleft()
        if current.id in state.known_blocks:
            continue
        if any(p not in state.known_blocks for p in current.parents):
            continue
        state.known_blocks[current.id] = current
        state.tips.add(current.id)
        for parent in current.parents:
            state.tips.discard(parent)
        attached.append(current)
        for waiting in state.orphans.pop(current.id, []):
            queue.append(waiting)
    return attached


def attach_block(state: NodeState, block: Block, buffer_orphans: bool = True) -> NodeState:
    """
    Add a block to the node. Duplicates are ignored; blocks with unknown parents are buffered and
    attached once the parents arrive (or UnknownParent is raised when buffering is off).
    """
    _attach(state, block, buffer_orphans=buffer_orphans)
    return state


def past_cone(state: NodeState, roots: Iterable[str], stop: Optional[Set[str]] = None) -> Set[str]:
    """Every known block reachable from roots by following parents (roots included)."""
    seen: Set[str] = set()
    stack = [r for r in roots if r in state.known_blocks]
    while stack:
        current = stack.pop()
        if current in seen or (stop is not None and current in stop):
            continue
        seen.add(current)
        for parent in state.known_blocks[current].parents:
            if parent in state.known_blocks and parent not in seen:
                stack.append(parent)
    return seen


def recompute_tips(state: NodeState) -> Set[str]:
    """Tips from scratch: known blocks no known block references."""
    referenced = {p for b in state.known_blocks.values() for p in b.parents}
    return set(state.known_blocks) - referenced


@dataclass
class Coordinator:
    node: NodeState
    interval_s: float = Config.MILESTONE_INTERVAL_S
    last_index: int = 0
    last_issued_at: Optional[float] = None

    def next_due(self) -> Optional[float]:
        if self.last_issued_at is None:
            return None
        return self.last_issued_at + self.interval_s


def milestone_parents(state: NodeState, before: Optional[float] = None) -> List[str]:
    """
    Current tips, most recent first, capped at the parent limit. With `before`, a tip issued at or
    after that time is replaced by its own parents, so a milestone never confirms a block issued at
    its own instant and every confirmation delay is positive.
    """
    tips = set(state.tips)
    if before is not None:
        frontier: Set[str] = set()
        stack, seen = list(tips), set()
        while stack:
            block_id = stack.pop()
            if block_id in seen:
                continue
            seen.add(block_id)
            block = state.known_blocks[block_id]
            if block.parents and block.issued_at > before - EPS:
                stack.extend(block.parents)
            else:
                frontier.add(block_id)
        tips = frontier
    ordered = sorted(tips, key=lambda t: (-state.known_blocks[t].issued_at, t))
    return ordered[:Config.MAX_PARENTS]


def issue_milestone(coordinator: Coordinator, index: int, now: float) -> Milestone:
    """Issue the next milestone over the coordinator node's current tips."""
    due = coordinator.next_due()
    if due is not None and now + EPS < due:
        raise TooEarly(f"milestone {index} at t={now:.3f} before t={due:.3f}")
    if index != coordinator.last_index + 1:
        raise InvalidBlock(f"milestone index {index} does not follow {coordinator.last_index}")
    state = coordinator.node
    parents = milestone_parents(state, before=now)
    block = create_block(state, parents, milestone_payload(index), state.node_id, now)
    cone = past_cone(state, parents)
    _attach(state, block)
    coordinator.last_index = index
    coordinator.last_issued_at = block.issued_at
    logger.debug(f"Milestone {index} at t={block.issued_at:.3f} over {len(parents)} tip(s), cone {len(cone)}")
    return Milestone(block=block, index=index, confirmed=frozenset(cone))


def confirm(state: NodeState, milestone: Milestone, now: Optional[float] = None) -> Set[str]:
    """
    Confirm the milestone's past cone on this node; returns the newly confirmed ids.

    Each newly confirmed block records its confirmation delay (milestone issue time minus the
    block's submission time) and the local confirmation time.
    """
    attach_block(state, milestone.block)
    local_time = milestone.block.issued_at if now is None else now
    newly = past_cone(state, milestone.block.parents, stop=state.confirmed)
    for block_id in newly:
        block = state.known_blocks[block_id]
        state.confirmed.add(block_id)
        state.confirmed_at[block_id] = local_time
        state.confirmed_by[block_id] = milestone.index
        state.delays[block_id] = milestone.block.issued_at - block.issued_at
    # the milestone confirms itself but is not part of its own cone
    if milestone.block.id not in state.confirmed:
        state.confirmed.add(milestone.block.id)
        state.confirmed_at[milestone.block.id] = local_time
        state.confirmed_by[milestone.block.id] = milestone.index
    return newly


def milestone_from_block(state: NodeState, block: Block) -> Milestone:
    return Milestone(block=block, index=milestone_index(block),
                     confirmed=frozenset(past_cone(state, block.parents)))


def verify_chain_integrity(state: NodeState, unreadable: Iterable[str] = ()) -> List[Violation]:
    """
    Re-derive every stored id and resolve every parent reference; violations are data. Parents
    listed in `unreadable` were already reported by the snapshot loader and are not reported again.
    """
    skip = set(unreadable)
    violations = []
    for block_id in sorted(state.known_blocks):
        block = state.known_blocks[block_id]
        try:
            derived = derive_block_id(block.parents, block.payload, block.issuer, block.issued_at)
        except (InvalidBlock, ValueError, TypeError) as e:
            violations.append(Violation("malformed_block", block_id, f"cannot re-derive id: {e}"))
        else:
            if derived != block_id or block.id != block_id:
                violations.append(Violation("id_mismatch", block_id, f"content hashes to {derived}"))
        for parent in block.parents:
            if parent not in state.known_blocks and parent not in skip:
                violations.append(Violation("dangling_parent", block_id, f"missing parent {parent}"))
    return violations


# --- Gossip network ---

class LedgerNetwork:
    """
    The ledger nodes plus their directed links. Every block a node learns is forwarded once on
    each outgoing link and delivered after the link latency, FIFO per link.

    `scheduler(at, callback)` lets an event loop wake the network when a delivery falls due; without
    one, callers drive delivery with gossip_step().
    """

    def __init__(
        self,
        node_ids: Sequence[str],
        latency: Sequence[Sequence[float]],
        scheduler: Optional[Callable[[float, Callable[[], None]], None]] = None,
        pow_cost_s: float = Config.POW_COST_S,
        max_block_rate: Optional[float] = Config.MAX_BLOCK_RATE,
    ):
        matrix = np.asarray(latency, dtype=float)
        if matrix.shape != (len(node_ids), len(node_ids)):
            raise ValueError(f"latency matrix must be {len(node_ids)}x{len(node_ids)}")
        if (matrix < 0).any():
            raise ValueError("latency matrix entries must be >= 0")
        self.node_ids = list(node_ids)
        self.nodes: Dict[str, NodeState] = {n: new_node_state(n) for n in self.node_ids}
        self.latency = matrix
        self.scheduler = scheduler
        self.pow_cost_s = pow_cost_s
        self.max_block_rate = max_block_rate
        self.links: Dict[Tuple[str, str], Deque[Tuple[float, Block]]] = {
            (a, b): deque() for a in self.node_ids for b in self.node_ids if a != b
        }
        self._busy_until: Dict[str, float] = {n: 0.0 for n in self.node_ids}
        self._last_attach: Dict[str, Optional[float]] = {n: None for n in self.node_ids}
        self.on_milestone: Optional[Callable[[str, Milestone, Set[str], float], None]] = None

    def link_latency(self, src: str, dst: str) -> float:
        return float(self.latency[self.node_ids.index(src), self.node_ids.index(dst)])

    def _forward(self, src: str, blocks: Iterable[Block], now: float) -> None:
        for block in blocks:
            for dst in self.node_ids:
                if dst == src:
                    continue
                deliver_at = now + self.link_latency(src, dst)
                self.links[(src, dst)].append((deliver_at, block))
                self.nodes[dst].inbox.append((block, deliver_at))
                if self.scheduler is not None:
                    self.scheduler(deliver_at, lambda t=deliver_at: gossip_step(self, t))

    def learn(self, node_id: str, block: Block, now: float) -> List[Block]:
        """Attach on one node, confirm any milestones it unblocked, and gossip onwards."""
        state = self.nodes[node_id]
        attached = _attach(state, block)
        for b in attached:
            if is_milestone(b) and b.issuer != node_id:
                milestone = milestone_from_block(state, b)
                newly = confirm(state, milestone, now=now)
                if self.on_milestone is not None:
                    self.on_milestone(node_id, milestone, newly, now)
        self._forward(node_id, attached, now)
        return attached

    def attach_time(self, node_id: str, now: float) -> float:
        """When a block submitted now would be attached, given PoW cost and rate cap."""
        start = max(now, self._busy_until[node_id])
        last = self._last_attach[node_id]
        if self.max_block_rate is not None and last is not None:
            start = max(start, last + 1.0 / self.max_block_rate)
        return start + self.pow_cost_s

    def submit(self, node_id: str, payload: bytes, now: float, rng: np.random.Generator,
               k: int = Config.TIP_PARENTS) -> Block:
        """
        Create a block on the entry node over k uniformly selected tips. The block carries the
        submission time; it is attached once the node's PoW cost and rate cap allow.
        """
        state = self.nodes[node_id]
        parents = select_tips(state, k, rng)
        block = create_block(state, parents, payload, node_id, now)
        at = self.attach_time(node_id, block.issued_at)
        self._busy_until[node_id] = at
        self._last_attach[node_id] = at
        if at <= now + EPS or self.scheduler is None:
            self.learn(node_id, block, now if self.scheduler is not None else at)
        else:
            self.scheduler(at, lambda: self.learn(node_id, block, at))
        return block

    def issue_milestone(self, coordinator: Coordinator, now: float) -> Tuple[Milestone, Set[str]]:
        milestone = issue_milestone(coordinator, coordinator.last_index + 1, now)
        newly = confirm(coordinator.node, milestone)
        self._forward(coordinator.node.node_id, [milestone.block], now)
        return milestone, newly

    def quiescent(self) -> bool:
        return all(not q for q in self.links.values())


def gossip_step(network: LedgerNetwork, now: float) -> Dict[str, NodeState]:
    """
    Deliver every queued block whose delivery time has come, link by link in FIFO order,
    repeating until nothing more is due (zero-latency links cascade within one step).
    """
    delivered = True
    while delivered:
        delivered = False
        for (src, dst), queue in network.links.items():
            while queue and queue[0][0] <= now + EPS:
                deliver_at, block = queue.popleft()
                inbox = network.nodes[dst].inbox
                if inbox and inbox[0][0].id == block.id:
                    inbox.popleft()
                else:
                    try:
                        inbox.remove((block, deliver_at))
                    except ValueError:
                        pass
                network.learn(dst, block, deliver_at)
                delivered = True
    return network.nodes


# --- Snapshots ---

def snapshot_lines(state: NodeState) -> List[str]:
    """One JSON record per block, ordered by (issued_at, id), binary fields hex-encoded."""
    ordered = sorted(state.known_blocks.values(), key=lambda b: (to_micros(b.issued_at), b.id))
    lines = []
    for block in ordered:
        record = {
            "id": block.id,
            "parents": list(block.parents),
            "payload": block.payload.hex(),
            "issuer": block.issuer.encode("utf-8").hex(),
            "issued_at_us": to_micros(block.issued_at),
            "confirmed_by": state.confirmed_by.get(block.id),
        }
        lines.append(json.dumps(record, sort_keys=True, separators=(",", ":")))
    return lines


def load_snapshot(lines: Iterable[str], node_id: str = "snapshot") -> Tuple[NodeState, List[Violation]]:
    """
    Rebuild a node state from snapshot lines without re-deriving ids, so tampered content shows up
    in verify_chain_integrity instead of being silently re-hashed. Lines that cannot be decoded are
    left out of the state and come back as `malformed_record` violations.
    """
    state = NodeState(node_id=node_id)
    violations = []
    for n, line in enumerate(lines, start=1):
        try:
            record = json.loads(line)
        except ValueError as e:
            violations.append(Violation("malformed_record", "", f"line {n}: not JSON ({e})"))
            continue
        record_id = record.get("id") if isinstance(record, dict) else None
        if not isinstance(record_id, str):
            violations.append(Violation("malformed_record", "", f"line {n}: no block id"))
            continue
        try:
            block = Block(
                parents=tuple(str(p) for p in record["parents"]),
                payload=bytes.fromhex(record["payload"]),
                issuer=bytes.fromhex(record["issuer"]).decode("utf-8", errors="replace"),
                issued_at=int(record["issued_at_us"]) / 1_000_000,
                id=record_id,
            )
            confirmed_by = record.get("confirmed_by")
            confirmed_by = None if confirmed_by is None else int(confirmed_by)
        except (ValueError, KeyError, TypeError) as e:
            violations.append(Violation("malformed_record", record_id, f"line {n}: {e}"))
            continue
        state.known_blocks[block.id] = block
        if confirmed_by is not None:
            state.confirmed.add(block.id)
            state.confirmed_by[block.id] = confirmed_by
    state.tips = recompute_tips(state)
    return state, violations
