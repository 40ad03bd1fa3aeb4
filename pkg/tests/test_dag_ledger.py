import unittest
import sys
import os
import json
from collections import Counter

import numpy as np

# Add the parent directory to sys.path to import the module
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from dag_ledger import (
    Block,
    Coordinator,
    EmptyLedger,
    LedgerNetwork,
    Milestone,
    PayloadTooLarge,
    TooEarly,
    UnknownParent,
    attach_block,
    confirm,
    create_block,
    derive_block_id,
    genesis_block,
    gossip_step,
    is_milestone,
    issue_milestone,
    load_snapshot,
    new_node_state,
    past_cone,
    recompute_tips,
    select_tips,
    snapshot_lines,
    verify_chain_integrity,
)


def chain(state, n, start=1.0, issuer="node1"):
    """Attach a linear chain of n blocks on top of the current single tip."""
    blocks = []
    parent = next(iter(state.tips))
    for i in range(n):
        block = create_block(state, [parent], f"tx-{i}".encode(), issuer, start + i)
        attach_block(state, block)
        blocks.append(block)
        parent = block.id
    return blocks


class TestCreateBlock(unittest.TestCase):
    """Block creation and id derivation"""

    def setUp(self):
        self.state = new_node_state("node1")
        self.genesis = genesis_block()

    def test_deterministic_id(self):
        """Same inputs give the same id"""
        a = create_block(self.state, [self.genesis.id], b"payload", "node1", 1.5)
        b = create_block(self.state, [self.genesis.id], b"payload", "node1", 1.5)
        self.assertEqual(a.id, b.id)
        self.assertEqual(len(a.id), 64)

    def test_payload_flip_changes_id(self):
        a = create_block(self.state, [self.genesis.id], b"payload", "node1", 1.5)
        b = create_block(self.state, [self.genesis.id], b"paylobd", "node1", 1.5)
        self.assertNotEqual(a.id, b.id)

    def test_payload_too_large(self):
        with self.assertRaises(PayloadTooLarge):
            create_block(self.state, [self.genesis.id], b"x" * 33_000, "node1", 1.0)

    def test_payload_at_limit_is_accepted(self):
        block = create_block(self.state, [self.genesis.id], b"x" * 32_768, "node1", 1.0)
        self.assertEqual(len(block.payload), 32_768)

    def test_unknown_parent(self):
        with self.assertRaises(UnknownParent):
            create_block(self.state, ["ab" * 32], b"data", "node1", 1.0)

    def test_genesis_is_parentless_and_empty(self):
        self.assertEqual(self.genesis.parents, ())
        self.assertEqual(self.genesis.payload, b"")
        self.assertEqual(self.genesis.id, derive_block_id((), b"", self.genesis.issuer, 0.0))


class TestSelectTips(unittest.TestCase):
    """Uniform tip selection"""

    def test_single_tip(self):
        state = new_node_state("node1")
        tips = select_tips(state, 2, np.random.default_rng(1))
        self.assertEqual(tips, [genesis_block().id])

    def test_seeded_determinism(self):
        state = new_node_state("node1")
        g = genesis_block().id
        for i in range(5):
            attach_block(state, create_block(state, [g], f"t{i}".encode(), "node1", 1.0 + i))
        self.assertEqual(len(state.tips), 5)
        first = select_tips(state, 2, np.random.default_rng(42))
        second = select_tips(state, 2, np.random.default_rng(42))
        self.assertEqual(first, second)
        self.assertEqual(len(set(first)), 2)

    def test_uniform_frequencies(self):
        """Each of 4 tips is picked about a quarter of the time"""
        state = new_node_state("node1")
        g = genesis_block().id
        for i in range(4):
            attach_block(state, create_block(state, [g], f"t{i}".encode(), "node1", 1.0 + i))
        rng = np.random.default_rng(7)
        counts = Counter(select_tips(state, 1, rng)[0] for _ in range(10_000))
        self.assertEqual(len(counts), 4)
        for count in counts.values():
            self.assertLess(abs(count / 10_000 - 0.25), 0.05)

    def test_empty_ledger(self):
        state = new_node_state("node1")
        state.tips.clear()
        with self.assertRaises(EmptyLedger):
            select_tips(state, 2, np.random.default_rng(0))


class TestAttachBlock(unittest.TestCase):
    """Attaching, idempotence and orphan buffering"""

    def test_genesis_child_becomes_only_tip(self):
        state = new_node_state("node1")
        child = create_block(state, [genesis_block().id], b"a", "node1", 1.0)
        attach_block(state, child)
        self.assertEqual(state.tips, {child.id})

    def test_idempotent(self):
        state = new_node_state("node1")
        child = create_block(state, [genesis_block().id], b"a", "node1", 1.0)
        attach_block(state, child)
        known, tips = dict(state.known_blocks), set(state.tips)
        attach_block(state, child)
        self.assertEqual(state.known_blocks, known)
        self.assertEqual(state.tips, tips)

    def test_out_of_order_arrival(self):
        """Child before parent is buffered, then both attach"""
        source = new_node_state("src")
        parent, child = chain(source, 2)

        in_order = new_node_state("a")
        attach_block(in_order, parent)
        attach_block(in_order, child)

        reordered = new_node_state("b")
        attach_block(reordered, child)
        self.assertNotIn(child.id, reordered.known_blocks)
        self.assertEqual(reordered.orphan_count(), 1)
        attach_block(reordered, parent)

        self.assertEqual(set(in_order.known_blocks), set(reordered.known_blocks))
        self.assertEqual(reordered.tips, {child.id})
        self.assertEqual(reordered.orphan_count(), 0)

    def test_unbuffered_unknown_parent(self):
        source = new_node_state("src")
        _, child = chain(source, 2)
        with self.assertRaises(UnknownParent):
            attach_block(new_node_state("x"), child, buffer_orphans=False)

    def test_incremental_tips_match_recomputed(self):
        state = new_node_state("node1")
        rng = np.random.default_rng(3)
        for i in range(60):
            parents = select_tips(state, 2, rng)
            attach_block(state, create_block(state, parents, f"b{i}".encode(), "node1", 0.1 * (i + 1)))
            self.assertEqual(state.tips, recompute_tips(state))


class TestMilestones(unittest.TestCase):
    """Coordinator milestones and cone confirmation"""

    def setUp(self):
        self.state = new_node_state("node2")
        self.coordinator = Coordinator(self.state, interval_s=10.0)

    def test_interval_enforced(self):
        issue_milestone(self.coordinator, 1, 20.0)
        with self.assertRaises(TooEarly):
            issue_milestone(self.coordinator, 2, 29.9)
        milestone = issue_milestone(self.coordinator, 2, 30.0)
        self.assertEqual(milestone.index, 2)

    def test_first_milestone_confirms_genesis(self):
        milestone = issue_milestone(self.coordinator, 1, 10.0)
        newly = confirm(self.state, milestone)
        self.assertEqual(newly, {genesis_block().id})
        self.assertTrue(is_milestone(milestone.block))

    def test_five_unconfirmed_blocks(self):
        blocks = chain(self.state, 5)
        milestone = issue_milestone(self.coordinator, 1, 10.0)
        newly = confirm(self.state, milestone)
        self.assertTrue({b.id for b in blocks} <= newly)
        self.assertEqual(set(milestone.confirmed), newly)

    def test_empty_delta(self):
        confirm(self.state, issue_milestone(self.coordinator, 1, 10.0))
        newly = confirm(self.state, issue_milestone(self.coordinator, 2, 20.0))
        self.assertEqual(newly, set())

    def test_chain_cone(self):
        a, b, c = chain(self.state, 3)
        milestone = issue_milestone(self.coordinator, 1, 10.0)
        self.assertIn(c.id, milestone.block.parents)
        newly = confirm(self.state, milestone)
        self.assertTrue({a.id, b.id, c.id} <= newly)

    def test_delay_recorded(self):
        block = create_block(self.state, [genesis_block().id], b"late", "node1", 9.9)
        attach_block(self.state, block)
        confirm(self.state, issue_milestone(self.coordinator, 1, 10.0))
        self.assertAlmostEqual(self.state.delays[block.id], 0.1, places=9)

    def test_block_at_milestone_instant_waits_for_next(self):
        earlier = create_block(self.state, [genesis_block().id], b"earlier", "node1", 4.0)
        attach_block(self.state, earlier)
        same = create_block(self.state, [earlier.id], b"same-instant", "node1", 10.0)
        attach_block(self.state, same)
        first = confirm(self.state, issue_milestone(self.coordinator, 1, 10.0))
        self.assertIn(earlier.id, first)
        self.assertNotIn(same.id, first)
        second = confirm(self.state, issue_milestone(self.coordinator, 2, 20.0))
        self.assertIn(same.id, second)
        self.assertAlmostEqual(self.state.delays[same.id], 10.0)

    def test_single_node_delays_positive(self):
        network = LedgerNetwork(["node1"], [[0.0]])
        coordinator = Coordinator(network.nodes["node1"], 10.0)
        rng = np.random.default_rng(2)
        blocks = [network.submit("node1", f"tx{i}".encode(), t, rng) for i, t in enumerate((3.0, 10.0))]
        network.issue_milestone(coordinator, 10.0)
        network.issue_milestone(coordinator, 20.0)
        delays = coordinator.node.delays
        self.assertTrue(all(delays[b.id] > 0.0 for b in blocks))

    def test_cone_matches_bruteforce(self):
        """Confirmed set equals reachability from the milestone parents"""
        rng = np.random.default_rng(11)
        for i in range(120):
            parents = select_tips(self.state, 2, rng)
            attach_block(self.state, create_block(self.state, parents, f"x{i}".encode(), "node1", 0.05 * (i + 1)))
        milestone = issue_milestone(self.coordinator, 1, 10.0)
        newly = confirm(self.state, milestone)

        reachable = set()
        frontier = list(milestone.block.parents)
        while frontier:
            current = frontier.pop()
            if current in reachable:
                continue
            reachable.add(current)
            frontier.extend(self.state.known_blocks[current].parents)
        self.assertEqual(newly, reachable)
        self.assertEqual(past_cone(self.state, milestone.block.parents), reachable)

    def test_confirmed_only_grows(self):
        before = set()
        for k in range(1, 4):
            chain(self.state, 3, start=10.0 * k - 5)
            confirm(self.state, issue_milestone(self.coordinator, k, 10.0 * k))
            self.assertTrue(before <= self.state.confirmed)
            before = set(self.state.confirmed)


class TestGossip(unittest.TestCase):
    """Block propagation between ledger nodes"""

    def test_delivery_after_latency(self):
        network = LedgerNetwork(["node1", "node2"], [[0, 0.05], [0.05, 0]])
        block = network.submit("node1", b"tx", 1.0, np.random.default_rng(0))
        gossip_step(network, 1.04)
        self.assertNotIn(block.id, network.nodes["node2"].known_blocks)
        gossip_step(network, 1.05)
        self.assertIn(block.id, network.nodes["node2"].known_blocks)

    def test_quiescent_states_match(self):
        network = LedgerNetwork(["node1", "node2"], [[0, 0.05], [0.05, 0]])
        rng = np.random.default_rng(5)
        for i in range(20):
            node = "node1" if i % 2 == 0 else "node2"
            network.submit(node, f"tx{i}".encode(), 0.5 * i, rng)
            gossip_step(network, 0.5 * i)
        gossip_step(network, 100.0)
        self.assertTrue(network.quiescent())
        self.assertEqual(set(network.nodes["node1"].known_blocks), set(network.nodes["node2"].known_blocks))

    def test_zero_latency_keeps_nodes_identical(self):
        network = LedgerNetwork(["node1", "node2", "node3"], np.zeros((3, 3)))
        rng = np.random.default_rng(9)
        for i in range(10):
            network.submit(f"node{i % 3 + 1}", f"tx{i}".encode(), float(i), rng)
            gossip_step(network, float(i))
            known = [set(n.known_blocks) for n in network.nodes.values()]
            self.assertEqual(known[0], known[1])
            self.assertEqual(known[1], known[2])

    def test_negative_latency_rejected(self):
        with self.assertRaises(ValueError):
            LedgerNetwork(["node1", "node2"], [[0, -1.0], [0.05, 0]])

    def test_received_milestone_confirms_locally(self):
        network = LedgerNetwork(["node1", "node2"], [[0, 0.05], [0.05, 0]])
        block = network.submit("node1", b"tx", 1.0, np.random.default_rng(0))
        gossip_step(network, 1.05)
        coordinator = Coordinator(network.nodes["node2"], 10.0)
        milestone, newly = network.issue_milestone(coordinator, 10.0)
        self.assertIn(block.id, newly)
        gossip_step(network, 10.05)
        self.assertIn(block.id, network.nodes["node1"].confirmed)
        self.assertIsInstance(milestone, Milestone)


class TestIntegrity(unittest.TestCase):
    """Ledger integrity checks and snapshots"""

    def setUp(self):
        self.state = new_node_state("node2")
        self.blocks = chain(self.state, 4)
        confirm(self.state, issue_milestone(Coordinator(self.state, 10.0), 1, 10.0))

    def test_clean_ledger(self):
        self.assertEqual(verify_chain_integrity(self.state), [])

    def test_mutated_payload(self):
        target = self.blocks[1]
        self.state.known_blocks[target.id] = Block(target.parents, b"tampered", target.issuer,
                                                   target.issued_at, target.id)
        violations = verify_chain_integrity(self.state)
        self.assertEqual(len(violations), 1)
        self.assertEqual(violations[0].kind, "id_mismatch")
        self.assertEqual(violations[0].block_id, target.id)

    def test_deleted_block_leaves_dangling_children(self):
        target = self.blocks[1]
        children = [b for b in self.state.known_blocks.values() if target.id in b.parents]
        del self.state.known_blocks[target.id]
        violations = verify_chain_integrity(self.state)
        self.assertEqual(len(violations), len(children))
        self.assertTrue(all(v.kind == "dangling_parent" for v in violations))

    def test_snapshot_reload(self):
        lines = snapshot_lines(self.state)
        self.assertEqual(len(lines), len(self.state.known_blocks))
        restored, problems = load_snapshot(lines)
        self.assertEqual(problems, [])
        self.assertEqual(set(restored.known_blocks), set(self.state.known_blocks))
        self.assertEqual(restored.confirmed, self.state.confirmed)
        self.assertEqual(restored.tips, self.state.tips)
        self.assertEqual(snapshot_lines(restored), lines)
        self.assertEqual(verify_chain_integrity(restored), [])

    def test_non_hex_parent_is_reported(self):
        target = self.blocks[2]
        self.state.known_blocks[target.id] = Block(("zz" * 32,), target.payload, target.issuer,
                                                   target.issued_at, target.id)
        violations = verify_chain_integrity(self.state)
        self.assertEqual(sorted(v.kind for v in violations), ["dangling_parent", "malformed_block"])
        self.assertTrue(all(v.block_id == target.id for v in violations))

    def test_short_parent_is_reported(self):
        target = self.blocks[2]
        self.state.known_blocks[target.id] = Block(("abcd",), target.payload, target.issuer,
                                                   target.issued_at, target.id)
        kinds = [v.kind for v in verify_chain_integrity(self.state)]
        self.assertIn("malformed_block", kinds)

    def test_unreadable_snapshot_line(self):
        lines = snapshot_lines(self.state)
        target = self.blocks[1]
        index = next(i for i, line in enumerate(lines) if json.loads(line)["id"] == target.id)
        lines[index] = lines[index].replace('"payload":"', '"payload":"`', 1)
        restored, problems = load_snapshot(lines)
        self.assertEqual([(v.kind, v.block_id) for v in problems], [("malformed_record", target.id)])
        self.assertNotIn(target.id, restored.known_blocks)
        self.assertEqual(verify_chain_integrity(restored, unreadable=[target.id]), [])

    def test_truncated_snapshot_line(self):
        lines = snapshot_lines(self.state)
        lines[-1] = lines[-1][:20]
        restored, problems = load_snapshot(lines)
        self.assertEqual([v.kind for v in problems], ["malformed_record"])
        self.assertIn("line", problems[0].detail)
        self.assertEqual(len(restored.known_blocks), len(lines) - 1)


if __name__ == "__main__":
    unittest.main()
