import unittest
import sys
import os
import tempfile

import numpy as np
import pandas as pd

# Add the parent directory to sys.path to import the module
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from dapp_manager import DeviceRegistry
from fl_core import Shapes, init_model, random_params, serialize_params
from offchain_store import ContentStore
from trust import (
    NoReliableDevices,
    OutOfRange,
    RejectReason,
    Reliability,
    ReputationRecord,
    ReputationTable,
    UpdateClaim,
    aggregation_weights,
    classify,
    incoherent_devices,
    penalize,
    sample_weights,
    update_reputation,
    verify_update,
)

SHAPES = Shapes(4, 8, 3)


class TestUpdateReputation(unittest.TestCase):
    """Exponential smoothing of reputation scores"""

    def test_alpha_one_keeps_score(self):
        record = update_reputation(ReputationRecord("d", score=0.6), 0.1, alpha=1.0)
        self.assertEqual(record.score, 0.6)

    def test_alpha_zero_takes_accuracy(self):
        record = update_reputation(ReputationRecord("d", score=0.6), 0.9, alpha=0.0)
        self.assertEqual(record.score, 0.9)

    def test_arithmetic(self):
        record = update_reputation(ReputationRecord("d", score=0.6), 0.8, alpha=0.5)
        self.assertAlmostEqual(record.score, 0.7, places=12)
        self.assertEqual(record.rounds_participated, 1)
        self.assertEqual(len(record.history), 1)
        self.assertAlmostEqual(record.history[0].score_after, 0.7, places=12)

    def test_out_of_range(self):
        with self.assertRaises(OutOfRange):
            update_reputation(ReputationRecord("d"), 1.2, alpha=0.5)
        with self.assertRaises(OutOfRange):
            update_reputation(ReputationRecord("d"), 0.5, alpha=-0.1)

    def test_bounded_over_random_sequences(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            alpha = float(rng.uniform())
            record = ReputationRecord("d", score=float(rng.uniform()))
            for acc in rng.uniform(size=30):
                record = update_reputation(record, float(acc), alpha)
                self.assertTrue(0.0 <= record.score <= 1.0)

    def test_monotone_in_accuracy(self):
        base = ReputationRecord("d", score=0.4)
        low = update_reputation(base, 0.3, alpha=0.5).score
        high = update_reputation(base, 0.7, alpha=0.5).score
        self.assertLessEqual(low, high)

    def test_record_is_not_mutated(self):
        base = ReputationRecord("d", score=0.4)
        update_reputation(base, 0.9, alpha=0.5)
        self.assertEqual(base.score, 0.4)
        self.assertEqual(base.history, [])


class TestPenalize(unittest.TestCase):
    """Penalties for rejected submissions"""

    def test_single_penalty(self):
        record = penalize(ReputationRecord("d", score=0.8), RejectReason.STALE_ROUND, alpha=0.5)
        self.assertAlmostEqual(record.score, 0.4, places=12)
        self.assertEqual(record.history[-1].penalty, "StaleRound")

    def test_geometric_decay(self):
        record = ReputationRecord("d", score=0.9)
        for _ in range(4):
            record = penalize(record, RejectReason.INCOHERENT, alpha=0.5)
        self.assertAlmostEqual(record.score, 0.9 * 0.5 ** 4, places=12)

    def test_zero_stays_zero(self):
        record = penalize(ReputationRecord("d", score=0.0), RejectReason.DUPLICATE, alpha=0.5)
        self.assertEqual(record.score, 0.0)

    def test_byzantine_decay(self):
        """Penalized every round from 0.5 with alpha=0.5: 0.25 then 0.125, Unreliable by round 2"""
        record = ReputationRecord("d", score=0.5)
        record = penalize(record, RejectReason.INCOHERENT, 0.5, round_index=1)
        self.assertEqual(record.score, 0.25)
        self.assertIs(classify(record, 0.2), Reliability.RELIABLE)
        record = penalize(record, RejectReason.INCOHERENT, 0.5, round_index=2)
        self.assertEqual(record.score, 0.125)
        self.assertIs(classify(record, 0.2), Reliability.UNRELIABLE)


class TestClassify(unittest.TestCase):

    def test_boundary_is_reliable(self):
        self.assertIs(classify(ReputationRecord("d", score=0.2), 0.2), Reliability.RELIABLE)

    def test_below_threshold(self):
        self.assertIs(classify(ReputationRecord("d", score=0.19), 0.2), Reliability.UNRELIABLE)

    def test_fresh_record(self):
        self.assertIs(classify(ReputationRecord("d"), 0.2), Reliability.RELIABLE)


class TestAggregationWeights(unittest.TestCase):
    """Reputation-weighted aggregation weights"""

    def test_equal_scores_give_fedavg(self):
        records = [ReputationRecord(f"d{i}", score=0.5) for i in range(4)]
        np.testing.assert_allclose(aggregation_weights(records, [50] * 4, 0.2), [0.25] * 4, atol=1e-15)

    def test_unreliable_device_excluded(self):
        records = [ReputationRecord("a", 0.6), ReputationRecord("b", 0.1), ReputationRecord("c", 0.6)]
        weights = aggregation_weights(records, [100, 100, 100], 0.2)
        self.assertEqual(weights[1], 0.0)
        np.testing.assert_allclose(weights, [0.5, 0.0, 0.5], atol=1e-15)

    def test_arithmetic(self):
        records = [ReputationRecord("a", 0.9), ReputationRecord("b", 0.3)]
        np.testing.assert_allclose(aggregation_weights(records, [100, 100], 0.2), [0.75, 0.25], atol=1e-12)

    def test_sums_to_one(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            records = [ReputationRecord(f"d{i}", float(s)) for i, s in enumerate(rng.uniform(0.3, 1.0, 6))]
            weights = aggregation_weights(records, rng.integers(1, 200, 6).tolist(), 0.2)
            self.assertAlmostEqual(float(weights.sum()), 1.0, delta=1e-12)

    def test_no_reliable_devices(self):
        with self.assertRaises(NoReliableDevices):
            aggregation_weights([ReputationRecord("a", 0.1)], [10], 0.2)

    def test_sample_weights(self):
        np.testing.assert_allclose(sample_weights([100, 300]), [0.25, 0.75])


class TestVerifyUpdate(unittest.TestCase):
    """Integrity checks on submitted updates"""

    def setUp(self):
        self.registry = DeviceRegistry()
        self.registry.enroll("device-00", "secret")
        self.store = ContentStore()
        self.params = init_model(0, SHAPES)
        self.cid = self.store.put(serialize_params(self.params))
        self.ledger_view = {"block-1": self.cid}

    def claim(self, **overrides):
        fields = dict(device_id="device-00", round=3, content_id=self.cid, shapes=SHAPES,
                      credential="secret", anchor_block="block-1")
        fields.update(overrides)
        return UpdateClaim(**fields)

    def verify(self, claim, accepted=None):
        return verify_update(claim, self.store, self.ledger_view, self.registry, 3, accepted)

    def test_well_formed(self):
        outcome = self.verify(self.claim())
        self.assertTrue(outcome.accepted)
        self.assertEqual(outcome.verdict, "Accept")
        self.assertEqual(outcome.params, self.params)

    def test_stale_round(self):
        outcome = self.verify(self.claim(round=2))
        self.assertEqual(outcome.reason, RejectReason.STALE_ROUND)
        self.assertEqual(outcome.verdict, "Reject(StaleRound)")

    def test_duplicate(self):
        accepted = set()
        first = self.verify(self.claim(), accepted)
        accepted.add("device-00")
        second = self.verify(self.claim(), accepted)
        self.assertTrue(first.accepted)
        self.assertEqual(second.reason, RejectReason.DUPLICATE)

    def test_unauthenticated(self):
        self.assertEqual(self.verify(self.claim(credential="wrong")).reason, RejectReason.UNAUTHENTICATED)
        self.assertEqual(self.verify(self.claim(device_id="device-99")).reason, RejectReason.UNAUTHENTICATED)

    def test_missing_blob(self):
        self.assertEqual(self.verify(self.claim(content_id="ab" * 32)).reason, RejectReason.HASH_MISMATCH)

    def test_anchor_commits_to_other_hash(self):
        self.ledger_view["block-1"] = "cd" * 32
        self.assertEqual(self.verify(self.claim()).reason, RejectReason.HASH_MISMATCH)

    def test_corrupted_blob(self):
        self.store._blobs[self.cid] = b"garbage"
        self.assertEqual(self.verify(self.claim()).reason, RejectReason.HASH_MISMATCH)

    def test_declared_shapes_differ(self):
        self.assertEqual(self.verify(self.claim(shapes=Shapes(4, 8, 2))).reason, RejectReason.SHAPE_MISMATCH)

    def test_non_finite_weights(self):
        bad = self.params.copy()
        bad.weights[::7] = np.nan
        cid = self.store.put(serialize_params(bad))
        self.ledger_view["block-2"] = cid
        outcome = self.verify(self.claim(content_id=cid, anchor_block="block-2"))
        self.assertEqual(outcome.reason, RejectReason.NON_FINITE_WEIGHTS)


class TestIncoherentDevices(unittest.TestCase):
    """Distance-based outlier rejection"""

    def test_random_update_is_flagged(self):
        rng = np.random.default_rng(1)
        reference = init_model(0, SHAPES)
        candidates = {}
        for i in range(5):
            params = reference.copy()
            params.weights += rng.normal(0, 0.01, params.weights.size)
            candidates[f"honest-{i}"] = params
        candidates["attacker"] = random_params(SHAPES, rng)
        self.assertEqual(incoherent_devices(candidates, reference), {"attacker"})

    def test_too_few_candidates(self):
        rng = np.random.default_rng(1)
        reference = init_model(0, SHAPES)
        candidates = {"a": reference.copy(), "b": random_params(SHAPES, rng)}
        self.assertEqual(incoherent_devices(candidates, reference), set())


class TestReputationTable(unittest.TestCase):
    """Single-owner reputation table"""

    def setUp(self):
        self.table = ReputationTable(["device-01", "device-00"])
        self.table.apply_accuracy("device-00", 0.75, 0.5, 1)
        self.table.apply_penalty("device-01", RejectReason.INCOHERENT, 0.5, 1)

    def test_scores_sorted(self):
        self.assertEqual(self.table.scores(), {"device-00": 0.625, "device-01": 0.25})

    def test_canonical_bytes(self):
        self.assertEqual(self.table.canonical_bytes(), b"device-00,0.625,1,1\ndevice-01,0.25,0,1\n")

    def test_export_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "reputation.csv")
            self.table.export_csv(path)
            df = pd.read_csv(path, keep_default_na=False)
        self.assertEqual(list(df.columns), ["device_id", "round", "accuracy", "score", "penalty"])
        self.assertEqual(df["device_id"].tolist(), ["device-00", "device-01"])
        self.assertEqual(df["penalty"].tolist(), ["", "Incoherent"])


if __name__ == "__main__":
    unittest.main()
