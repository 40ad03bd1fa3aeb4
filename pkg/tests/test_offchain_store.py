import unittest
import sys
import os
import tempfile

# Add the parent directory to sys.path to import the module
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from offchain_store import ContentStore, EmptyBlob, IntegrityFailure, NotFound, content_id


class TestContentStore(unittest.TestCase):
    """Content-addressed put/get"""

    def setUp(self):
        self.store = ContentStore()

    def test_put_get(self):
        cid = self.store.put(b"model weights")
        self.assertEqual(cid, content_id(b"model weights"))
        self.assertEqual(self.store.get(cid), b"model weights")
        self.assertTrue(self.store.has(cid))

    def test_put_is_idempotent(self):
        """Storing the same bytes twice returns the same id and writes once"""
        first = self.store.put(b"abc")
        second = self.store.put(b"abc")
        self.assertEqual(first, second)
        self.assertEqual(len(self.store), 1)
        self.assertEqual(self.store.write_count, 1)

    def test_empty_blob(self):
        with self.assertRaises(EmptyBlob):
            self.store.put(b"")

    def test_missing(self):
        with self.assertRaises(NotFound):
            self.store.get("00" * 32)

    def test_verify(self):
        cid = content_id(b"payload")
        self.assertTrue(ContentStore.verify(cid, b"payload"))
        self.assertFalse(ContentStore.verify(cid, b"payloae"))

    def test_corrupted_entry(self):
        cid = self.store.put(b"original")
        self.store._blobs[cid] = b"tampered"
        with self.assertRaises(IntegrityFailure):
            self.store.get(cid)
        self.assertEqual([v["block_id"] for v in self.store.audit()], [cid])

    def test_iteration_is_sorted(self):
        ids = [self.store.put(bytes([i]) * 3) for i in range(1, 6)]
        self.assertEqual(list(self.store), sorted(ids))


class TestPersistence(unittest.TestCase):
    """Mirroring blobs to a directory"""

    def test_persist_and_open(self):
        store = ContentStore()
        ids = [store.put(f"blob-{i}".encode()) for i in range(4)]
        with tempfile.TemporaryDirectory() as tmp:
            root = os.path.join(tmp, "blobs")
            self.assertEqual(store.persist(root), 4)
            self.assertEqual(sorted(os.listdir(root)), sorted(ids))

            reopened = ContentStore.open(root)
            self.assertEqual(len(reopened), 4)
            for cid in ids:
                self.assertEqual(reopened.get(cid), store.get(cid))
            self.assertEqual(reopened.audit(), [])

    def test_rooted_store_writes_through(self):
        with tempfile.TemporaryDirectory() as tmp:
            store = ContentStore(root=tmp)
            cid = store.put(b"written on put")
            with open(os.path.join(tmp, cid), "rb") as f:
                self.assertEqual(f.read(), b"written on put")

    def test_tampered_file_is_reported_once(self):
        store = ContentStore()
        good = store.put(b"good blob")
        bad = store.put(b"bad blob")
        with tempfile.TemporaryDirectory() as tmp:
            store.persist(tmp)
            with open(os.path.join(tmp, bad), "r+b") as f:
                f.write(b"B")
            violations = ContentStore.open(tmp).audit()
        self.assertEqual(len(violations), 1)
        self.assertEqual(violations[0]["kind"], "blob_integrity")
        self.assertEqual(violations[0]["block_id"], bad)
        self.assertNotEqual(violations[0]["block_id"], good)

    def test_open_ignores_foreign_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            with open(os.path.join(tmp, "README"), "w") as f:
                f.write("not a blob")
            self.assertEqual(len(ContentStore.open(tmp)), 0)

    def test_open_missing_directory(self):
        with self.assertRaises(NotFound):
            ContentStore.open("/nonexistent/blob/dir")


if __name__ == "__main__":
    unittest.main()
