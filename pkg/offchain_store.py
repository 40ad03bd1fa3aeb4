"""
Content-addressed blob store used in place of IPFS. Model weights and reputation tables live here;
only their ContentIds go on the ledger.
"""
import logging
import os
from typing import Dict, Iterator, List, Optional

from utils import digest_hex, is_hex_digest

logger = logging.getLogger(__name__)


class StoreError(Exception):
    """Base class for off-chain store errors."""


class EmptyBlob(StoreError):
    pass


class NotFound(StoreError):
    pass


class IntegrityFailure(StoreError):
    pass


def content_id(blob: bytes) -> str:
    return digest_hex(blob)


class ContentStore:
    """
    In-memory map ContentId -> bytes, optionally mirrored to a directory with one file per entry
    named by its hex ContentId.
    """

    def __init__(self, root: Optional[str] = None):
        self._blobs: Dict[str, bytes] = {}
        self.root = root
        self.write_count = 0
        if root:
            os.makedirs(root, exist_ok=True)

    def put(self, blob: bytes) -> str:
        if not blob:
            raise EmptyBlob("cannot store an empty blob")
        cid = content_id(blob)
        if cid not in self._blobs:
            self._blobs[cid] = bytes(blob)
            self.write_count += 1
            if self.root:
                self._write_file(self.root, cid, self._blobs[cid])
            logger.debug(f"Stored blob {cid[:12]} ({len(blob)} bytes)")
        return cid

    def get(self, cid: str) -> bytes:
        """Return the stored bytes after checking they still hash to the requested id."""
        if cid not in self._blobs:
            raise NotFound(f"no blob with id {cid}")
        blob = self._blobs[cid]
        if content_id(blob) != cid:
            raise IntegrityFailure(f"blob {cid[:12]} does not match its content id")
        return blob

    @staticmethod
    def verify(cid: str, blob: bytes) -> bool:
        return content_id(blob) == cid

    def has(self, cid: str) -> bool:
        return cid in self._blobs

    def __len__(self) -> int:
        return len(self._blobs)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._blobs))

    @staticmethod
    def _write_file(root: str, cid: str, blob: bytes) -> None:
        with open(os.path.join(root, cid), "wb") as f:
            f.write(blob)

    def persist(self, root: str) -> int:
        """Write every entry to `<root>/<hex-contentid>`; returns the number of files written."""
        os.makedirs(root, exist_ok=True)
        for cid in sorted(self._blobs):
            self._write_file(root, cid, self._blobs[cid])
        if self.root is None:
            self.root = root
        logger.info(f"Persisted {len(self._blobs)} blobs to {root}")
        return len(self._blobs)

    @classmethod
    def open(cls, root: str) -> "ContentStore":
        """Load a persisted directory as-is; entries are not re-hashed until read or audited."""
        if not os.path.isdir(root):
            raise NotFound(f"blob directory {root} does not exist")
        store = cls()
        for name in sorted(os.listdir(root)):
            path = os.path.join(root, name)
            if not os.path.isfile(path) or not is_hex_digest(name):
                continue
            with open(path, "rb") as f:
                store._blobs[name] = f.read()
        store.root = root
        return store

    def audit(self) -> List[Dict]:
        """Re-hash every entry; one `blob_integrity` violation per entry whose bytes no longer match."""
        violations = []
        for cid in sorted(self._blobs):
            if content_id(self._blobs[cid]) != cid:
                violations.append({"kind": "blob_integrity", "block_id": cid,
                                   "detail": "stored bytes do not hash to their content id"})
        return violations
