# utils.py
import hashlib
import logging
import os
from typing import Iterable, List, Union

import numpy as np

logger = logging.getLogger("utils")

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# One pinned 256-bit hash for block ids, content ids and digests.
DIGEST_SIZE = 32
MICROS = 1_000_000


def configure_logging(level: int = logging.INFO) -> None:
    """Configure root logging to stderr the same way for every entry point."""
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler()],
        force=True,
    )


def digest_bytes(data: bytes) -> bytes:
    """BLAKE2b-256 digest of raw bytes."""
    return hashlib.blake2b(data, digest_size=DIGEST_SIZE).digest()


def digest_hex(data: bytes) -> str:
    """BLAKE2b-256 digest of raw bytes, hex encoded (64 chars)."""
    return hashlib.blake2b(data, digest_size=DIGEST_SIZE).hexdigest()


def is_hex_digest(value: str) -> bool:
    if not isinstance(value, str) or len(value) != DIGEST_SIZE * 2:
        return False
    try:
        bytes.fromhex(value)
    except ValueError:
        return False
    return True


def seeded_rng(*keys: int) -> np.random.Generator:
    """
    Build an independent numpy generator from a sequence of integer keys.

    The same keys always give the same stream, so e.g. (seed, repeat, stream, index)
    identifies one device's jitter draws regardless of how many rounds are run.
    """
    return np.random.default_rng([int(k) for k in keys])


def to_micros(t: float) -> int:
    """Simulated seconds to an integer microsecond timestamp."""
    return int(round(t * MICROS))


def quantize_time(t: float) -> float:
    """Round simulated seconds to the microsecond grid used on the ledger."""
    return to_micros(t) / MICROS


def write_lines(path: Union[str, os.PathLike], lines: Iterable[str]) -> int:
    """Write newline-delimited records; returns the number of lines written."""
    count = 0
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for line in lines:
            f.write(line)
            f.write('\n')
            count += 1
    return count


def read_lines(path: Union[str, os.PathLike], errors: str = 'strict') -> List[str]:
    """Read newline-delimited records, skipping blank lines."""
    with open(path, 'r', encoding='utf-8', errors=errors) as f:
        return [line.rstrip('\n') for line in f if line.strip()]
