"""
Dataset sources for the simulated devices: a synthetic non-IID generator and a CSV ingestion hook.
"""
import logging
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import Config
from fl_core import DataShard
from utils import seeded_rng

logger = logging.getLogger(__name__)

Seed = Union[int, Sequence[int]]


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to `total`, rounding the largest fractional parts up."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(int)
    remainder = total - int(counts.sum())
    if remainder > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


def class_means(rng: np.random.Generator, n_classes: int, input_dim: int, separation: float) -> np.ndarray:
    """Cluster centres at distance `separation` from the origin, mutually orthogonal when possible."""
    directions = rng.standard_normal((max(n_classes, input_dim), input_dim))
    q, _ = np.linalg.qr(directions.T)
    if n_classes <= input_dim:
        units = q.T[:n_classes]
    else:
        units = directions[:n_classes] / np.linalg.norm(directions[:n_classes], axis=1, keepdims=True)
    return units * separation


def _draw(rng: np.random.Generator, means: np.ndarray, labels: np.ndarray, std: float) -> np.ndarray:
    return means[labels] + std * rng.standard_normal((len(labels), means.shape[1]))


def make_synthetic_dataset(
    seed: Seed,
    n_clients: int = Config.N_CLIENTS,
    non_iid_alpha: float = Config.NON_IID_ALPHA,
    n_classes: int = Config.N_CLASSES,
    input_dim: int = Config.INPUT_DIM,
    samples_per_client: int = Config.SAMPLES_PER_CLIENT,
    validation_size: int = Config.VALIDATION_SIZE,
    class_separation: float = Config.CLASS_SEPARATION,
    cluster_std: float = Config.CLUSTER_STD,
) -> Tuple[List[DataShard], DataShard]:
    """
    Gaussian class clusters split across clients with Dirichlet(non_iid_alpha) label proportions.

    Each client gets exactly `samples_per_client` samples; the validation shard is drawn IID from the
    uniform class mixture.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if non_iid_alpha <= 0:
        raise ValueError("non_iid_alpha must be > 0")
    rng = seeded_rng(*np.atleast_1d(seed))
    means = class_means(rng, n_classes, input_dim, class_separation)

    shards = []
    for i in range(n_clients):
        proportions = rng.dirichlet(np.full(n_classes, non_iid_alpha))
        counts = largest_remainder(proportions, samples_per_client)
        labels = np.repeat(np.arange(n_classes), counts)
        rng.shuffle(labels)
        shards.append(DataShard(_draw(rng, means, labels, cluster_std), labels, owner=f"device-{i:02d}"))

    val_labels = rng.integers(0, n_classes, size=validation_size)
    validation = DataShard(_draw(rng, means, val_labels, cluster_std), val_labels, owner="validation")
    logger.debug(f"Synthetic dataset: {n_clients} shards x {samples_per_client} samples, alpha={non_iid_alpha}")
    return shards, validation


def dirichlet_split_indices(labels: np.ndarray, n_clients: int, alpha: float, rng: np.random.Generator) -> List[np.ndarray]:
    """Split row indices among clients class by class with Dirichlet(alpha) shares."""
    client_indices: List[List[int]] = [[] for _ in range(n_clients)]
    for c in np.unique(labels):
        idx_c = np.flatnonzero(labels == c)
        rng.shuffle(idx_c)
        splits = largest_remainder(rng.dirichlet(np.full(n_clients, alpha)), len(idx_c))
        start = 0
        for i, take in enumerate(splits):
            client_indices[i].extend(idx_c[start:start + take].tolist())
            start += take
    return [np.sort(np.asarray(ix, dtype=int)) for ix in client_indices]


def fetch_csv_dataset(
    path: str,
    n_clients: int,
    seed: Seed,
    non_iid_alpha: float = Config.NON_IID_ALPHA,
    label_column: str = "label",
    validation_fraction: float = 0.2,
) -> Tuple[List[DataShard], DataShard]:
    """
    Load float feature columns plus an integer label column from CSV, hold out a validation
    fraction and split the rest across clients by Dirichlet label shares.
    """
    df = pd.read_csv(path)
    if label_column not in df.columns:
        raise ValueError(f"{path} has no '{label_column}' column")
    feature_columns = [c for c in df.columns if c != label_column]
    if not feature_columns:
        raise ValueError(f"{path} has no feature columns")
    features = df[feature_columns].astype(float).to_numpy()
    labels = df[label_column].astype(int).to_numpy()
    if labels.min() < 0:
        raise ValueError("labels must be non-negative integers")

    rng = seeded_rng(*np.atleast_1d(seed))
    order = rng.permutation(len(df))
    n_val = max(1, int(round(validation_fraction * len(df))))
    val_idx, train_idx = order[:n_val], order[n_val:]
    validation = DataShard(features[val_idx], labels[val_idx], owner="validation")

    splits = dirichlet_split_indices(labels[train_idx], n_clients, non_iid_alpha, rng)
    shards = []
    for i, ix in enumerate(splits):
        if len(ix) == 0:
            raise ValueError(f"client {i} received no rows; use more data or a larger non_iid_alpha")
        rows = train_idx[ix]
        shards.append(DataShard(features[rows], labels[rows], owner=f"device-{i:02d}"))
    logger.info(f"Loaded {len(df)} rows from {path} into {n_clients} shards ({n_val} held out)")
    return shards, validation
