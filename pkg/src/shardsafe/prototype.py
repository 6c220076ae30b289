"""Nearest-class-mean classifier over pooled, L2-normalized embeddings.

Normalized embeddings are snapped to a 2**-40 grid before accumulation. Sums
of such values stay exact in float64 while a class holds at most
``EXACT_CLASS_LIMIT`` samples, which makes removal an exact inverse of
insertion: a bank after any removal sequence is bit-identical to a fresh fit
on the survivors, whatever the order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from shardsafe.embedding_store import EmbeddingDataset
from shardsafe.errors import DataError

GRID = 2.0 ** 40
EXACT_CLASS_LIMIT = 2 ** 12


def pooled(tokens: np.ndarray, normalize: bool = True, ids=None) -> np.ndarray:
    """Mean over tokens, then (optionally) unit-normalized and grid-snapped."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim == 2:
        tokens = tokens[None]
    f = tokens.mean(axis=1)
    if normalize:
        norms = np.linalg.norm(f, axis=1)
        zero = np.nonzero(norms == 0)[0]
        if zero.size:
            who = f"sample id {int(ids[zero[0]])}" if ids is not None else f"row {int(zero[0])}"
            raise DataError(f"{who} pools to a zero vector; cannot normalize")
        f = f / norms[:, None]
    return np.round(f * GRID) / GRID


@dataclass(eq=False)
class PrototypeBank:
    sums: np.ndarray  # (K, D) float64
    counts: np.ndarray  # (K,) int64
    normalize: bool = True

    @classmethod
    def fit(cls, dataset: EmbeddingDataset, normalize: bool = True) -> "PrototypeBank":
        if len(dataset) == 0:
            raise DataError("cannot fit prototypes on an empty dataset")
        f = pooled(dataset.tokens, normalize, dataset.ids)
        K = dataset.num_classes
        sums = np.zeros((K, dataset.dim))
        np.add.at(sums, dataset.labels, f)
        counts = np.bincount(dataset.labels, minlength=K).astype(np.int64)
        return cls(sums, counts, normalize)

    @property
    def num_classes(self) -> int:
        return int(self.counts.shape[0])

    def prototypes(self) -> np.ndarray:
        """Class means; rows of empty classes are NaN."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.sums / self.counts[:, None]

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.sums.copy(), self.counts.copy(), self.normalize)

    def remove(self, tokens: np.ndarray, label: int, sample_id=None) -> "PrototypeBank":
        """Drop one sample in place: ``sum_k -= f(x)``, ``N_k -= 1``."""
        if self.counts[label] <= 0:
            raise DataError(f"class {label} has no samples left to remove")
        ids = None if sample_id is None else [sample_id]
        self.sums[label] -= pooled(tokens, self.normalize, ids)[0]
        self.counts[label] -= 1
        if self.counts[label] == 0:
            # exact arithmetic already returns this row to zero; pin it against -0.0
            self.sums[label] = 0.0
        return self

    def predict(self, tokens: np.ndarray) -> np.ndarray:
        """Cosine similarity to each prototype, ``(N, K)``; empty classes get -inf."""
        f = pooled(tokens, True)
        proto = self.prototypes()
        live = self.counts > 0
        if not live.any():
            raise DataError("prototype bank has no populated class")
        out = np.full((f.shape[0], self.num_classes), -np.inf)
        p = proto[live]
        p = p / np.linalg.norm(p, axis=1, keepdims=True)
        out[:, live] = f @ p.T
        return out

    def equals(self, other: "PrototypeBank") -> bool:
        return (
            self.normalize == other.normalize
            and self.sums.tobytes() == other.sums.tobytes()
            and np.array_equal(self.counts, other.counts)
        )


def fit(dataset: EmbeddingDataset, normalize: bool = True) -> PrototypeBank:
    return PrototypeBank.fit(dataset, normalize)


def predict(bank: PrototypeBank, tokens) -> np.ndarray:
    return bank.predict(tokens)


def remove_sample(bank: PrototypeBank, dataset: EmbeddingDataset, sample_id: int) -> PrototypeBank:
    """Return a new bank without ``sample_id``; ``bank`` is left untouched."""
    row = dataset.positions([sample_id])[0]
    return bank.copy().remove(dataset.tokens[row], int(dataset.labels[row]), sample_id)


def mixing_weight(d: float, shard_size: float) -> float:
    """``exp(-d*|S|/100)``: prototype weight given the adapter's training-set size."""
    if d < 1 and shard_size > 0:
        raise DataError("d must be >= 1")
    return math.exp(-(d * shard_size) / 100.0)
