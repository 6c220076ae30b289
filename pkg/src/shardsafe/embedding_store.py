"""Cached-embedding datasets: the SEMB1 container, CSV import, and a seeded
synthetic generator standing in for frozen-backbone token outputs."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from shardsafe import seeding
from shardsafe.errors import (
    DataError,
    DuplicateIdError,
    FormatError,
    NonFiniteError,
    TruncatedError,
    UnknownIdError,
)

MAGIC = b"SEMB"
VERSION = 1
_HEADER = struct.Struct("<4sIQIII")
_RECORD_HEAD = np.dtype([("id", "<u8"), ("source", "<u4"), ("label", "<u4")])


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EmbeddingDataset:
    """Immutable, id-sorted store of samples.

    ``tokens`` has shape ``(N, T, D)`` in float32; ``ids`` are unique uint64,
    ``sources`` uint32 origin tags, ``labels`` int64 class indices < K.
    """

    ids: np.ndarray
    sources: np.ndarray
    labels: np.ndarray
    tokens: np.ndarray
    num_classes: int
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.uint64)
        sources = np.asarray(self.sources, dtype=np.uint32)
        labels = np.asarray(self.labels, dtype=np.int64)
        tokens = np.asarray(self.tokens, dtype=np.float32)
        if tokens.ndim != 3:
            raise DataError(f"tokens must be (N, T, D), got shape {tokens.shape}")
        n = tokens.shape[0]
        if not (ids.shape == sources.shape == labels.shape == (n,)):
            raise DataError("ids, sources, labels and tokens disagree on N")
        if n and (labels.min() < 0 or labels.max() >= self.num_classes):
            bad = int(labels[(labels < 0) | (labels >= self.num_classes)][0])
            raise DataError(f"label {bad} outside 0..{self.num_classes - 1}")
        if not np.isfinite(tokens).all():
            row = int(np.nonzero(~np.isfinite(tokens).reshape(n, -1).all(axis=1))[0][0])
            raise NonFiniteError(f"sample id {int(ids[row])} has non-finite token values")
        order = np.argsort(ids, kind="stable")
        ids = ids[order]
        if n > 1 and (ids[1:] == ids[:-1]).any():
            dup = int(ids[1:][ids[1:] == ids[:-1]][0])
            raise DuplicateIdError(f"duplicate sample id {dup}")
        if not np.array_equal(order, np.arange(n)):
            sources, labels, tokens = sources[order], labels[order], tokens[order]
        object.__setattr__(self, "ids", _frozen(np.ascontiguousarray(ids)))
        object.__setattr__(self, "sources", _frozen(np.ascontiguousarray(sources)))
        object.__setattr__(self, "labels", _frozen(np.ascontiguousarray(labels)))
        object.__setattr__(self, "tokens", _frozen(np.ascontiguousarray(tokens)))
        object.__setattr__(self, "metadata", dict(self.metadata))
        object.__setattr__(self, "_index", {int(i): k for k, i in enumerate(ids)})

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def token_count(self) -> int:
        return int(self.tokens.shape[1])

    @property
    def dim(self) -> int:
        return int(self.tokens.shape[2])

    def positions(self, ids: Iterable[int]) -> np.ndarray:
        """Row indices of ``ids``; raises UnknownIdError naming the first miss."""
        out = []
        for i in ids:
            try:
                out.append(self._index[int(i)])
            except KeyError:
                raise UnknownIdError(f"unknown sample id {int(i)}") from None
        return np.asarray(out, dtype=np.int64)

    def __contains__(self, sample_id) -> bool:
        return int(sample_id) in self._index

    def label_of(self, sample_id: int) -> int:
        return int(self.labels[self.positions([sample_id])[0]])

    def subset(self, ids: Iterable[int]) -> "EmbeddingDataset":
        pos = np.sort(self.positions(ids))
        return EmbeddingDataset(
            self.ids[pos], self.sources[pos], self.labels[pos], self.tokens[pos],
            self.num_classes, self.metadata,
        )

    def equals(self, other: "EmbeddingDataset") -> bool:
        # metadata is provenance only and has no slot in SEMB1
        return (
            self.num_classes == other.num_classes
            and self.tokens.shape == other.tokens.shape
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.sources, other.sources)
            and np.array_equal(self.labels, other.labels)
            and self.tokens.tobytes() == other.tokens.tobytes()
        )


def remove_samples(dataset: EmbeddingDataset, ids: Iterable[int]) -> EmbeddingDataset:
    ids = list(ids)
    if not ids:
        return dataset
    drop = np.zeros(len(dataset), dtype=bool)
    drop[dataset.positions(ids)] = True
    keep = ~drop
    return EmbeddingDataset(
        dataset.ids[keep], dataset.sources[keep], dataset.labels[keep],
        dataset.tokens[keep], dataset.num_classes, dataset.metadata,
    )


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int
    samples_per_class: int
    token_count: int = 4
    dim: int = 32
    cluster_scale: float = 5.0
    noise_scale: float = 1.0
    num_domains: int = 1
    domain_scale: float = 1.0
    seed: int = 0
    sample_noise_scale: float = 0.0

    def __post_init__(self):
        for name in ("num_classes", "samples_per_class", "token_count", "dim", "num_domains"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive")
        if self.noise_scale <= 0 or self.sample_noise_scale < 0:
            raise DataError("noise_scale must be > 0 and sample_noise_scale >= 0")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec) -> EmbeddingDataset:
    """Gaussian class clusters, optionally shifted per domain.

    Each domain holds ``samples_per_class`` samples of every class. Every
    token of a class-c sample in domain m is ``mu_c + off_m + eta + noise``,
    with ``eta`` a per-sample offset shared by its tokens. The
    sample's ``source`` field carries its domain index. Ids are assigned
    through a seeded permutation so that labels are interleaved in id order.
    """
    K, spc, T, D = spec.num_classes, spec.samples_per_class, spec.token_count, spec.dim
    means = _unit_rows(seeding.rng(spec.seed, "synthetic", "means"), K, D) * spec.cluster_scale
    if spec.num_domains > 1:
        offsets = _unit_rows(seeding.rng(spec.seed, "synthetic", "domains"), spec.num_domains, D)
        offsets *= spec.domain_scale
    else:
        offsets = np.zeros((1, D))
    noise_rng = seeding.rng(spec.seed, "synthetic", "noise")
    labels = np.tile(np.repeat(np.arange(K), spc), spec.num_domains)
    sources = np.repeat(np.arange(spec.num_domains), K * spc)
    n = labels.shape[0]
    centers = means[labels] + offsets[sources]
    if spec.sample_noise_scale > 0:
        jitter = seeding.rng(spec.seed, "synthetic", "sample_noise").standard_normal((n, D))
        centers = centers + spec.sample_noise_scale * jitter
    tokens = centers[:, None, :] + spec.noise_scale * noise_rng.standard_normal((n, T, D))
    ids = seeding.rng(spec.seed, "synthetic", "ids").permutation(n)
    meta = {f"synthetic.{k}": str(v) for k, v in spec.to_dict().items()}
    return EmbeddingDataset(ids, sources, labels, tokens.astype(np.float32), K, meta)


def split_per_class(dataset: EmbeddingDataset, test_per_class: int, seed: int):
    """Stratified (class x source) split; returns ``(train, test)``."""
    rng = seeding.rng(seed, "embedding_store", "split")
    test = []
    keys = sorted(set(zip(dataset.labels.tolist(), dataset.sources.tolist())))
    for label, source in keys:
        members = dataset.ids[(dataset.labels == label) & (dataset.sources == source)]
        if test_per_class >= members.shape[0]:
            raise DataError(f"class {label} has too few samples to hold out {test_per_class}")
        test.extend(rng.permutation(members)[:test_per_class].tolist())
    return remove_samples(dataset, test), dataset.subset(test)


def save_dataset(dataset: EmbeddingDataset, path) -> None:
    n, T, D = dataset.tokens.shape
    recs = np.empty(n, dtype=_RECORD_HEAD)
    recs["id"], recs["source"], recs["label"] = dataset.ids, dataset.sources, dataset.labels
    tok = dataset.tokens.astype("<f4").reshape(n, T * D)
    body = np.concatenate([recs.view(np.uint8).reshape(n, -1), tok.view(np.uint8)], axis=1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, dataset.num_classes, T, D))
        fh.write(body.tobytes())


def load_dataset(path) -> EmbeddingDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedError(f"{path}: file shorter than the SEMB1 header")
    magic, version, n, K, T, D = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} (expected {MAGIC!r})")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported SEMB version {version}")
    rec = _RECORD_HEAD.itemsize + 4 * T * D
    avail = (len(raw) - _HEADER.size) // rec if rec else 0
    if avail < n:
        raise TruncatedError(f"{path}: header declares {n} records but only {avail} present")
    if len(raw) != _HEADER.size + n * rec:
        raise FormatError(f"{path}: {len(raw) - _HEADER.size - n * rec} trailing bytes")
    body = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(n, rec)
    head = body[:, : _RECORD_HEAD.itemsize].copy().view(_RECORD_HEAD).reshape(n)
    tokens = body[:, _RECORD_HEAD.itemsize:].copy().view("<f4").reshape(n, T, D)
    return EmbeddingDataset(
        head["id"], head["source"], head["label"], tokens.astype(np.float32), int(K),
    )


def import_csv(path, token_count: int, dim: int, num_classes: int | None = None) -> EmbeddingDataset:
    """Read ``id,source,label,v0..v{T*D-1}`` rows."""
    width = token_count * dim
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["id", "source", "label"] + [f"v{i}" for i in range(width)]
        if header != expected:
            raise FormatError(f"{path}: header does not match id,source,label,v0..v{width - 1}")
        rows = list(reader)
    ids = np.array([int(r[0]) for r in rows], dtype=np.uint64)
    sources = np.array([int(r[1]) for r in rows], dtype=np.uint32)
    labels = np.array([int(r[2]) for r in rows], dtype=np.int64)
    try:
        vals = np.array([[float(x) for x in r[3:]] for r in rows], dtype=np.float32)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if vals.size and vals.shape[1] != width:
        raise FormatError(f"{path}: expected {width} token values per row")
    K = num_classes if num_classes is not None else (int(labels.max()) + 1 if len(rows) else 1)
    return EmbeddingDataset(ids, sources, labels, vals.reshape(-1, token_count, dim), K,
                            {"source_file": Path(path).name})
