"""SAFE models: adapter ensembles mixed with the prototype classifier.

Also home of the model container (``SMDL`` files)::

    magic "SMDL" | version u32 | header length u64 | header (canonical JSON)
    | per unit, in key order: q f32[D], v f32[D]
    | prototype sums f64[K*D] | prototype counts i64[K]
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from shardsafe import inca_adapter, prototype
from shardsafe.embedding_store import EmbeddingDataset, remove_samples
from shardsafe.errors import DataError, EmptyEnsembleError, FormatError, TruncatedError
from shardsafe.inca_adapter import CrossAttentionParams, QueryUnit, TrainConfig
from shardsafe.prototype import PrototypeBank
from shardsafe.shard_graph import (
    RefinedNode,
    RefinedShardGraph,
    ShardGraph,
    neighborhood_union,
    refine,
)

MODEL_MAGIC = b"SMDL"
MODEL_VERSION = 1
_MODEL_HEAD = struct.Struct("<4sIQ")


@dataclass(frozen=True)
class LambdaPolicy:
    """How much the prototype branch weighs in ``safe_predict``.

    ``auto`` uses ``exp(-n/100)`` with ``n`` the mean training-set size of
    the live adapters; ``fixed`` uses ``value``. ``proto_scale`` multiplies
    cosine scores before their softmax. ``mixing`` is ``prob`` (softmax each
    branch, then mix) or ``raw`` (mix scores, then softmax).
    """

    mode: str = "auto"
    value: float = 0.0
    proto_scale: float = 10.0
    mixing: str = "prob"

    def __post_init__(self):
        if self.mode not in ("auto", "fixed"):
            raise DataError(f"unknown lambda mode {self.mode!r}")
        if self.mixing not in ("prob", "raw"):
            raise DataError(f"unknown mixing {self.mixing!r}")
        if self.mode == "fixed" and not 0.0 <= self.value <= 1.0:
            raise DataError("fixed lambda must lie in [0, 1]")

    @classmethod
    def zero(cls, **kw) -> "LambdaPolicy":
        return cls(mode="fixed", value=0.0, **kw)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(eq=False)
class SafeModel:
    params: CrossAttentionParams
    units: dict
    graph: ShardGraph
    refined: RefinedShardGraph
    bank: PrototypeBank
    config: TrainConfig
    policy: LambdaPolicy = field(default_factory=LambdaPolicy)
    counters: dict = field(default_factory=dict)
    tombstones: frozenset = frozenset()
    dp: dict | None = None

    @property
    def num_classes(self) -> int:
        return self.bank.num_classes

    def live_keys(self) -> list:
        return sorted(k for k in self.units if k not in self.tombstones)

    def training_size(self, key) -> int:
        return int(neighborhood_union(self.refined, key).shape[0])

    def lam(self) -> float:
        if self.policy.mode == "fixed":
            return self.policy.value
        live = self.live_keys()
        if not live:
            return 1.0
        mean_size = sum(self.training_size(k) for k in live) / len(live)
        return prototype.mixing_weight(1, mean_size)

    def to_bytes(self) -> bytes:
        return model_bytes(self)


def fit_safe(dataset: EmbeddingDataset, graph: ShardGraph, config: TrainConfig,
             policy: LambdaPolicy | None = None, counters=None, jobs: int = 1,
             normalize: bool = True, dp=None, report=None) -> SafeModel:
    """Train every adapter of ``graph`` from scratch and fit prototypes."""
    params = inca_adapter.init_shared(dataset.dim, config.seed)
    refined = refine(graph, dataset)
    units = inca_adapter.train_queries(
        params, dataset, refined, config, counters=counters, jobs=jobs,
        dp=None if dp is None else dp.settings(), report=report,
    )
    bank = PrototypeBank.fit(dataset, normalize)
    live_parents = {k[0] for k in refined.keys}
    counters = {int(p): int(c) for p, c in (counters or {}).items() if c and p in live_parents}
    return SafeModel(
        params, units, graph, refined, bank, config, policy or LambdaPolicy(),
        counters, frozenset(), None if dp is None else dp.to_dict(),
    )


def _as_batch(tokens) -> tuple:
    tokens = np.asarray(tokens)
    single = tokens.ndim == 2
    return (tokens[None] if single else tokens), single


def unit_logits(model: SafeModel, tokens, keys=None) -> tuple:
    """Raw per-unit logits ``(N, M)`` from one compositional forward pass."""
    batch, _ = _as_batch(tokens)
    keys = model.live_keys() if keys is None else list(keys)
    if not keys:
        return np.empty((batch.shape[0], 0)), keys
    q = np.stack([model.units[k].q for k in keys]).astype(np.float64)
    v = np.stack([model.units[k].v for k in keys]).astype(np.float64)
    enc_k, enc_v = inca_adapter.encode(model.params, batch)
    return inca_adapter.logits_from_cache(model.params, enc_k, enc_v, q, v), keys


def ensemble_logits(model: SafeModel, tokens) -> np.ndarray:
    """Per-class mean of live unit logits; classes with no live unit get -inf."""
    batch, single = _as_batch(tokens)
    logits, keys = unit_logits(model, batch)
    if not keys:
        raise EmptyEnsembleError("every adapter is dropped; use the prototype classifier")
    out = np.full((batch.shape[0], model.num_classes), -np.inf)
    labels = np.array([k[1] for k in keys])
    for c in np.unique(labels).tolist():
        cols = np.nonzero(labels == c)[0]
        out[:, c] = logits[:, cols].sum(axis=1) / cols.shape[0]
    return out[0] if single else out


def _softmax(x: np.ndarray) -> np.ndarray:
    finite = np.isfinite(x)
    m = np.where(finite, x, -np.inf).max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(finite, np.exp(np.where(finite, x, 0.0) - m), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def mix_probabilities(p_ens, p_proto, lam: float, covered=None) -> np.ndarray:
    """``(1-lam) * p_ens + lam * p_proto`` on covered classes, prototype-only elsewhere."""
    p_ens = np.asarray(p_ens, dtype=np.float64)
    p_proto = np.asarray(p_proto, dtype=np.float64)
    if covered is None:
        covered = np.ones(p_ens.shape[-1], dtype=bool)
    mixed = np.where(covered, (1.0 - lam) * p_ens + lam * p_proto, p_proto)
    if covered.all():
        return mixed
    s = mixed.sum(axis=-1, keepdims=True)
    return mixed / np.where(s > 0, s, 1.0)


def safe_predict(model: SafeModel, tokens):
    """Class probabilities and argmax labels (ties go to the smaller index)."""
    batch, single = _as_batch(tokens)
    cos = model.bank.predict(batch)
    scaled = model.policy.proto_scale * cos
    if not model.live_keys():
        probs = _softmax(scaled)
    else:
        ens = ensemble_logits(model, batch)
        covered = np.isfinite(ens[0])
        lam = model.lam()
        if model.policy.mixing == "raw":
            mixed = np.where(covered, (1.0 - lam) * np.where(covered, ens, 0.0) + lam * scaled, scaled)
            probs = _softmax(mixed)
        else:
            probs = mix_probabilities(_softmax(ens), _softmax(scaled), lam, covered)
    labels = probs.argmax(axis=-1)
    if single:
        return probs[0], int(labels[0])
    return probs, labels


def accuracy(model: SafeModel, dataset: EmbeddingDataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    _, labels = safe_predict(model, dataset.tokens)
    return float((labels == dataset.labels).mean())


def _parents_from(model: SafeModel, forbidden) -> tuple:
    """Split a forbidden list into (parent indices, refined keys)."""
    parents, keys = set(), set()
    for f in forbidden:
        if isinstance(f, (tuple, list)):
            keys.add(tuple(int(x) for x in f))
        else:
            parents.add(int(f))
            keys.update(model.refined.by_parent[int(f)])
    for k in keys:
        model.refined.node(k)
    return parents, keys


def forbidden_keys(model: SafeModel, forbidden) -> tuple:
    """Refined nodes forbidden outright, and every unit whose neighborhood meets them."""
    _, keys = _parents_from(model, forbidden)
    drop = set(keys)
    for k in keys:
        drop.update(model.refined.in_keys(k))
    return keys, drop


def a_la_carte(model: SafeModel, dataset: EmbeddingDataset, forbidden: Iterable) -> SafeModel:
    """Restrict the ensemble to adapters that never read a forbidden node.

    ``forbidden`` mixes parent indices and ``(parent, label)`` keys. The
    prototype bank is refit on the samples of permitted nodes only.
    """
    keys, drop = forbidden_keys(model, list(forbidden))
    permitted = [k for k in model.refined.keys if k not in keys]
    if not permitted:
        raise DataError("every node is forbidden; nothing to serve")
    banned = [x for k in keys for x in model.refined.node(k).samples.tolist()]
    bank = PrototypeBank.fit(remove_samples(dataset, banned), model.bank.normalize)
    units = {k: u for k, u in model.units.items() if k not in drop}
    return replace(model, units=units, bank=bank, tombstones=frozenset(model.tombstones - drop))


# --- serialization -----------------------------------------------------------

def _header(model: SafeModel) -> dict:
    graph = model.graph
    owner_labels = []
    label_of = {int(x): n.label for n in model.refined.nodes for x in n.samples.tolist()}
    for s in graph.nodes:
        owner_labels.append([label_of.get(int(x), -1) for x in s.tolist()])
    return {
        "version": MODEL_VERSION,
        "dim": model.params.dim,
        "theta_seed": model.params.seed,
        "num_classes": model.num_classes,
        "config": model.config.to_dict(),
        "policy": model.policy.to_dict(),
        "counters": sorted([int(p), int(c)] for p, c in model.counters.items()),
        "tombstones": sorted([list(k) for k in model.tombstones]),
        "units": [list(k) for k in sorted(model.units)],
        "graph": json.loads(graph.to_json()),
        "graph_digest": graph.digest(),
        "sample_labels": owner_labels,
        "prototype_normalize": model.bank.normalize,
        "dp": model.dp,
    }


def model_bytes(model: SafeModel) -> bytes:
    head = json.dumps(_header(model), sort_keys=True, separators=(",", ":")).encode()
    parts = [_MODEL_HEAD.pack(MODEL_MAGIC, MODEL_VERSION, len(head)), head]
    for k in sorted(model.units):
        u = model.units[k]
        parts.append(np.asarray(u.q, dtype="<f4").tobytes())
        parts.append(np.asarray(u.v, dtype="<f4").tobytes())
    parts.append(np.asarray(model.bank.sums, dtype="<f8").tobytes())
    parts.append(np.asarray(model.bank.counts, dtype="<i8").tobytes())
    return b"".join(parts)


def save_model(model: SafeModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_bytes(model))


def model_from_bytes(raw: bytes) -> SafeModel:
    if len(raw) < _MODEL_HEAD.size:
        raise TruncatedError("model file shorter than its header")
    magic, version, hlen = _MODEL_HEAD.unpack_from(raw)
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad model magic {magic!r}")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    off = _MODEL_HEAD.size
    try:
        head = json.loads(raw[off:off + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"model header does not parse: {exc}") from None
    off += hlen
    D, K = head["dim"], head["num_classes"]
    keys = [tuple(k) for k in head["units"]]
    need = off + len(keys) * 8 * D + 8 * K * D + 8 * K
    if len(raw) < need:
        raise TruncatedError(f"model payload has {len(raw)} bytes, needs {need}")
    units = {}
    for k in keys:
        q = np.frombuffer(raw, "<f4", D, off).astype(np.float32)
        v = np.frombuffer(raw, "<f4", D, off + 4 * D).astype(np.float32)
        off += 8 * D
        units[k] = QueryUnit(k, k[1], q, v)
    sums = np.frombuffer(raw, "<f8", K * D, off).reshape(K, D).astype(np.float64)
    counts = np.frombuffer(raw, "<i8", K, off + 8 * K * D).astype(np.int64)
    graph = ShardGraph.from_json(json.dumps(head["graph"]))
    if graph.digest() != head["graph_digest"]:
        raise FormatError("embedded graph does not match its digest")
    nodes = []
    for p, (s, labels) in enumerate(zip(graph.nodes, head["sample_labels"])):
        labels = np.asarray(labels, dtype=np.int64)
        for c in np.unique(labels).tolist():
            nodes.append(RefinedNode(p, int(c), s[labels == c]))
    refined = RefinedShardGraph(graph, tuple(nodes))
    return SafeModel(
        inca_adapter.init_shared(D, head["theta_seed"]),
        units,
        graph,
        refined,
        PrototypeBank(sums, counts, head["prototype_normalize"]),
        TrainConfig.from_dict(head["config"]),
        LambdaPolicy(**head["policy"]),
        {int(p): int(c) for p, c in head["counters"]},
        frozenset(tuple(k) for k in head["tombstones"]),
        head["dp"],
    )


def load_model(path) -> SafeModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
