"""Forget requests: exact neighborhood retraining, node drops, instant drops.

Retraining reseeds each affected parent from ``(base seed, parent, counter)``
and bumps the counter, so a forgotten model is byte-identical to training
from scratch on the reduced graph with the same counters.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

import numpy as np

from shardsafe import inca_adapter
from shardsafe.embedding_store import EmbeddingDataset, remove_samples
from shardsafe.ensemble import SafeModel, fit_safe, model_bytes
from shardsafe.errors import DataError, UnknownIdError
from shardsafe.shard_graph import affected_parents, refine

KINDS = ("samples", "node", "instant_node")


@dataclass(frozen=True)
class ForgetRequest:
    kind: str
    targets: tuple
    timestamp: float = 0.0
    requester: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown forget request kind {self.kind!r}")
        if not self.targets:
            raise DataError("forget request needs at least one target")
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))

    def to_dict(self) -> dict:
        return {**asdict(self), "targets": list(self.targets)}


@dataclass
class ForgetReport:
    mode: str  # retrain | drop | instant
    affected: list  # refined keys whose adapters were retrained or removed
    retrain_set_size: int  # |M_x| before removal
    samples_revisited: int  # data read by the retraining
    dropped_units: list = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["affected"] = [list(k) for k in self.affected]
        d["dropped_units"] = [list(k) for k in self.dropped_units]
        return d


@dataclass(frozen=True)
class RetrainJob:
    """Deferred work left behind by :func:`instant_forget`."""

    shard: int
    parents: tuple

    def to_dict(self) -> dict:
        return {"shard": self.shard, "parents": list(self.parents)}


def _dp_settings(model: SafeModel):
    if not model.dp:
        return None
    return inca_adapter.DPSettings(model.dp["clip_norm"], model.dp["noise_multiplier"])


def _live_parents(model: SafeModel, parents: Iterable[int]) -> list:
    return [p for p in parents if model.refined.by_parent[p]]


def _normalize_counters(counters: dict, refined) -> dict:
    return {p: c for p, c in counters.items() if c and refined.by_parent[p]}


def _retrain(model: SafeModel, dataset: EmbeddingDataset, graph, parents, jobs=1):
    """Retrain the groups of ``parents`` on ``(dataset, graph)``; return new model."""
    refined = refine(graph, dataset)
    counters = dict(model.counters)
    for p in parents:
        counters[p] = counters.get(p, 0) + 1
    live = [p for p in parents if refined.by_parent[p]]
    fresh = {}
    if live:
        fresh = inca_adapter.train_queries(
            model.params, dataset, refined, model.config, counters=counters,
            parents=live, jobs=jobs, dp=_dp_settings(model),
        )
    stale = {k for p in parents for k in model.refined.by_parent[p]}
    units = {k: u for k, u in model.units.items() if k not in stale and k[0] not in parents}
    units.update(fresh)
    tombstones = frozenset(
        k for k in model.tombstones if k not in stale and k not in fresh and k in refined.index
    )
    new = replace(
        model, units=units, graph=graph, refined=refined,
        counters=_normalize_counters(counters, refined), tombstones=tombstones,
    )
    dropped = sorted(stale - set(fresh))
    return new, sorted(fresh), dropped


def _reach_size(graph, refined, parents) -> int:
    reach = {q for p in parents for q in graph.out_neighbors[p]}
    return int(refined.parent_samples(reach).shape[0])


def forget_samples(model: SafeModel, dataset: EmbeddingDataset, ids: Iterable[int], jobs: int = 1):
    """Exactly forget ``ids``: retrain every adapter that read any of them.

    Returns ``(model', dataset', report)``; adapters outside the affected set
    are carried over untouched.
    """
    start = time.perf_counter()
    ids = sorted({int(i) for i in ids})
    if not ids:
        raise DataError("no sample ids to forget")
    dataset.positions(ids)
    for x in ids:
        model.graph.node_of(x)
    parents = _live_parents(model, affected_parents(model.graph, ids))
    m_x = _reach_size(model.graph, model.refined, parents)
    new_data = remove_samples(dataset, ids)
    new_graph = model.graph.without_samples(ids)
    new, retrained, dropped = _retrain(model, new_data, new_graph, parents, jobs)
    bank = model.bank.copy()
    for row in dataset.positions(ids).tolist():
        bank.remove(dataset.tokens[row], int(dataset.labels[row]), int(dataset.ids[row]))
    new.bank = bank
    live_after = [p for p in parents if new.refined.by_parent[p]]
    report = ForgetReport(
        mode="retrain" if retrained else "drop",
        affected=sorted({k for p in parents for k in model.refined.by_parent[p]}),
        retrain_set_size=m_x,
        samples_revisited=_reach_size(new_graph, new.refined, live_after),
        dropped_units=dropped,
        wall_time=time.perf_counter() - start,
    )
    return new, new_data, report


def forget_node(model: SafeModel, dataset: EmbeddingDataset, shard: int, jobs: int = 1):
    """Drop shard ``shard``: its adapters go, adapters pointing at it are refit."""
    if not 0 <= int(shard) < len(model.graph):
        raise UnknownIdError(f"unknown shard {shard}")
    ids = model.graph.nodes[int(shard)].tolist()
    if not ids:
        return model, dataset, ForgetReport("drop", [], 0, 0)
    new, data, report = forget_samples(model, dataset, ids, jobs)
    report.mode = "drop" if not report.samples_revisited else "retrain"
    return new, data, report


def instant_forget(model: SafeModel, dataset: EmbeddingDataset, shard: int):
    """Forget a shard with no retraining.

    The shard's samples leave the dataset, graph and prototype bank at once;
    every adapter that read them is deleted and tombstoned. The returned
    :class:`RetrainJob` restores the inbound adapters via :func:`run_retrain_job`.
    """
    if not 0 <= int(shard) < len(model.graph):
        raise UnknownIdError(f"unknown shard {shard}")
    shard = int(shard)
    ids = model.graph.nodes[shard].tolist()
    parents = _live_parents(model, model.graph.in_neighbors[shard])
    killed = {k for p in parents for k in model.refined.by_parent[p]}
    bank = model.bank.copy()
    for row in dataset.positions(ids).tolist():
        bank.remove(dataset.tokens[row], int(dataset.labels[row]), int(dataset.ids[row]))
    new_data = remove_samples(dataset, ids)
    graph = model.graph.without_samples(ids)
    refined = refine(graph, new_data)
    units = {k: u for k, u in model.units.items() if k not in killed}
    new = replace(model, units=units, graph=graph, refined=refined, bank=bank,
                  tombstones=frozenset(model.tombstones | killed))
    job = RetrainJob(shard, tuple(p for p in parents if p != shard))
    return new, new_data, job


def run_retrain_job(model: SafeModel, dataset: EmbeddingDataset, job: RetrainJob, jobs: int = 1):
    new, retrained, dropped = _retrain(model, dataset, model.graph, list(job.parents), jobs)
    return new, retrained


def apply_request(model: SafeModel, dataset: EmbeddingDataset, request: ForgetRequest, jobs=1):
    """Dispatch a request; returns ``(model', dataset', report)``."""
    if request.kind == "samples":
        return forget_samples(model, dataset, request.targets, jobs)
    if request.kind == "node":
        new, data = model, dataset
        parts = []
        for shard in request.targets:
            new, data, rep = forget_node(new, data, shard, jobs)
            parts.append(rep)
        merged = ForgetReport(
            "retrain" if any(r.mode == "retrain" for r in parts) else "drop",
            sorted({k for r in parts for k in r.affected}),
            sum(r.retrain_set_size for r in parts),
            sum(r.samples_revisited for r in parts),
            sorted({k for r in parts for k in r.dropped_units}),
            sum(r.wall_time for r in parts),
        )
        return new, data, merged
    start = time.perf_counter()
    new, data = model, dataset
    affected = set()
    for shard in request.targets:
        before = set(new.units)
        new, data, _ = instant_forget(new, data, shard)
        affected |= before - set(new.units)
    return new, data, ForgetReport("instant", sorted(affected), 0, 0,
                                   sorted(affected), time.perf_counter() - start)


def append_journal(path, request: ForgetRequest, report: ForgetReport) -> None:
    line = json.dumps({"request": request.to_dict(), "report": report.to_dict()}, sort_keys=True)
    with open(path, "a") as fh:
        fh.write(line + "\n")


def read_journal(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def unit_divergence(a: SafeModel, b: SafeModel) -> float:
    if set(a.units) != set(b.units):
        return float("inf")
    worst = 0.0
    for k, u in a.units.items():
        w = b.units[k]
        worst = max(worst, float(np.abs(u.q.astype(np.float64) - w.q).max()),
                    float(np.abs(u.v.astype(np.float64) - w.v).max()))
    return worst


@dataclass
class Verdict:
    exact: bool
    max_divergence: float
    report: ForgetReport

    def __bool__(self) -> bool:
        return self.exact


def verify_unlearning(graph, dataset: EmbeddingDataset, request: ForgetRequest, config,
                      policy=None, jobs: int = 1, scratch_seed=None) -> Verdict:
    """Run the forget path and a from-scratch oracle, compare model bytes.

    ``scratch_seed`` overrides the oracle's seed; any other value than the
    training seed is a negative control and must come out unequal.
    """
    model = fit_safe(dataset, graph, config, policy, jobs=jobs)
    forgot, reduced, report = apply_request(model, dataset, request, jobs)
    if request.kind == "instant_node":
        raise DataError("instant forgetting is not exact before its retrain job runs")
    scratch_cfg = config if scratch_seed is None else replace(config, seed=int(scratch_seed))
    scratch = fit_safe(reduced, forgot.graph, scratch_cfg, model.policy,
                       counters=forgot.counters, jobs=jobs)
    same = model_bytes(forgot) == model_bytes(scratch)
    return Verdict(same, unit_divergence(forgot, scratch), report)
