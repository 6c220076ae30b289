"""Desk-scale experiment runners over synthetic embeddings.

Each runner is a pure function of its :class:`ExperimentSpec`: datasets,
graphs and training are all seeded from it, and output rows carry no
timings, so re-running rewrites identical CSV files.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from shardsafe import __version__, seeding
from shardsafe.cost_sim import pareto_sweep
from shardsafe.dp_engine import Accountant, Budget, DPConfig, epsilon_for_requests
from shardsafe.embedding_store import SyntheticSpec, generate_synthetic, split_per_class
from shardsafe.ensemble import LambdaPolicy, accuracy, fit_safe
from shardsafe.errors import BudgetError, DataError, ShardSafeError
from shardsafe.forgetting import instant_forget
from shardsafe.inca_adapter import TrainConfig
from shardsafe.prototype import PrototypeBank
from shardsafe.shard_graph import ShardGraph, build_bilevel, build_uniform

METHODS = ("SAFE", "NoprotoSAFE", "SISA", "ProtoSISA", "Prototypes-only")
KINDS = ("methods", "instant", "dp", "cross_domain", "pareto")


@dataclass
class ExperimentSpec:
    name: str
    kind: str = "methods"
    data: dict = field(default_factory=lambda: asdict(SyntheticSpec(16, 40)))
    test_per_class: int = 10
    methods: list = field(default_factory=lambda: ["SAFE", "SISA"])
    shard_counts: list = field(default_factory=lambda: [16])
    n_f: int = 4
    nf_grid: list = field(default_factory=lambda: [1, 2, 4])
    seeds: list = field(default_factory=lambda: [0])
    train: dict = field(default_factory=dict)
    output: str = "results"
    num_requests: int = 10
    k_grid: list = field(default_factory=lambda: [1, 2, 4, 8])
    delta: float = 1e-10
    alpha_b: float = 30.0
    beta_b: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise DataError(f"unknown methods {bad}; expected a subset of {METHODS}")
        if not self.seeds:
            raise DataError("an experiment needs at least one seed")

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train) if self.train else TrainConfig()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        try:
            return cls(**json.loads(text))
        except (TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"bad experiment spec: {exc}") from None

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        with open(path) as fh:
            return cls.from_json(fh.read())


def _data(spec: ExperimentSpec, seed: int):
    s = SyntheticSpec(**{**spec.data, "seed": int(spec.data.get("seed", 0)) + int(seed)})
    full = generate_synthetic(s)
    return split_per_class(full, spec.test_per_class, seed)


def _fine(n: int, n_f: int) -> int:
    """Largest fine split not above ``n_f`` that divides ``n``."""
    n_f = max(1, min(n_f, n))
    while n % n_f:
        n_f -= 1
    return n_f


def method_setup(method: str, train, n: int, n_f: int, seed: int):
    """Graph and lambda policy a method stands for; ``None`` graph for prototypes."""
    if method == "Prototypes-only":
        return None, LambdaPolicy(mode="fixed", value=1.0)
    if method in ("SISA", "ProtoSISA"):
        graph = build_uniform(train, n, seed)
        assert not graph.edges, "uniform sharding must not build inter-shard edges"
        return graph, LambdaPolicy.zero() if method == "SISA" else LambdaPolicy()
    f = _fine(n, min(n_f, train.num_classes))
    graph = build_bilevel(train, n // f, f, seed)
    return graph, LambdaPolicy.zero() if method == "NoprotoSAFE" else LambdaPolicy()


@dataclass
class Cell:
    method: str
    n: int
    seed: int
    accuracy: float
    cost: float
    error: str = ""


def _prototype_accuracy(train, test) -> float:
    bank = PrototypeBank.fit(train)
    return float((bank.predict(test.tokens).argmax(axis=1) == test.labels).mean())


def run_method_comparison(spec: ExperimentSpec, jobs: int = 1) -> list:
    cells = []
    cfg0 = spec.train_config
    for seed in spec.seeds:
        train, test = _data(spec, seed)
        for n in spec.shard_counts:
            for method in spec.methods:
                try:
                    graph, policy = method_setup(method, train, n, spec.n_f, seed)
                    if graph is None:
                        acc = _prototype_accuracy(train, test)
                    else:
                        model = fit_safe(train, graph, replace(cfg0, seed=int(seed)), policy, jobs=jobs)
                        acc = accuracy(model, test)
                    cells.append(Cell(method, n, int(seed), acc, 1.0 / n))
                except ShardSafeError as exc:
                    cells.append(Cell(method, n, int(seed), float("nan"), 1.0 / n, str(exc)))
    return cells


def run_instant_forgetting(spec: ExperimentSpec, num_requests: int | None = None,
                           jobs: int = 1) -> list:
    """Relative accuracy after each of ``num_requests`` instant shard drops.

    Rows are ``(method, n, seed, step, accuracy, relative)``; step 0 is the
    intact model. Shards are drawn uniformly without replacement.
    """
    k = spec.num_requests if num_requests is None else int(num_requests)
    rows = []
    cfg0 = spec.train_config
    for seed in spec.seeds:
        train, test = _data(spec, seed)
        for n in spec.shard_counts:
            order = seeding.rng(seed, "experiments", "drops", n).permutation(n)[:k]
            for method in spec.methods:
                graph, policy = method_setup(method, train, n, spec.n_f, seed)
                if graph is None:
                    acc = _prototype_accuracy(train, test)
                    rows.extend({"method": method, "n": n, "seed": int(seed), "step": s,
                                 "accuracy": acc, "relative": 1.0} for s in range(len(order) + 1))
                    continue
                model = fit_safe(train, graph, replace(cfg0, seed=int(seed)), policy, jobs=jobs)
                data = train
                base = accuracy(model, test)
                rows.append({"method": method, "n": n, "seed": int(seed), "step": 0,
                             "accuracy": base, "relative": 1.0})
                for step, shard in enumerate(order.tolist(), 1):
                    model, data, _ = instant_forget(model, data, shard)
                    acc = accuracy(model, test)
                    rows.append({"method": method, "n": n, "seed": int(seed), "step": step,
                                 "accuracy": acc, "relative": acc / base if base else float("nan")})
    return rows


def run_dp_tradeoff(spec: ExperimentSpec, k_grid=None, jobs: int = 1) -> list:
    """Accuracy of SAFE-DP models sized to survive ``k`` requests.

    A non-private ``mode=exact`` row anchors each ``(n, seed)``; each DP
    row records the epsilon chosen and the accountant's ``max_k``.
    """
    k_grid = list(spec.k_grid if k_grid is None else k_grid)
    rows = []
    cfg0 = spec.train_config
    for seed in spec.seeds:
        train, test = _data(spec, seed)
        cfg = replace(cfg0, seed=int(seed))
        for n in spec.shard_counts:
            graph, policy = method_setup("SAFE", train, n, spec.n_f, seed)
            model = fit_safe(train, graph, cfg, policy, jobs=jobs)
            rows.append({"mode": "exact", "n": n, "seed": int(seed), "k": 1, "epsilon": math.inf,
                         "max_k": 1, "accuracy": accuracy(model, test), "note": ""})
            for k in k_grid:
                try:
                    eps = epsilon_for_requests(k, spec.delta, spec.alpha_b, spec.beta_b)
                    dp = DPConfig.for_training(eps, spec.delta, cfg)
                    acct = Accountant(dp, Budget(spec.alpha_b, spec.beta_b))
                    acct.check()
                    dp_model = fit_safe(train, graph, cfg, policy, jobs=jobs, dp=dp)
                    rows.append({"mode": "dp", "n": n, "seed": int(seed), "k": k, "epsilon": eps,
                                 "max_k": acct.max_k, "accuracy": accuracy(dp_model, test),
                                 "note": ""})
                except BudgetError as exc:
                    rows.append({"mode": "dp", "n": n, "seed": int(seed), "k": k,
                                 "epsilon": float("nan"), "max_k": 0,
                                 "accuracy": float("nan"), "note": f"skipped: {exc}"})
    return rows


def concat_graphs(parts, topology: str = "custom") -> ShardGraph:
    """Disjoint union of shard graphs, node indices shifted in order."""
    nodes, edges, offset = [], set(), 0
    for g in parts:
        nodes.extend(g.nodes)
        edges.update((i + offset, j + offset) for i, j in g.edges)
        offset += len(g)
    return ShardGraph(tuple(nodes), frozenset(edges), topology, {"parts": len(parts)})


def cross_domain_graphs(train, n: int, n_f: int, seed: int) -> dict:
    """Four equal-cost topologies over a multi-domain training set."""
    domains = np.unique(train.sources).tolist()
    if len(domains) < 2:
        raise DataError("cross-domain runs need at least two source domains")
    if n % len(domains):
        raise DataError(f"n={n} must be a multiple of the {len(domains)} domains")
    per = n // len(domains)
    f = _fine(per, min(n_f, train.num_classes))
    subsets = [train.subset(train.ids[train.sources == s].tolist()) for s in domains]
    return {
        "SISA in-domain": (concat_graphs([build_uniform(d, per, seed) for d in subsets]),
                           LambdaPolicy.zero()),
        "SISA cross-domain": (build_uniform(train, n, seed), LambdaPolicy.zero()),
        "SAFE in-domain": (concat_graphs([build_bilevel(d, per // f, f, seed) for d in subsets]),
                           LambdaPolicy()),
        "SAFE cross-domain": (build_bilevel(train, n // f, f, seed), LambdaPolicy()),
    }


def run_cross_domain(spec: ExperimentSpec, jobs: int = 1) -> list:
    rows = []
    cfg0 = spec.train_config
    for seed in spec.seeds:
        train, test = _data(spec, seed)
        for n in spec.shard_counts:
            for name, (graph, policy) in cross_domain_graphs(train, n, spec.n_f, seed).items():
                model = fit_safe(train, graph, replace(cfg0, seed=int(seed)), policy, jobs=jobs)
                row = {"topology": name, "n": n, "seed": int(seed), "nodes": len(graph),
                       "all": accuracy(model, test)}
                for s in np.unique(test.sources).tolist():
                    part = test.subset(test.ids[test.sources == s].tolist())
                    row[f"domain_{s}"] = accuracy(model, part)
                rows.append(row)
    return rows


def run_pareto(spec: ExperimentSpec, jobs: int = 1) -> list:
    rows = []
    for seed in spec.seeds:
        train, test = _data(spec, seed)
        rows.extend(asdict(r) for r in pareto_sweep(
            train, test, spec.shard_counts, spec.nf_grid, spec.train_config,
            seeds=[seed], jobs=jobs,
        ))
    return rows


def mean_by(rows, keys, value) -> dict:
    """Mean and std of ``value`` per key tuple, ignoring NaNs."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r[value])
    out = {}
    for k, vals in sorted(groups.items(), key=lambda kv: str(kv[0])):
        a = np.asarray(vals, dtype=np.float64)
        a = a[np.isfinite(a)]
        out[k] = (float(a.mean()) if a.size else float("nan"),
                  float(a.std()) if a.size else float("nan"))
    return out


def _write_csv(rows, path) -> None:
    fields = []
    for r in rows:
        fields.extend(k for k in r if k not in fields)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields or ["empty"])
        w.writeheader()
        w.writerows(rows)


_SUMMARY_KEYS = {
    "methods": (("method", "n"), "accuracy"),
    "instant": (("method", "n", "step"), "relative"),
    "dp": (("mode", "n", "k"), "accuracy"),
    "cross_domain": (("topology", "n"), "all"),
    "pareto": (("n", "n_f"), "accuracy"),
}


def run_experiment(spec: ExperimentSpec, jobs: int = 1, write: bool = True) -> tuple:
    """Run ``spec``; optionally write ``<output>/<name>.csv`` and ``.json``."""
    if spec.kind == "methods":
        rows = [asdict(c) for c in run_method_comparison(spec, jobs)]
    elif spec.kind == "instant":
        rows = run_instant_forgetting(spec, jobs=jobs)
    elif spec.kind == "dp":
        rows = run_dp_tradeoff(spec, jobs=jobs)
    elif spec.kind == "cross_domain":
        rows = run_cross_domain(spec, jobs)
    else:
        rows = run_pareto(spec, jobs)
    keys, value = _SUMMARY_KEYS[spec.kind]
    summary = {
        "name": spec.name, "kind": spec.kind, "seeds": list(spec.seeds),
        "engine_version": __version__, "spec": json.loads(spec.to_json()),
        "aggregate": [{**dict(zip(keys, k)), "mean": m, "std": s}
                      for k, (m, s) in mean_by(rows, keys, value).items()],
    }
    if write:
        os.makedirs(spec.output, exist_ok=True)
        base = os.path.join(spec.output, spec.name)
        _write_csv(rows, base + ".csv")
        with open(base + ".json", "w") as fh:
            json.dump(summary, fh, sort_keys=True, indent=1, default=str)
    return rows, summary
