"""Expected forgetting cost: closed forms, Monte Carlo, and the accuracy/cost sweep.

Graphs here are abstract: ``out`` is a ``(V, d')`` array of outbound
neighbors with the self-edge left implicit, and every node holds ``|S|``
samples. Forgetting a sample in node ``t`` retrains every node pointing at
``t`` (``t`` included), each of which re-reads its whole neighborhood.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from shardsafe import seeding
from shardsafe.ensemble import accuracy, fit_safe
from shardsafe.errors import DataError
from shardsafe.shard_graph import build_bilevel

COST_TOPOLOGIES = ("clique", "random_degree", "edgeless")


@dataclass(frozen=True)
class CostTrialConfig:
    topology: str
    num_nodes: int
    d: int
    shard_size: int
    trials: int = 1000
    seed: int = 0
    regime_c: float = 1.0

    def __post_init__(self):
        if self.topology not in COST_TOPOLOGIES:
            raise DataError(f"unknown topology {self.topology!r}; expected one of {COST_TOPOLOGIES}")
        if self.num_nodes < 1 or self.shard_size < 1 or self.trials < 1:
            raise DataError("num_nodes, shard_size and trials must be positive")
        if self.topology == "random_degree" and not 0 <= self.d <= self.num_nodes - 1:
            raise DataError(f"d={self.d} must lie in [0, {self.num_nodes - 1}]")
        if self.topology == "clique":
            if not 1 <= self.d <= self.num_nodes or self.num_nodes % self.d:
                raise DataError(f"clique size d={self.d} must divide num_nodes={self.num_nodes}")

    @property
    def in_regime(self) -> bool:
        """Whether ``d^2 <= C * sqrt(V)``, the setting where ``Theta(|S| d^2)`` is proven."""
        return self.d * self.d <= self.regime_c * math.sqrt(self.num_nodes)


@dataclass
class CostEstimate:
    config: CostTrialConfig
    mean: float
    stderr: float
    histogram: dict = field(default_factory=dict)  # cost -> trial count

    @property
    def in_regime(self) -> bool:
        return self.config.in_regime

    def row(self) -> dict:
        c = self.config
        return {
            "topology": c.topology, "num_nodes": c.num_nodes, "d": c.d,
            "shard_size": c.shard_size, "trials": c.trials, "mean": self.mean,
            "stderr": self.stderr, "in_regime": self.in_regime,
        }


def expected_cost_closed_form(topology: str, d: int, shard_size: int):
    """Exact ``E|M_x|`` where one exists; ``None`` for random connectivity."""
    if topology == "clique":
        if d < 1:
            raise DataError("clique size must be >= 1")
        return d * shard_size
    if topology == "edgeless":
        return shard_size
    if topology == "random_degree":
        return None
    raise DataError(f"unsupported topology {topology!r}")


def random_out_edges(rng: np.random.Generator, num_nodes: int, d: int) -> np.ndarray:
    """``d`` distinct non-self targets per node, uniformly at random."""
    out = np.empty((num_nodes, d), dtype=np.int64)
    todo = np.arange(num_nodes)
    while todo.size:
        draw = rng.integers(0, num_nodes - 1, size=(todo.size, d))
        draw += draw >= todo[:, None]  # skip self
        s = np.sort(draw, axis=1)
        ok = (s[:, 1:] != s[:, :-1]).all(axis=1) if d > 1 else np.ones(todo.size, bool)
        out[todo[ok]] = draw[ok]
        todo = todo[~ok]
    return out


def clique_out_edges(num_nodes: int, d: int) -> np.ndarray:
    v = np.arange(num_nodes)
    start = (v // d) * d
    members = start[:, None] + np.arange(d)[None]
    other = members != v[:, None]
    return members[other].reshape(num_nodes, d - 1)


def retrain_nodes(out: np.ndarray, target: int) -> np.ndarray:
    """Nodes whose data is re-read when ``target`` loses a sample."""
    out = np.asarray(out).reshape(len(out), -1)
    inbound = np.nonzero((out == target).any(axis=1))[0]
    inbound = np.union1d(inbound, [target])
    return np.union1d(inbound, out[inbound].ravel())


def node_retrain_cost(out: np.ndarray, target: int, shard_size: int) -> int:
    return int(retrain_nodes(out, target).shape[0]) * shard_size


def _graph(cfg: CostTrialConfig, rng) -> np.ndarray:
    if cfg.topology == "random_degree":
        return random_out_edges(rng, cfg.num_nodes, cfg.d)
    if cfg.topology == "clique":
        return clique_out_edges(cfg.num_nodes, cfg.d)
    return np.empty((cfg.num_nodes, 0), dtype=np.int64)


def simulate_expected_cost(cfg: CostTrialConfig) -> CostEstimate:
    """Monte Carlo ``E|M_x|``: fresh graph and uniform target sample per trial.

    Shards are equal-sized, so a uniform sample lives in a uniform node. Each
    trial has its own derived seed, so results do not depend on trial order.
    """
    costs = np.empty(cfg.trials, dtype=np.int64)
    fixed = None if cfg.topology == "random_degree" else _graph(cfg, None)
    for t in range(cfg.trials):
        rng = seeding.rng(cfg.seed, "cost_sim", "trial", t)
        target = int(rng.integers(cfg.num_nodes * cfg.shard_size)) // cfg.shard_size
        out = fixed if fixed is not None else _graph(cfg, rng)
        costs[t] = node_retrain_cost(out, target, cfg.shard_size)
    mean = float(costs.mean())
    stderr = float(costs.std(ddof=1) / math.sqrt(cfg.trials)) if cfg.trials > 1 else 0.0
    values, counts = np.unique(costs, return_counts=True)
    hist = {int(v): int(c) for v, c in zip(values, counts)}
    return CostEstimate(cfg, mean, stderr, hist)


def loglog_slope(ds, means) -> float:
    """Least-squares slope of ``log(mean)`` against ``log(d)``."""
    x = np.log(np.asarray(ds, dtype=np.float64))
    y = np.log(np.asarray(means, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def write_cost_csv(estimates, path) -> None:
    rows = [e.row() for e in estimates]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["topology"])
        w.writeheader()
        w.writerows(rows)


# --- accuracy / cost sweep ---------------------------------------------------

@dataclass
class ParetoRow:
    n: int
    n_c: int
    n_f: int
    seed: int
    accuracy: float
    cost: float  # expected retrain time relative to one model, 1/n
    note: str = ""


def pareto_sweep(train, test, shard_counts, nf_grid, train_config, seeds=(0,),
                 policy=None, jobs: int = 1) -> list:
    """Train SAFE at every feasible ``(n, n_f)`` with ``n = n_c * n_f``.

    ``n_f = 1`` rows are the uniform-sharding baseline. Infeasible cells
    (``n_f`` above the class count or not dividing ``n``) become note rows.
    """
    rows = []
    K = train.num_classes
    for n in shard_counts:
        for n_f in nf_grid:
            if n_f > K or n % n_f or n_f > n:
                rows.append(ParetoRow(n, 0, n_f, -1, float("nan"), 1.0 / n,
                                      f"skipped: n_f={n_f} infeasible for n={n}, K={K}"))
                continue
            for seed in seeds:
                cfg = replace(train_config, seed=int(seed))
                graph = build_bilevel(train, n // n_f, n_f, int(seed))
                model = fit_safe(train, graph, cfg, policy, jobs=jobs)
                rows.append(ParetoRow(n, n // n_f, n_f, int(seed), accuracy(model, test), 1.0 / n))
    return rows


def write_pareto_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(asdict(ParetoRow(0, 0, 0, 0, 0.0, 0.0))))
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))
