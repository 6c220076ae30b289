"""Mixed-privacy training and the forget-request budget.

Each adapter learns from its own shard without noise and from neighbor
shards through clipped, noised gradients. A neighbor can then absorb up to
``max_k`` forget requests through group privacy before an exact retrain is
due; :class:`Accountant` keeps that count per adapter.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

from shardsafe import inca_adapter
from shardsafe.embedding_store import EmbeddingDataset, remove_samples
from shardsafe.errors import BudgetError, DataError, TrainingError
from shardsafe.inca_adapter import DPSettings
from shardsafe.shard_graph import refine


def calibrate_noise(epsilon: float, delta: float, steps: int = 1) -> float:
    """Gaussian-mechanism multiplier under basic composition over ``steps``."""
    if epsilon <= 0 or not 0 < delta < 1:
        raise BudgetError("need epsilon > 0 and 0 < delta < 1")
    if steps < 1:
        raise BudgetError("steps must be >= 1")
    return math.sqrt(2.0 * math.log(1.25 / delta)) * math.sqrt(steps) / epsilon


@dataclass(frozen=True)
class DPConfig:
    epsilon: float
    delta: float
    clip_norm: float = 1.0
    steps: int = 1

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise BudgetError("clip norm must be positive")
        calibrate_noise(self.epsilon, self.delta, self.steps)

    @classmethod
    def for_training(cls, epsilon, delta, config, clip_norm: float = 1.0) -> "DPConfig":
        return cls(epsilon, delta, clip_norm, config.epochs)

    @property
    def noise_multiplier(self) -> float:
        return calibrate_noise(self.epsilon, self.delta, self.steps)

    def settings(self) -> DPSettings:
        sigma = self.noise_multiplier
        if not sigma > 0 or not math.isfinite(sigma):
            raise TrainingError(f"noise multiplier {sigma} is not a positive number")
        return DPSettings(self.clip_norm, sigma)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon, "delta": self.delta, "clip_norm": self.clip_norm,
            "steps": self.steps, "noise_multiplier": self.noise_multiplier,
        }


@dataclass(frozen=True)
class Budget:
    alpha_b: float
    beta_b: float = 1.0

    def __post_init__(self):
        if not self.alpha_b > 0:
            raise BudgetError("alpha_b must be positive")
        if not 0 < self.beta_b <= 1:
            raise BudgetError("beta_b must lie in (0, 1]")


def group_privacy(epsilon: float, delta: float, k: int) -> tuple:
    """``(k*eps, (e^(k*eps) - 1) / (e^eps - 1) * delta)``."""
    if k < 1:
        raise BudgetError("group size k must be >= 1")
    ratio = math.expm1(k * epsilon) / math.expm1(epsilon)
    return k * epsilon, ratio * delta


def max_requests(epsilon: float, delta: float, alpha_b: float, beta_b: float = 1.0) -> int:
    """Largest k whose group-privacy guarantee stays inside ``(alpha_b, beta_b)``."""
    Budget(alpha_b, beta_b)
    calibrate_noise(epsilon, delta)
    if delta >= beta_b:
        raise BudgetError(f"delta {delta} must be far below beta_b {beta_b}")
    bound = min(alpha_b / epsilon, math.log(beta_b * math.expm1(epsilon) / delta + 1.0) / epsilon)
    k = math.floor(bound)
    # the closed form can land a hair off an integer; settle against the exact check
    while k >= 1 and not _within(epsilon, delta, k, alpha_b, beta_b):
        k -= 1
    while _within(epsilon, delta, k + 1, alpha_b, beta_b):
        k += 1
    if k < 1:
        raise BudgetError(
            f"budget (alpha={alpha_b}, beta={beta_b}) admits no request at eps={epsilon}; "
            "use exact retraining mode"
        )
    return k


def _within(epsilon, delta, k, alpha_b, beta_b) -> bool:
    if k < 1:
        return True
    e, d = group_privacy(epsilon, delta, k)
    return e <= alpha_b and d <= beta_b


def epsilon_for_requests(k: int, delta: float, alpha_b: float, beta_b: float = 1.0,
                         tol: float = 1e-9) -> float:
    """Largest epsilon for which ``max_requests`` is still at least ``k``."""
    if k < 1:
        raise BudgetError("k must be >= 1")
    lo, hi = 1e-6, alpha_b / k
    if not _within(lo, delta, k, alpha_b, beta_b):
        raise BudgetError(f"no epsilon supports {k} requests at delta={delta}")
    if _within(hi, delta, k, alpha_b, beta_b):
        return hi
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if _within(mid, delta, k, alpha_b, beta_b):
            lo = mid
        else:
            hi = mid
    return lo


def dp_train_queries(params, dataset: EmbeddingDataset, refined, config, dp: DPConfig,
                     counters=None, jobs: int = 1, report=None) -> dict:
    if config.loss != "masked-bce":
        raise TrainingError("DP training supports only masked-bce")
    return inca_adapter.train_queries(
        params, dataset, refined, config, counters=counters, jobs=jobs,
        dp=dp.settings(), report=report,
    )


def _key_str(key) -> str:
    return f"{key[0]}:{key[1]}"


def _str_key(text: str) -> tuple:
    p, c = text.split(":")
    return int(p), int(c)


@dataclass
class Accountant:
    dp: DPConfig
    budget: Budget
    counts: dict = field(default_factory=dict)
    max_k: int = 0

    def __post_init__(self):
        k = max_requests(self.dp.epsilon, self.dp.delta, self.budget.alpha_b, self.budget.beta_b)
        if self.max_k == 0:
            self.max_k = k
        elif not 1 <= self.max_k <= k:
            raise BudgetError(f"max_k={self.max_k} exceeds the budget's k={k}")
        self.counts = {tuple(k_): int(v) for k_, v in self.counts.items()}
        self.check()

    def count(self, node) -> int:
        return self.counts.get(tuple(node), 0)

    def record_forget(self, node) -> str:
        node = tuple(node)
        k = self.counts.get(node, 0)
        if k + 1 > self.max_k:
            return "retrain_required"
        self.counts[node] = k + 1
        return "ok"

    def reset(self, node) -> None:
        self.counts.pop(tuple(node), None)

    def check(self) -> None:
        for node, k in self.counts.items():
            if k > self.max_k:
                raise BudgetError(f"node {node} served {k} requests, above max_k={self.max_k}")
            if k and not _within(self.dp.epsilon, self.dp.delta, k,
                                 self.budget.alpha_b, self.budget.beta_b):
                raise BudgetError(f"node {node} is outside its privacy budget")

    def to_json(self) -> str:
        return json.dumps({
            "dp": self.dp.to_dict(),
            "budget": {"alpha_b": self.budget.alpha_b, "beta_b": self.budget.beta_b},
            "max_k": self.max_k,
            "counts": {_key_str(k): v for k, v in sorted(self.counts.items())},
        }, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Accountant":
        try:
            d = json.loads(text)
            dp = DPConfig(d["dp"]["epsilon"], d["dp"]["delta"], d["dp"]["clip_norm"], d["dp"]["steps"])
            counts = {_str_key(k): int(v) for k, v in d["counts"].items()}
            return cls(dp, Budget(**d["budget"]), counts, int(d["max_k"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed accountant state: {exc}") from None

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Accountant":
        with open(path) as fh:
            return cls.from_json(fh.read())


@dataclass
class DPForgetReport:
    refit: list  # owning units refit on their reduced data
    charged: list  # neighbor units that absorbed the request under budget
    retrained: list  # neighbor units whose budget overflowed
    wall_time: float = 0.0


def dp_forget_samples(model, dataset: EmbeddingDataset, ids, accountant: Accountant, jobs: int = 1):
    """Forget ``ids`` from a DP-trained model.

    Only the unit owning each sample is refit; neighbor units are charged one
    request each and kept as they are, unless their budget is exhausted, in
    which case their whole group is exactly retrained and their counts reset.
    """
    if not model.dp:
        raise TrainingError("model was not trained with DP")
    start = time.perf_counter()
    ids = sorted({int(i) for i in ids})
    if not ids:
        raise DataError("no sample ids to forget")
    dataset.positions(ids)
    refined = model.refined
    owners, charged, overflow = set(), [], set()
    for x in ids:
        p = model.graph.node_of(x)
        owner = (p, dataset.label_of(x))
        owners.add(owner)
        for w in refined.in_keys(owner):
            if w == owner or w not in model.units or w in overflow:
                continue
            if accountant.record_forget(w) == "ok":
                charged.append(w)
            else:
                overflow.add(w)
    full_parents = sorted({k[0] for k in overflow})
    new_data = remove_samples(dataset, ids)
    graph = model.graph.without_samples(ids)
    new_refined = refine(graph, new_data)
    counters = dict(model.counters)
    for p in set(full_parents) | {k[0] for k in owners}:
        counters[p] = counters.get(p, 0) + 1
    settings = DPSettings(model.dp["clip_norm"], model.dp["noise_multiplier"])
    fresh = {}
    if full_parents:
        fresh.update(inca_adapter.train_queries(
            model.params, new_data, new_refined, model.config, counters=counters,
            parents=full_parents, jobs=jobs, dp=settings,
        ))
    own = {k for k in owners if k in new_refined.index and k[0] not in full_parents}
    if own:
        fresh.update(inca_adapter.train_queries(
            model.params, new_data, new_refined, model.config, counters=counters,
            parents=sorted({k[0] for k in own}), jobs=jobs, dp=settings, only_keys=own,
        ))
    stale = set(owners) | {k for p in full_parents for k in refined.by_parent[p]}
    units = {k: u for k, u in model.units.items() if k not in stale}
    units.update(fresh)
    for k in stale:
        accountant.reset(k)
    for k in list(accountant.counts):
        if k not in units:
            accountant.reset(k)
    bank = model.bank.copy()
    for row in dataset.positions(ids).tolist():
        bank.remove(dataset.tokens[row], int(dataset.labels[row]), int(dataset.ids[row]))
    counters = {p: c for p, c in counters.items() if c and new_refined.by_parent[p]}
    new = replace(model, units=units, graph=graph, refined=new_refined, bank=bank,
                  counters=counters,
                  tombstones=frozenset(k for k in model.tombstones if k in units))
    accountant.check()
    charged = sorted(set(charged) - stale)
    report = DPForgetReport(sorted(own), charged, sorted(fresh.keys() - own),
                            time.perf_counter() - start)
    return new, new_data, report
