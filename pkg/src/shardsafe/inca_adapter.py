"""Frozen random cross-attention adapter with trainable per-node query/head pairs.

For tokens ``z`` (T x D) and a query ``q`` the adapter computes::

    z' = LN_in(z)          q' = LN_q(q)
    a  = softmax((W_q q') . (W_k z')^T / sqrt(D))
    e  = LN_post(W_o (a . W_v z'))
    y  = v . e

Only ``q`` and ``v`` are ever trained. ``W_k z'`` and ``W_v z'`` pushed
through ``W_o`` do not depend on the query, so they are computed once per
sample (:func:`encode`) and reused by training and inference.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from shardsafe import seeding
from shardsafe.embedding_store import EmbeddingDataset
from shardsafe.errors import DataError, TrainingError
from shardsafe.shard_graph import RefinedShardGraph

LN_EPS = 1e-5
LOSS_MODES = ("masked-bce", "clique-ce")


@dataclass(frozen=True, eq=False)
class CrossAttentionParams:
    dim: int
    seed: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ln_in: tuple
    ln_q: tuple
    ln_post: tuple

    def tobytes(self) -> bytes:
        parts = [self.w_q, self.w_k, self.w_v, self.w_o, *self.ln_in, *self.ln_q, *self.ln_post]
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


def init_shared(dim: int, seed: int) -> CrossAttentionParams:
    if dim < 1:
        raise DataError("dim must be >= 1")
    r = seeding.rng(seed, "inca_adapter", "theta")
    w = [r.standard_normal((dim, dim)) / math.sqrt(dim) for _ in range(4)]
    for m in w:
        m.setflags(write=False)

    def ln():
        g, b = np.ones(dim), np.zeros(dim)
        g.setflags(write=False)
        b.setflags(write=False)
        return (g, b)

    return CrossAttentionParams(dim, seed, *w, ln(), ln(), ln())


@dataclass(frozen=True, eq=False)
class QueryUnit:
    key: tuple  # (parent shard, label)
    label: int
    q: np.ndarray  # float32 (D,)
    v: np.ndarray  # float32 (D,)

    def equals(self, other: "QueryUnit") -> bool:
        return (
            self.key == other.key
            and self.q.tobytes() == other.q.tobytes()
            and self.v.tobytes() == other.v.tobytes()
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.05
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    loss: str = "masked-bce"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")
        if self.lr <= 0:
            raise DataError("lr must be > 0")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if self.loss not in LOSS_MODES:
            raise DataError(f"loss must be one of {LOSS_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**dict(d))

    def lr_at(self, epoch: int) -> float:
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * epoch / self.epochs))


def _layer_norm(x, gb):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return gb[0] * xhat + gb[1], xhat, rstd


def _layer_norm_back(dy, gb, xhat, rstd):
    dxhat = dy * gb[0]
    return rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def encode(params: CrossAttentionParams, tokens: np.ndarray):
    """Per-sample keys and output-projected values, each ``(N, T, D)`` float64.

    Samples are projected one at a time so every row's bits are independent
    of which other samples happen to be in the batch.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim == 2:
        tokens = tokens[None]
    if tokens.shape[-1] != params.dim:
        raise DataError(f"token dim {tokens.shape[-1]} != adapter dim {params.dim}")
    keys = np.empty(tokens.shape)
    vals = np.empty(tokens.shape)
    wk_t, wv_t, wo_t = params.w_k.T.copy(), params.w_v.T.copy(), params.w_o.T.copy()
    for n in range(tokens.shape[0]):
        zn, _, _ = _layer_norm(tokens[n], params.ln_in)
        keys[n] = zn @ wk_t
        vals[n] = (zn @ wv_t) @ wo_t
    return keys, vals


def project_queries(params: CrossAttentionParams, queries: np.ndarray) -> np.ndarray:
    qn, _, _ = _layer_norm(np.asarray(queries, dtype=np.float64), params.ln_q)
    return np.einsum("md,ed->me", qn, params.w_q)


def _attend(params, proj, keys, vals):
    # einsum keeps every query row on its own arithmetic path (compositionality)
    s = np.einsum("md,ntd->nmt", proj, keys) / math.sqrt(params.dim)
    s -= s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    h = np.einsum("nmt,ntd->nmd", a, vals)
    e, _, _ = _layer_norm(h, params.ln_post)
    return a, e


def forward(params: CrossAttentionParams, tokens, queries, heads=None):
    """Attended vectors ``e`` (M x D) and, given heads, logits ``y`` (M,)."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[-1] != params.dim:
        raise DataError(f"query dim {queries.shape[-1]} != adapter dim {params.dim}")
    keys, vals = encode(params, tokens)
    _, e = _attend(params, project_queries(params, queries), keys, vals)
    e = e[0]
    if heads is None:
        return e, None
    heads = np.atleast_2d(np.asarray(heads, dtype=np.float64))
    return e, np.einsum("md,md->m", e, heads)


def attention_weights(params: CrossAttentionParams, tokens, queries) -> np.ndarray:
    keys, vals = encode(params, tokens)
    a, _ = _attend(params, project_queries(params, np.atleast_2d(queries)), keys, vals)
    return a[0]


def logits_from_cache(params, keys, vals, queries, heads, chunk: int = 64) -> np.ndarray:
    """Logits ``(N, M)`` for cached samples against a bank of query units."""
    proj = project_queries(params, queries)
    heads = np.asarray(heads, dtype=np.float64)
    out = np.empty((keys.shape[0], proj.shape[0]))
    for s in range(0, keys.shape[0], chunk):
        _, e = _attend(params, proj, keys[s:s + chunk], vals[s:s + chunk])
        out[s:s + chunk] = np.einsum("nmd,md->nm", e, heads)
    return out


# --- loss and gradients ---------------------------------------------------

def loss_and_grads(params, keys, vals, q, v, targets, mask=None, loss="masked-bce",
                   per_sample=False):
    """Loss and analytic gradients for ``U`` units over a batch of ``B`` samples.

    ``targets`` and ``mask`` are ``(U, B)``. Under masked BCE a unit's loss is
    the mean over its unmasked samples, so masked pairs contribute exactly
    zero gradient. Under clique CE the units form one softmax per sample and
    ``targets`` is the one-hot class indicator. With ``per_sample`` the
    unreduced per-sample gradients ``(B, U, D)`` are returned instead.
    """
    B = keys.shape[0]
    U, D = q.shape
    if mask is None:
        mask = np.ones((U, B))
    qn, qhat, qrstd = _layer_norm(q, params.ln_q)
    proj = qn @ params.w_q.T
    scale = 1.0 / math.sqrt(D)
    s = (keys @ proj.T) * scale  # (B, T, U)
    s -= s.max(axis=1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=1, keepdims=True)
    h = np.swapaxes(a, 1, 2) @ vals  # (B, U, D)
    e, hhat, hrstd = _layer_norm(h, params.ln_post)
    y = np.einsum("bud,ud->bu", e, v)

    if loss == "masked-bce":
        t = targets.T
        m = mask.T
        count = np.maximum(mask.sum(axis=1), 1.0)
        per = np.logaddexp(0.0, y) - t * y
        total = float(((per * m).sum(axis=0) / count).sum())
        dy = m * (1.0 / (1.0 + np.exp(-y)) - t)
    elif loss == "clique-ce":
        t = targets.T
        lse = np.logaddexp.reduce(y, axis=1, keepdims=True)
        count = np.full(U, float(B))
        total = float(-(t * (y - lse)).sum() / B)
        dy = np.exp(y - lse) - t
    else:
        raise DataError(f"unknown loss {loss!r}")

    if per_sample:
        dv = dy[:, :, None] * e
    else:
        dv = np.einsum("bu,bud->ud", dy, e) / count[:, None]
    de = dy[:, :, None] * v[None]
    dh = _layer_norm_back(de, params.ln_post, hhat, hrstd)
    da = dh @ np.swapaxes(vals, 1, 2)  # (B, U, T)
    da = np.swapaxes(da, 1, 2)
    ds = a * (da - (a * da).sum(axis=1, keepdims=True)) * scale
    if per_sample:
        dproj = np.einsum("btu,btd->bud", ds, keys)
        dq = _layer_norm_back(dproj @ params.w_q, params.ln_q, qhat[None], qrstd[None])
        return total, dq, dv, y.T
    dproj = np.einsum("btu,btd->ud", ds, keys) / count[:, None]
    dq = _layer_norm_back(dproj @ params.w_q, params.ln_q, qhat, qrstd)
    return total, dq, dv, y.T


def grad_check(params, q, v, tokens, label, h: float = 1e-5) -> float:
    """Max normwise relative error between analytic and central-difference
    gradients of the single-sample BCE loss (float64 throughout)."""
    keys, vals = encode(params, tokens)
    q = np.asarray(q, dtype=np.float64)[None].copy()
    v = np.asarray(v, dtype=np.float64)[None].copy()
    t = np.array([[float(label)]])

    def f(qq, vv):
        return loss_and_grads(params, keys, vals, qq, vv, t)[0]

    _, gq, gv, _ = loss_and_grads(params, keys, vals, q, v, t)
    worst = 0.0
    for arr, g in ((q, gq), (v, gv)):
        num = np.zeros_like(arr)
        for i in range(arr.shape[1]):
            old = arr[0, i]
            arr[0, i] = old + h
            up = f(q, v)
            arr[0, i] = old - h
            down = f(q, v)
            arr[0, i] = old
            num[0, i] = (up - down) / (2 * h)
        scale = max(np.abs(g).max(), np.abs(num).max())
        if scale < 1e-12:
            continue
        worst = max(worst, float(np.abs(g - num).max() / scale))
    return worst


# --- training --------------------------------------------------------------

@dataclass
class TrainReport:
    losses: dict = field(default_factory=dict)  # group signature -> per-epoch loss
    skipped: list = field(default_factory=list)
    trained: list = field(default_factory=list)


@dataclass(frozen=True)
class DPSettings:
    """Per-step privacy knobs consumed by the group trainer."""

    clip_norm: float
    noise_multiplier: float


def training_groups(refined: RefinedShardGraph, loss: str = "masked-bce") -> list:
    """Parents sharing one outbound neighborhood train on one sample stream.

    Any forget request reaching one member reaches all of them (they point at
    the same shards), so a group is always retrained as a whole.
    """
    graph = refined.parent
    groups: dict = {}
    for p in range(len(graph)):
        if refined.by_parent[p]:
            groups.setdefault(graph.out_neighbors[p], []).append(p)
    out = sorted((tuple(members), nbhd) for nbhd, members in groups.items())
    if loss == "clique-ce":
        for members, nbhd in out:
            live = tuple(p for p in nbhd if refined.by_parent[p])
            if live != members:
                raise TrainingError(
                    f"clique-ce needs closed cliques; parents {members} read {nbhd}"
                )
            labels = [k[1] for p in members for k in refined.by_parent[p]]
            if len(set(labels)) != len(labels):
                raise TrainingError(f"clique {members} repeats a class label")
    return out


def _adamw(p, g, m, s, step, lr, cfg):
    p *= 1.0 - lr * cfg.weight_decay
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * g
    s *= cfg.beta2
    s += (1.0 - cfg.beta2) * g * g
    mhat = m / (1.0 - cfg.beta1 ** step)
    shat = s / (1.0 - cfg.beta2 ** step)
    p -= lr * mhat / (np.sqrt(shat) + cfg.eps)


def clip_per_sample(gq, gv, clip_norm, clipped):
    """Scale per-sample ``(B, U, D)`` gradients so the joint (q, v) norm of
    every pair flagged in ``clipped`` (B, U) is at most ``clip_norm``."""
    norms = np.sqrt((gq * gq).sum(-1) + (gv * gv).sum(-1))
    factor = np.where(clipped, np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300)), 1.0)
    return gq * factor[:, :, None], gv * factor[:, :, None]


def _dp_gradient(params, keys, vals, q, v, targets, dp, noise_rng):
    B = keys.shape[0]
    total, gq, gv, y = loss_and_grads(params, keys, vals, q, v, targets, per_sample=True)
    gq, gv = clip_per_sample(gq, gv, dp.clip_norm, targets.T == 0)
    gq = gq.sum(0)
    gv = gv.sum(0)
    sigma = dp.noise_multiplier * dp.clip_norm
    if sigma > 0:
        gq = gq + sigma * noise_rng.standard_normal(gq.shape)
        gv = gv + sigma * noise_rng.standard_normal(gv.shape)
    return total, gq / B, gv / B


def _train_group(params, keys, vals, parents, labels, unit_keys, seeds, cfg, dp=None):
    """Train one group's units on its neighborhood stream.

    ``parents``/``labels`` describe the group's samples (id-sorted); ``seeds``
    is ``(base, signature)`` where the signature folds in retrain counters.
    """
    base, signature = seeds
    D = params.dim
    U = len(unit_keys)
    q = np.empty((U, D))
    v = np.empty((U, D))
    for i, key in enumerate(unit_keys):
        r = seeding.rng(base, "inca_adapter", "init", key, signature)
        q[i] = r.standard_normal(D)
        v[i] = r.standard_normal(D) / math.sqrt(D)
    unit_parent = np.array([k[0] for k in unit_keys])
    unit_label = np.array([k[1] for k in unit_keys])
    targets = ((unit_parent[:, None] == parents[None]) & (unit_label[:, None] == labels[None]))
    targets = targets.astype(np.float64)
    order_rng = seeding.rng(base, "inca_adapter", "order", signature)
    noise_rng = seeding.rng(base, "dp_engine", "noise", signature)
    mq, sq, mv, sv = (np.zeros((U, D)) for _ in range(4))
    n = keys.shape[0]
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = order_rng.permutation(n)
        epoch_loss = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = np.sort(perm[s:s + cfg.batch_size])
            kb, vb, tb = keys[idx], vals[idx], targets[:, idx]
            if dp is None:
                loss, gq, gv, _ = loss_and_grads(params, kb, vb, q, v, tb, loss=cfg.loss)
            else:
                loss, gq, gv = _dp_gradient(params, kb, vb, q, v, tb, dp, noise_rng)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} for units {unit_keys[:3]}... at epoch {epoch}, step {step}"
                )
            step += 1
            _adamw(q, gq, mq, sq, step, lr, cfg)
            _adamw(v, gv, mv, sv, step, lr, cfg)
            epoch_loss += loss * idx.shape[0] / n
        history.append(epoch_loss)
    units = {
        key: QueryUnit(key, key[1], q[i].astype(np.float32), v[i].astype(np.float32))
        for i, key in enumerate(unit_keys)
    }
    return units, history


def _run_task(task):
    return _train_group(*task)


def train_queries(params: CrossAttentionParams, dataset: EmbeddingDataset,
                  refined: RefinedShardGraph, config: TrainConfig, counters=None,
                  parents=None, jobs: int = 1, dp: DPSettings | None = None,
                  report: TrainReport | None = None, cache=None, only_keys=None) -> dict:
    """Train the query units of ``refined`` (or only of groups touching ``parents``).

    Each unit sees exactly the samples of its outbound neighborhood. Seeds
    derive from ``config.seed``, the group's parents and their retrain
    ``counters``, so the result is a pure function of its inputs and is
    independent of ``jobs``. ``only_keys`` trains just those units of their
    groups, on the same stream.
    """
    if dp is not None and config.loss != "masked-bce":
        raise TrainingError("DP training supports only masked-bce")
    counters = dict(counters or {})
    wanted = None if parents is None else set(parents)
    keys, vals = cache if cache is not None else encode(params, dataset.tokens)
    tasks = []
    for members, nbhd in training_groups(refined, config.loss):
        if wanted is not None and not wanted.intersection(members):
            continue
        sample_ids = refined.parent_samples(nbhd)
        unit_keys = [k for p in members for k in refined.by_parent[p]]
        if only_keys is not None:
            unit_keys = [k for k in unit_keys if k in only_keys]
            if not unit_keys:
                continue
        if sample_ids.shape[0] == 0:
            if report is not None:
                report.skipped.extend(unit_keys)
            continue
        rows = dataset.positions(sample_ids.tolist())
        owner = refined.parent.owner
        sample_parents = np.array([owner[int(x)] for x in sample_ids.tolist()])
        signature = tuple((p, int(counters.get(p, 0))) for p in members)
        tasks.append((
            params, keys[rows], vals[rows], sample_parents, dataset.labels[rows],
            unit_keys, (config.seed, signature), config, dp,
        ))
    if jobs is None or jobs < 1:
        jobs = os.cpu_count() or 1
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_run_task(t) for t in tasks]
    units = {}
    for task, (trained, history) in zip(tasks, results):
        units.update(trained)
        if report is not None:
            report.losses[task[6][1]] = history
            report.trained.extend(trained)
    return units
