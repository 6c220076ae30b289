import math

import numpy as np
import pytest

from shardsafe import inca_adapter as ia
from shardsafe.embedding_store import EmbeddingDataset, SyntheticSpec, generate_synthetic
from shardsafe.ensemble import LambdaPolicy, fit_safe, safe_predict
from shardsafe.errors import DataError, TrainingError
from shardsafe.shard_graph import (
    ShardGraph,
    build_bilevel,
    build_random_degree,
    build_uniform,
    neighborhood_union,
    refine,
)


def _ln(x):
    mu = sum(x) / len(x)
    var = sum((t - mu) ** 2 for t in x) / len(x)
    return [(t - mu) / math.sqrt(var + ia.LN_EPS) for t in x]


def _matvec(W, x):
    return [sum(W[i][j] * x[j] for j in range(len(x))) for i in range(len(W))]


def _dense_logit(params, tokens, q, v):
    """Straight-line scalar forward pass, one token at a time."""
    D = params.dim
    wq, wk, wv, wo = (m.tolist() for m in (params.w_q, params.w_k, params.w_v, params.w_o))
    qp = _matvec(wq, _ln(list(q)))
    zs = [_ln(list(t)) for t in tokens]
    scores = [sum(a * b for a, b in zip(qp, _matvec(wk, z))) / math.sqrt(D) for z in zs]
    m = max(scores)
    w = [math.exp(s - m) for s in scores]
    w = [x / sum(w) for x in w]
    mixed = [sum(w[t] * _matvec(wv, zs[t])[i] for t in range(len(zs))) for i in range(D)]
    e = _ln(_matvec(wo, mixed))
    return sum(a * b for a, b in zip(e, v))


def test_forward_matches_dense_oracle():
    rng = np.random.default_rng(0)
    for trial in range(20):
        D, T = 6, 3
        params = ia.init_shared(D, trial)
        tokens = rng.standard_normal((T, D))
        q, v = rng.standard_normal(D), rng.standard_normal(D)
        _, y = ia.forward(params, tokens, q, v)
        assert abs(y[0] - _dense_logit(params, tokens, q, v)) <= 1e-6


def test_attention_rows_are_distributions():
    params = ia.init_shared(5, 1)
    rng = np.random.default_rng(1)
    a = ia.attention_weights(params, rng.standard_normal((4, 5)), rng.standard_normal((3, 5)))
    assert a.shape == (3, 4)
    assert np.allclose(a.sum(1), 1.0) and (a >= 0).all()


def test_compositionality_is_bitwise():
    rng = np.random.default_rng(2)
    params = ia.init_shared(8, 0)
    tokens = rng.standard_normal((5, 3, 8))
    q, v = rng.standard_normal((7, 8)), rng.standard_normal((7, 8))
    keys, vals = ia.encode(params, tokens)
    batched = ia.logits_from_cache(params, keys, vals, q, v)
    for m in range(7):
        single = ia.logits_from_cache(params, keys, vals, q[m:m + 1], v[m:m + 1])
        assert single[:, 0].tobytes() == batched[:, m].tobytes()
    assert ia.logits_from_cache(params, keys, vals, q, v, chunk=2).tobytes() == batched.tobytes()


def test_encode_rows_do_not_depend_on_batch():
    rng = np.random.default_rng(3)
    params = ia.init_shared(8, 0)
    tokens = rng.standard_normal((6, 3, 8))
    k_all, v_all = ia.encode(params, tokens)
    k_one, v_one = ia.encode(params, tokens[4])
    assert k_one[0].tobytes() == k_all[4].tobytes() and v_one[0].tobytes() == v_all[4].tobytes()


def test_dim_mismatch():
    params = ia.init_shared(4, 0)
    with pytest.raises(DataError):
        ia.encode(params, np.zeros((2, 3, 5)))
    with pytest.raises(DataError):
        ia.forward(params, np.zeros((3, 4)), np.zeros(5))


def test_grad_check_small_instances():
    rng = np.random.default_rng(4)
    for trial in range(10):
        params = ia.init_shared(6, trial)
        err = ia.grad_check(params, rng.standard_normal(6), rng.standard_normal(6) / 3,
                            rng.standard_normal((3, 6)), trial % 2)
        assert err <= 1e-4


def _numeric(f, arr, h=1e-6):
    out = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        out[i] = (up - down) / (2 * h)
    return out


@pytest.mark.parametrize("loss", ["masked-bce", "clique-ce"])
def test_batched_gradients_match_finite_differences(loss):
    rng = np.random.default_rng(5)
    params = ia.init_shared(5, 0)
    keys, vals = ia.encode(params, rng.standard_normal((6, 3, 5)))
    q, v = rng.standard_normal((3, 5)), rng.standard_normal((3, 5)) / 2
    if loss == "clique-ce":
        targets = np.eye(3)[rng.integers(0, 3, 6)].T
        mask = None
    else:
        targets = (rng.random((3, 6)) < 0.4).astype(float)
        mask = (rng.random((3, 6)) < 0.7).astype(float)

    def f():
        return ia.loss_and_grads(params, keys, vals, q, v, targets, mask, loss)[0]

    _, dq, dv, _ = ia.loss_and_grads(params, keys, vals, q, v, targets, mask, loss)
    assert np.allclose(dq, _numeric(f, q), atol=1e-7)
    assert np.allclose(dv, _numeric(f, v), atol=1e-7)


def test_masked_pairs_contribute_nothing():
    rng = np.random.default_rng(6)
    params = ia.init_shared(5, 0)
    keys, vals = ia.encode(params, rng.standard_normal((4, 3, 5)))
    q, v = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
    t = np.array([[1.0, 0, 0, 1], [0, 1, 0, 0]])
    mask = np.array([[1.0, 1, 0, 0], [1, 1, 1, 1]])
    _, dq, dv, _ = ia.loss_and_grads(params, keys, vals, q, v, t, mask)
    k2, v2 = keys.copy(), vals.copy()
    k2[2:] += rng.standard_normal(k2[2:].shape)
    v2[2:] *= 3.0
    t2 = t.copy()
    t2[0, 3] = 0.0
    _, dq2, dv2, _ = ia.loss_and_grads(params, k2, v2, q, v, t2, mask)
    assert dq2[0].tobytes() == dq[0].tobytes() and dv2[0].tobytes() == dv[0].tobytes()
    assert not np.array_equal(dq2[1], dq[1])


def test_per_sample_gradients_sum_to_batch():
    rng = np.random.default_rng(7)
    params = ia.init_shared(5, 0)
    keys, vals = ia.encode(params, rng.standard_normal((6, 2, 5)))
    q, v = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    t = (rng.random((3, 6)) < 0.5).astype(float)
    _, dq, dv, _ = ia.loss_and_grads(params, keys, vals, q, v, t)
    _, pq, pv, _ = ia.loss_and_grads(params, keys, vals, q, v, t, per_sample=True)
    assert np.allclose(pq.sum(0) / 6, dq, atol=1e-14) and np.allclose(pv.sum(0) / 6, dv, atol=1e-14)


def test_clipping_contract():
    rng = np.random.default_rng(8)
    gq, gv = rng.standard_normal((10, 4, 6)) * 5, rng.standard_normal((10, 4, 6)) * 5
    flags = rng.random((10, 4)) < 0.5
    cq, cv = ia.clip_per_sample(gq, gv, 0.7, flags)
    norms = np.sqrt((cq ** 2).sum(-1) + (cv ** 2).sum(-1))
    assert (norms[flags] <= 0.7 + 1e-12).all()
    assert np.array_equal(cq[~flags], gq[~flags])


def test_masking_isolation():
    data = generate_synthetic(SyntheticSpec(4, 6, 2, 6, seed=3))
    graph = build_random_degree(data, 6, 1, seed=1)
    refined = refine(graph, data)
    params = ia.init_shared(6, 0)
    cfg = ia.TrainConfig(epochs=2, batch_size=4, seed=1)
    before = ia.train_queries(params, data, refined, cfg)
    rng = np.random.default_rng(0)
    for key in refined.keys[:10]:
        reach = set(neighborhood_union(refined, key).tolist())
        outside = [x for x in data.ids.tolist() if x not in reach]
        if not outside:
            continue
        x = outside[rng.integers(len(outside))]
        tokens = data.tokens.copy()
        tokens[data.positions([x])[0]] += 3.0
        perturbed = EmbeddingDataset(data.ids, data.sources, data.labels, tokens, data.num_classes)
        after = ia.train_queries(params, perturbed, refined, cfg)
        assert after[key].equals(before[key])


def test_training_deterministic_and_job_independent():
    data = generate_synthetic(SyntheticSpec(4, 6, 2, 6, seed=3))
    refined = refine(build_uniform(data, 3, 0), data)
    params = ia.init_shared(6, 0)
    cfg = ia.TrainConfig(epochs=2, batch_size=4, seed=2)
    a = ia.train_queries(params, data, refined, cfg, jobs=1)
    b = ia.train_queries(params, data, refined, cfg, jobs=1)
    c = ia.train_queries(params, data, refined, cfg, jobs=2)
    assert set(a) == set(refined.keys)
    assert all(a[k].equals(b[k]) and a[k].equals(c[k]) for k in a)
    d = ia.train_queries(params, data, refined, ia.TrainConfig(epochs=2, batch_size=4, seed=3))
    assert not all(a[k].equals(d[k]) for k in a)
    assert all(u.q.dtype == np.float32 and u.v.dtype == np.float32 for u in a.values())


def test_counters_change_only_their_group():
    data = generate_synthetic(SyntheticSpec(4, 6, 2, 6, seed=3))
    refined = refine(build_uniform(data, 3, 0), data)
    params = ia.init_shared(6, 0)
    cfg = ia.TrainConfig(epochs=2, batch_size=4)
    a = ia.train_queries(params, data, refined, cfg)
    b = ia.train_queries(params, data, refined, cfg, counters={1: 1})
    for k in a:
        assert a[k].equals(b[k]) == (k[0] != 1)


def test_separable_two_class_clique_fits():
    data = generate_synthetic(SyntheticSpec(2, 20, 4, 16, cluster_scale=5.0, seed=0))
    graph = build_uniform(data, 1, 0)
    model = fit_safe(data, graph, ia.TrainConfig(seed=0), LambdaPolicy.zero())
    _, labels = safe_predict(model, data.tokens)
    assert (labels == data.labels).mean() == 1.0


def test_loss_trends_down():
    data = generate_synthetic(SyntheticSpec(3, 20, 4, 16, cluster_scale=3.0, seed=1))
    report = ia.TrainReport()
    ia.train_queries(ia.init_shared(16, 0), data, refine(build_uniform(data, 1, 0), data),
                     ia.TrainConfig(epochs=10), report=report)
    (hist,) = report.losses.values()
    assert hist[-1] < hist[0] and np.mean(hist[-3:]) < np.mean(hist[:3])


def test_clique_ce_trains_and_validates():
    data = generate_synthetic(SyntheticSpec(4, 10, 2, 8, cluster_scale=4.0, seed=1))
    refined = refine(build_bilevel(data, 2, 2, 0), data)
    units = ia.train_queries(ia.init_shared(8, 0), data, refined,
                             ia.TrainConfig(epochs=3, loss="clique-ce"))
    assert set(units) == set(refined.keys)
    open_graph = refine(build_random_degree(data, 4, 1, 0), data)
    with pytest.raises(TrainingError, match="closed cliques"):
        ia.train_queries(ia.init_shared(8, 0), data, open_graph, ia.TrainConfig(loss="clique-ce"))


def test_dp_degenerates_to_plain_training():
    data = generate_synthetic(SyntheticSpec(3, 6, 2, 6, seed=3))
    refined = refine(build_random_degree(data, 3, 1, 0), data)
    params = ia.init_shared(6, 0)
    cfg = ia.TrainConfig(epochs=2, batch_size=4)
    plain = ia.train_queries(params, data, refined, cfg)
    dp = ia.train_queries(params, data, refined, cfg, dp=ia.DPSettings(1e12, 0.0))
    for k in plain:
        assert np.allclose(plain[k].q, dp[k].q, atol=1e-5)
        assert np.allclose(plain[k].v, dp[k].v, atol=1e-5)
    with pytest.raises(TrainingError):
        ia.train_queries(params, data, refined, ia.TrainConfig(loss="clique-ce"),
                         dp=ia.DPSettings(1.0, 1.0))


def test_empty_node_is_skipped_and_reported():
    data = generate_synthetic(SyntheticSpec(2, 4, 1, 4, seed=0))
    graph = ShardGraph((data.ids[:4], np.array([], dtype=np.uint64), data.ids[4:]), frozenset())
    report = ia.TrainReport()
    units = ia.train_queries(ia.init_shared(4, 0), data, refine(graph, data),
                             ia.TrainConfig(epochs=1), report=report)
    assert {k[0] for k in units} == {0, 2}


def test_nan_loss_aborts(monkeypatch):
    data = generate_synthetic(SyntheticSpec(2, 4, 1, 4, seed=0))
    refined = refine(build_uniform(data, 1, 0), data)
    real = ia.loss_and_grads

    def poisoned(*args, **kw):
        total, dq, dv, y = real(*args, **kw)
        return float("nan"), dq, dv, y

    monkeypatch.setattr(ia, "loss_and_grads", poisoned)
    with pytest.raises(TrainingError, match="non-finite"):
        ia.train_queries(ia.init_shared(4, 0), data, refined, ia.TrainConfig(epochs=1))


def test_config_validation_and_schedule():
    with pytest.raises(DataError):
        ia.TrainConfig(epochs=0)
    with pytest.raises(DataError):
        ia.TrainConfig(loss="mse")
    cfg = ia.TrainConfig(epochs=4, lr=0.2)
    assert cfg.lr_at(0) == 0.2 and abs(cfg.lr_at(2) - 0.1) < 1e-15
    assert ia.TrainConfig.from_dict(cfg.to_dict()) == cfg
