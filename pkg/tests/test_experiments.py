import json
import math

import pytest

from shardsafe import experiments as ex
from shardsafe.errors import DataError

DATA = {"num_classes": 4, "samples_per_class": 14, "token_count": 2, "dim": 8,
        "cluster_scale": 3.0, "seed": 0}
TRAIN = {"epochs": 2, "batch_size": 8}


def spec(kind, **kw):
    base = dict(name=f"t_{kind}", kind=kind, data=DATA, test_per_class=4, train=TRAIN,
                shard_counts=[4], n_f=2, seeds=[0, 1])
    base.update(kw)
    return ex.ExperimentSpec(**base)


def test_spec_json_roundtrip(tmp_path):
    s = spec("methods", methods=list(ex.METHODS))
    p = tmp_path / "s.json"
    p.write_text(s.to_json())
    assert ex.ExperimentSpec.load(p) == s
    with pytest.raises(DataError):
        ex.ExperimentSpec.from_json('{"name": "x", "bogus": 1}')
    with pytest.raises(DataError):
        spec("methods", methods=["Nope"])
    with pytest.raises(DataError):
        spec("ablation")


def test_method_mapping():
    train, _ = ex._data(spec("methods"), 0)
    g, pol = ex.method_setup("SISA", train, 4, 2, 0)
    assert not g.edges and g.topology == "uniform" and pol.mode == "fixed" and pol.value == 0
    g, pol = ex.method_setup("SAFE", train, 4, 2, 0)
    assert g.topology == "bilevel" and g.metadata["n_f"] == 2 and pol.mode == "auto"
    g, pol = ex.method_setup("NoprotoSAFE", train, 4, 2, 0)
    assert pol.value == 0
    g, pol = ex.method_setup("Prototypes-only", train, 4, 2, 0)
    assert g is None and pol.value == 1.0
    assert ex._fine(6, 4) == 3 and ex._fine(5, 2) == 1


def test_method_comparison_rows():
    s = spec("methods", methods=list(ex.METHODS), shard_counts=[1, 4])
    cells = ex.run_method_comparison(s)
    assert len(cells) == 2 * 2 * len(ex.METHODS)
    proto = {(c.n, c.seed): c.accuracy for c in cells if c.method == "Prototypes-only"}
    assert proto[(1, 0)] == proto[(4, 0)]
    assert all(0 <= c.accuracy <= 1 for c in cells)


def test_instant_forgetting_rows():
    s = spec("instant", methods=["SISA", "NoprotoSAFE"], num_requests=3)
    rows = ex.run_instant_forgetting(s)
    assert {r["step"] for r in rows} == {0, 1, 2, 3}
    assert all(r["relative"] == 1.0 for r in rows if r["step"] == 0)
    assert len(rows) == 2 * 2 * 4


def test_dp_tradeoff_rows():
    s = spec("dp", k_grid=[1, 8], seeds=[0])
    rows = ex.run_dp_tradeoff(s)
    assert rows[0]["mode"] == "exact" and math.isinf(rows[0]["epsilon"])
    dp_rows = [r for r in rows if r["mode"] == "dp"]
    assert [r["k"] for r in dp_rows] == [1, 8]
    assert all(r["max_k"] >= r["k"] for r in dp_rows)
    assert dp_rows[0]["epsilon"] > dp_rows[1]["epsilon"]


def test_cross_domain_equal_budgets():
    data = {**DATA, "num_domains": 2, "domain_scale": 1.0}
    s = spec("cross_domain", data=data, seeds=[0])
    rows = ex.run_cross_domain(s)
    assert len(rows) == 4 and len({r["nodes"] for r in rows}) == 1
    assert all("domain_0" in r and "domain_1" in r for r in rows)
    with pytest.raises(DataError):
        ex.run_cross_domain(spec("cross_domain", seeds=[0]))


def test_concat_graphs_shifts_edges():
    from shardsafe.shard_graph import ShardGraph
    a = ShardGraph(([1], [2]), frozenset({(0, 1)}))
    b = ShardGraph(([3], [4]), frozenset({(1, 0)}))
    g = ex.concat_graphs([a, b])
    assert g.edges == frozenset({(0, 1), (3, 2)}) and len(g) == 4


def test_runs_are_byte_reproducible(tmp_path):
    s = spec("pareto", nf_grid=[1, 2], output=str(tmp_path / "a"))
    ex.run_experiment(s)
    first = (tmp_path / "a" / "t_pareto.csv").read_bytes()
    ex.run_experiment(s)
    assert (tmp_path / "a" / "t_pareto.csv").read_bytes() == first
    summary = json.loads((tmp_path / "a" / "t_pareto.json").read_text())
    assert summary["kind"] == "pareto" and summary["engine_version"]
    assert {(a["n"], a["n_f"]) for a in summary["aggregate"]} == {(4, 1), (4, 2)}


def test_mean_by_ignores_nan():
    rows = [{"g": 1, "v": 1.0}, {"g": 1, "v": float("nan")}, {"g": 1, "v": 3.0}]
    assert ex.mean_by(rows, ["g"], "v") == {(1,): (2.0, 1.0)}
