"""``shardsafe`` command line.

Exit codes: 0 success, 1 usage error, 2 data error (bad input, failed
verification), 3 budget or infeasibility.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from shardsafe import __version__, cost_sim, dp_engine, ensemble, experiments, forgetting
from shardsafe.embedding_store import (
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_per_class,
)
from shardsafe.errors import BudgetError, DataError, ShardSafeError
from shardsafe.inca_adapter import TrainConfig
from shardsafe.shard_graph import (
    build_bilevel,
    build_disjoint_cliques,
    build_random_degree,
    build_uniform,
    load_graph,
    save_graph,
)

EXIT_USAGE, EXIT_DATA, EXIT_BUDGET = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("SHARDSAFE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise DataError(f"SHARDSAFE_SEED={env!r} is not an integer") from None
    raise _UsageError(f"{args.command} needs --seed (or SHARDSAFE_SEED)")


class _UsageError(Exception):
    pass


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True, default=str))


def _ids(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise _UsageError(f"--ids expects comma-separated integers, got {text!r}") from None


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, lr=args.lr, weight_decay=args.weight_decay,
                       batch_size=args.batch_size, loss=args.loss, seed=_seed(args))


def _policy(args) -> ensemble.LambdaPolicy:
    if args.lam == "auto":
        return ensemble.LambdaPolicy(proto_scale=args.proto_scale, mixing=args.mixing)
    try:
        value = float(args.lam)
    except ValueError:
        raise _UsageError(f"--lambda expects 'auto' or a number, got {args.lam!r}") from None
    return ensemble.LambdaPolicy("fixed", value, args.proto_scale, args.mixing)


# --- subcommands -------------------------------------------------------------

def cmd_gen_data(args):
    spec = SyntheticSpec(args.classes, args.per_class, args.tokens, args.dim, args.cluster_scale,
                         args.noise, args.domains, args.domain_scale, _seed(args), args.sample_noise)
    data = generate_synthetic(spec)
    if args.test_per_class:
        if not args.test_out:
            raise _UsageError("--test-per-class needs --test-out")
        data, test = split_per_class(data, args.test_per_class, _seed(args))
        save_dataset(test, args.test_out)
    save_dataset(data, args.out)
    _emit({"samples": len(data), "classes": data.num_classes, "out": args.out})


def cmd_build_graph(args):
    data = load_dataset(args.data)
    seed = _seed(args)
    if args.topology != "bilevel" and args.n is None:
        raise _UsageError(f"{args.topology} needs --n")
    if args.topology == "uniform":
        g = build_uniform(data, args.n, seed)
    elif args.topology == "random_degree":
        g = build_random_degree(data, args.n, args.d, seed)
    elif args.topology == "cliques":
        g = build_disjoint_cliques(data, args.n, args.d, seed)
    else:
        if args.n_c is None or args.n_f is None:
            raise _UsageError("bilevel needs --n-c and --n-f")
        g = build_bilevel(data, args.n_c, args.n_f, seed)
    save_graph(g, args.out)
    _emit({"nodes": len(g), "edges": len(g.edges), "topology": g.topology, "digest": g.digest()})


def _train(args, dp=None):
    data = load_dataset(args.data)
    graph = load_graph(args.graph)
    model = ensemble.fit_safe(data, graph, _train_config(args), _policy(args), jobs=args.jobs,
                              normalize=not args.no_normalize, dp=dp)
    ensemble.save_model(model, args.out)
    _emit({"units": len(model.units), "lambda": model.lam(), "out": args.out})
    return model


def cmd_train(args):
    _train(args)


def cmd_eval(args):
    model = ensemble.load_model(args.model)
    data = load_dataset(args.data)
    _emit({"accuracy": ensemble.accuracy(model, data), "samples": len(data)})


def cmd_predict(args):
    model = ensemble.load_model(args.model)
    data = load_dataset(args.data)
    probs, labels = ensemble.safe_predict(model, data.tokens)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "probability"])
        for i, y, p in zip(data.ids.tolist(), labels.tolist(), probs.max(axis=1).tolist()):
            w.writerow([i, y, repr(p)])
    _emit({"predictions": len(data), "out": args.out})


def cmd_forget(args):
    model = ensemble.load_model(args.model)
    data = load_dataset(args.data)
    if (args.ids is None) == (args.node is None):
        raise _UsageError("forget needs exactly one of --ids or --node")
    if args.ids is not None:
        request = forgetting.ForgetRequest("samples", tuple(_ids(args.ids)))
    else:
        request = forgetting.ForgetRequest("node", (args.node,))
    model, data, report = forgetting.apply_request(model, data, request, args.jobs)
    ensemble.save_model(model, args.out_model)
    save_dataset(data, args.out_data)
    if args.journal:
        forgetting.append_journal(args.journal, request, report)
    _emit(report.to_dict())


def cmd_instant_forget(args):
    model = ensemble.load_model(args.model)
    data = load_dataset(args.data)
    model, data, job = forgetting.instant_forget(model, data, args.node)
    ensemble.save_model(model, args.out_model)
    save_dataset(data, args.out_data)
    if args.job_out:
        with open(args.job_out, "w") as fh:
            json.dump(job.to_dict(), fh)
    _emit({"tombstoned": len(model.tombstones), "live_units": len(model.live_keys()),
           "retrain_job": job.to_dict()})


def fixtures(seed: int) -> dict:
    """Small shipped scenarios for ``verify-unlearn``: (graph, dataset, request)."""
    data = generate_synthetic(SyntheticSpec(4, 8, 2, 8, seed=seed))
    first = int(data.ids[0])
    return {
        "edgeless-sample": (build_uniform(data, 4, seed), data,
                            forgetting.ForgetRequest("samples", (first,))),
        "clique-node": (build_disjoint_cliques(data, 4, 2, seed), data,
                        forgetting.ForgetRequest("node", (1,))),
        "random-batch": (build_random_degree(data, 6, 2, seed), data,
                         forgetting.ForgetRequest("samples", tuple(int(x) for x in data.ids[:3]))),
        "bilevel-sample": (build_bilevel(data, 2, 2, seed), data,
                           forgetting.ForgetRequest("samples", (first,))),
    }


def cmd_verify_unlearn(args):
    seed = _seed(args)
    config = TrainConfig(epochs=args.epochs, batch_size=8, seed=seed)
    if args.data or args.graph:
        if not (args.data and args.graph and (args.ids or args.node is not None)):
            raise _UsageError("custom verification needs --data, --graph and --ids or --node")
        kind, targets = ("samples", _ids(args.ids)) if args.ids else ("node", [args.node])
        cases = {"custom": (load_graph(args.graph), load_dataset(args.data),
                            forgetting.ForgetRequest(kind, tuple(targets)))}
    else:
        cases = fixtures(seed)
        if args.fixture != "all":
            if args.fixture not in cases:
                raise _UsageError(f"unknown fixture {args.fixture!r}; choose from {sorted(cases)}")
            cases = {args.fixture: cases[args.fixture]}
    failed = False
    for name, (graph, data, request) in cases.items():
        verdict = forgetting.verify_unlearning(graph, data, request, config, jobs=args.jobs)
        if verdict.exact:
            print(f"{name}: EXACT: byte-identical")
        else:
            failed = True
            print(f"{name}: MISMATCH: max divergence {verdict.max_divergence:g}")
    return EXIT_DATA if failed else 0


def cmd_simulate_cost(args):
    stochastic = args.topology == "random_degree"
    seed = _seed(args) if stochastic else (args.seed or 0)
    cfg = cost_sim.CostTrialConfig(args.topology, args.nodes, args.d, args.shard_size,
                                   args.trials, seed, args.regime_c)
    est = cost_sim.simulate_expected_cost(cfg)
    if args.csv:
        cost_sim.write_cost_csv([est], args.csv)
    closed = cost_sim.expected_cost_closed_form(args.topology, args.d, args.shard_size)
    print(f"{est.mean:g}")
    _emit({**est.row(), "closed_form": closed})


def cmd_pareto(args):
    seed = _seed(args)
    train = load_dataset(args.data)
    test = load_dataset(args.test_data)
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=seed)
    seeds = [seed + i for i in range(args.repeats)]
    rows = cost_sim.pareto_sweep(train, test, args.n, args.nf, cfg, seeds, jobs=args.jobs)
    cost_sim.write_pareto_csv(rows, args.out)
    _emit({"rows": len(rows), "out": args.out})


def cmd_dp_budget(args):
    k = dp_engine.max_requests(args.eps, args.delta, args.alpha, args.beta)
    eps_g, delta_g = dp_engine.group_privacy(args.eps, args.delta, k)
    print(f"k={k}")
    _emit({"max_k": k, "epsilon_g": eps_g, "delta_g": delta_g})


def cmd_dp_train(args):
    dp = dp_engine.DPConfig(args.eps, args.delta, args.clip, args.epochs)
    accountant = dp_engine.Accountant(dp, dp_engine.Budget(args.alpha, args.beta))
    model = _train(args, dp=dp)
    if args.accountant_out:
        accountant.save(args.accountant_out)
    _emit({"max_k": accountant.max_k, "noise_multiplier": dp.noise_multiplier,
           "units": len(model.units)})


def cmd_experiment(args):
    spec = experiments.ExperimentSpec.load(args.spec)
    if args.output:
        spec.output = args.output
    if args.seed is not None:
        spec.seeds = [args.seed + i for i in range(len(spec.seeds))]
    _, summary = experiments.run_experiment(spec, jobs=args.jobs)
    for row in summary["aggregate"]:
        print(json.dumps(row, sort_keys=True))


# --- parser ------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--data", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--loss", choices=["masked-bce", "clique-ce"], default="masked-bce")
    p.add_argument("--lambda", dest="lam", default="auto", help="'auto' or a fixed value in [0, 1]")
    p.add_argument("--proto-scale", type=float, default=10.0)
    p.add_argument("--mixing", choices=["prob", "raw"], default="prob")
    p.add_argument("--no-normalize", action="store_true", help="unnormalized prototype sums")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base seed (else SHARDSAFE_SEED)")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    common.add_argument("--config", help="JSON file of flag defaults")

    parser = _Parser(prog="shardsafe", description="Exact unlearning with shard-graph adapters.")
    parser.add_argument("--version", action="version", version=f"shardsafe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic SEMB1 dataset")
    p.add_argument("--classes", type=int, default=16)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--tokens", type=int, default=4)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--cluster-scale", type=float, default=5.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--sample-noise", type=float, default=0.0)
    p.add_argument("--domains", type=int, default=1)
    p.add_argument("--domain-scale", type=float, default=1.0)
    p.add_argument("--test-per-class", type=int, default=0)
    p.add_argument("--test-out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-graph", parents=[common], help="shard a dataset into a graph")
    p.add_argument("--data", required=True)
    p.add_argument("--topology", choices=["uniform", "bilevel", "random_degree", "cliques"],
                   required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--n-c", type=int)
    p.add_argument("--n-f", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", parents=[common], help="train a SAFE model")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="accuracy of a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="write per-sample predictions as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("forget", parents=[common], help="exactly forget samples or a shard")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ids", help="comma-separated sample ids")
    p.add_argument("--node", type=int, help="shard index to drop")
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-data", required=True)
    p.add_argument("--journal", help="append the request and report to this JSON-lines file")
    p.set_defaults(func=cmd_forget)

    p = sub.add_parser("instant-forget", parents=[common], help="drop a shard without retraining")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--node", type=int, required=True)
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-data", required=True)
    p.add_argument("--job-out", help="write the deferred retrain job as JSON")
    p.set_defaults(func=cmd_instant_forget)

    p = sub.add_parser("verify-unlearn", parents=[common],
                       help="compare forget path with scratch training, byte for byte")
    p.add_argument("--fixture", default="all")
    p.add_argument("--data")
    p.add_argument("--graph")
    p.add_argument("--ids")
    p.add_argument("--node", type=int)
    p.add_argument("--epochs", type=int, default=3)
    p.set_defaults(func=cmd_verify_unlearn)

    p = sub.add_parser("simulate-cost", parents=[common], help="Monte Carlo expected forget cost")
    p.add_argument("--topology", choices=list(cost_sim.COST_TOPOLOGIES), required=True)
    p.add_argument("--nodes", type=int, default=4096)
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--shard-size", type=int, required=True)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--regime-c", type=float, default=1.0)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_simulate_cost)

    p = sub.add_parser("pareto", parents=[common], help="accuracy vs cost over (n, n_f)")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--n", type=lambda s: [int(x) for x in s.split(",")], required=True)
    p.add_argument("--nf", type=lambda s: [int(x) for x in s.split(",")], default=[1, 2, 4])
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("dp-budget", parents=[common], help="forget requests a DP budget allows")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--beta", type=float, default=1.0)
    p.set_defaults(func=cmd_dp_budget)

    p = sub.add_parser("dp-train", parents=[common], help="train with DP on neighbor data")
    _add_train_flags(p)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--accountant-out")
    p.set_defaults(func=cmd_dp_train)

    p = sub.add_parser("experiment", parents=[common], help="run an experiment spec (JSON)")
    p.add_argument("--spec", required=True)
    p.add_argument("--output", help="override the spec's output directory")
    p.set_defaults(func=cmd_experiment)
    return parser


def _apply_config(parser, argv):
    """Parse ``argv`` with ``--config`` JSON values as defaults; flags still win."""
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            with open(known.config) as fh:
                overrides = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read --config {known.config}: {exc}") from None
        if not isinstance(overrides, dict):
            raise DataError("--config must hold a JSON object")
        choices = parser._subparsers._group_actions[0].choices
        command = next((a for a in argv if a in choices), None)
        if command is None:
            raise _UsageError("--config needs a subcommand")
        sub = choices[command]
        overrides = {k.replace("-", "_"): v for k, v in overrides.items()}
        actions = {a.dest: a for a in sub._actions}
        unknown = sorted(set(overrides) - set(actions))
        if unknown:
            raise _UsageError(f"--config has unknown keys {unknown}")
        for k in overrides:
            actions[k].required = False
        sub.set_defaults(**overrides)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            args = _apply_config(parser, argv)
        except SystemExit as exc:  # argparse; --help and --version exit 0
            return int(exc.code or 0)
        code = args.func(args)
        return int(code or 0)
    except _UsageError as exc:
        print(f"shardsafe: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BudgetError as exc:
        print(f"shardsafe: budget error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (ShardSafeError, OSError) as exc:
        print(f"shardsafe: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
