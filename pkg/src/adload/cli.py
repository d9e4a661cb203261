"""Command-line entry point: ``adload <command> ...``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}") from exc


def _keyvals(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = int(v) if v.strip().lstrip("-").isdigit() else float(v)
        except ValueError as exc:
            raise UsageError(f"--set {k}: not a number") from exc
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_collect(args):
    from .agents import OnlineConfig, load_agents, save_agents, train_online_cartpole
    from .dataset import BehaviorPolicy, collect
    from .envs import make_env

    params = _keyvals(args.set)
    try:
        env = make_env(args.env, **params)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    if args.epsilon < 1.0:
        if args.env != "cartpole":
            raise UsageError("session data is collected with randomized treatment (--epsilon 1)")
        if args.expert:
            expert = load_agents(args.expert)[0]
        else:
            expert = train_online_cartpole(env.physics, OnlineConfig(total_steps=args.expert_steps, seed=args.expert_seed))
            save_agents(Path(args.out).with_suffix(".expert.orlw"), [expert])
        policy = BehaviorPolicy(expert.greedy, args.epsilon)
    else:
        policy = BehaviorPolicy()
    ds = collect(env, policy, args.n, np.random.default_rng(args.seed))
    ds.save(args.out)
    if args.csv:
        ds.to_csv(args.csv)
    print(f"wrote {len(ds)} transitions to {args.out}")


def cmd_train(args):
    from .agents import AgentConfig, save_agents, train_offline
    from .dataset import OfflineDataset

    ds = OfflineDataset.load(args.data)
    if args.normalization == "identity":
        ds = ds.with_normalization(np.zeros(ds.state_dim), np.ones(ds.state_dim))
    objectives = [o.strip() for o in args.objective.split(",")]
    agents = []
    for obj in objectives:
        try:
            cfg = AgentConfig(
                variant=args.variant, gamma=args.gamma, delta=args.delta, reg_mode=args.reg_mode, alpha=args.alpha,
                objective=obj, target_sync_every=args.sync_every, batch_size=args.batch_size,
                train_steps=args.steps, seed=args.seed, lr=args.lr, optimizer=args.optimizer,
                hidden=tuple(int(h) for h in args.hidden.split(",")),
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        agents.append(train_offline(ds, cfg))
    save_agents(args.out, agents)
    print(f"wrote {len(agents)} network(s) to {args.out}")


def cmd_eval_aucc(args):
    from .agents import load_agents
    from .dataset import OfflineDataset
    from .pipeline import write_csv
    from .uplift import cost_curve, model_from_agents, model_scores, units_from_dataset

    ds = OfflineDataset.load(args.data)
    model = model_from_agents(load_agents(args.agent), ds.state_dim)
    curve = cost_curve(units_from_dataset(ds, model_scores(model, ds.states, args.mode, args.alpha)), args.n_buckets)
    write_csv(args.out, ["fraction", "x", "y"], zip(curve.fractions, curve.x, curve.y))
    if args.figure:
        from .plotting import plot_cost_curves

        plot_cost_curves({Path(args.agent).stem: curve}, args.figure)
    note = " (exceeds 1)" if curve.exceeds_one else ""
    print(f"AUCC {curve.aucc:.4f}{note}")


def cmd_sweep(args):
    from .agents import load_agents
    from .pipeline import write_csv
    from .uplift import perturb_sweep

    agent = load_agents(args.agent)[0]
    res = perturb_sweep(agent.greedy, args.param, args.grid, args.episodes, args.seeds)
    write_csv(args.out, ["param_value", "mean", "std"], zip(res.grid, res.mean, res.std))
    if args.figure:
        from .plotting import plot_sweeps

        plot_sweeps({args.param: {Path(args.agent).stem: (res.grid, res.mean, res.std)}}, args.figure)
    for g, m, s in zip(res.grid, res.mean, res.std):
        print(f"{args.param}={g:g}: {m:.1f} +- {s:.1f}")


def cmd_distill(args):
    from .agents import load_agents
    from .dataset import OfflineDataset
    from .distill import distill_ablation, make_teacher_labels, tree_fit
    from .pipeline import write_csv
    from .uplift import model_from_agents

    train = OfflineDataset.load(args.data)
    teacher = model_from_agents(load_agents(args.teacher), train.state_dim)
    if args.test:
        test = OfflineDataset.load(args.test)
        rep = distill_ablation(teacher, train, test, args.mode, args.alpha, args.depth, args.min_leaf)
        student = rep.student
        if args.report:
            write_csv(args.report, ["model", "aucc"], rep.rows())
        for label, v in rep.rows():
            print(f"{label}: {v:.4f}")
    else:
        student = tree_fit(train.states, make_teacher_labels(teacher, train.states, args.mode, args.alpha),
                           args.depth, args.min_leaf)
    student.save(args.out)
    print(f"wrote tree with {student.n_leaves} leaves to {args.out}")


def cmd_verify_theory(args):
    from . import robust_linear as rl
    from .pipeline import write_csv

    rng = np.random.default_rng(args.seed)
    if args.suite == "prop1":
        rows = rl.suite_prop1(args.instances, rng)
        write_csv(args.out, ["instance", "S", "d", "delta", "oracle", "closed_form", "residual"],
                  [[r[k] for k in ("instance", "S", "d", "delta", "oracle", "closed_form", "residual")] for r in rows])
        worst = max(r["residual"] for r in rows)
        print(f"max residual {worst:.3g}")
        ok = worst <= 1e-6
    elif args.suite == "prop2":
        rows = rl.suite_prop2(args.pairs, rng)
        write_csv(args.out, ["instance", "delta", "bound", "ratio"],
                  [[r["instance"], r["delta"], r["bound"], r["ratio"]] for r in rows])
        worst = max(r["ratio"] for r in rows)
        print(f"max contraction ratio {worst:.4f}")
        ok = worst < 1.0
    elif args.suite == "fqi":
        rows = rl.suite_fqi(range(args.seeds))
        write_csv(args.out, ["instance", "delta", "gap", "max_vi_ratio"],
                  [[r["instance"], r["delta"], r["gap"], r["max_vi_ratio"]] for r in rows])
        worst = max(r["gap"] for r in rows)
        print(f"max sup-norm gap {worst:.3g}")
        ok = worst <= 1e-3
    else:
        mdp = rl.LinearRmdp.chain(delta=1e-3)
        tt = rl.theorem1_trend(mdp, [25, 50, 100, 200], [1, 2, 4, 8, 16, 32], range(args.seeds))
        write_csv(args.out, ["seed", "N", "T", "gap"], [[r["seed"], r["N"], r["T"], r["gap"]] for r in tt.rows])
        mean = tt.mean()
        for j, n in enumerate(tt.Ns):
            print(f"N={n}: " + " ".join(f"{m:.3f}" for m in mean[j]))
        ok = True
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_run(args):
    from .config import ExperimentConfig, bundled_names
    from .pipeline import run_pipeline

    src = args.config
    cfg = ExperimentConfig.load(src) if Path(src).exists() or src not in bundled_names() else ExperimentConfig.bundled(src)
    failed = run_pipeline(cfg, args.stage, args.out)
    print(f"stage {args.stage} finished; outputs in {args.out}")
    if failed:
        for row in failed:
            print("FAILED " + " ".join(str(v) for v in row), file=sys.stderr)
        return EXIT_RUNTIME


def cmd_configs(args):
    from .config import bundled_names, bundled_text

    if args.name:
        sys.stdout.write(bundled_text(args.name))
    else:
        print("\n".join(bundled_names()))


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="adload", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("collect", help="roll a behavior policy and store transitions")
    c.add_argument("--env", choices=["cartpole", "session"], required=True)
    c.add_argument("--n", type=int, required=True)
    c.add_argument("--epsilon", type=float, default=1.0)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--expert", help="checkpoint of the greedy base policy (cartpole)")
    c.add_argument("--expert-steps", type=int, default=60_000)
    c.add_argument("--expert-seed", type=int, default=0)
    c.add_argument("--set", action="append", metavar="KEY=VALUE", help="environment parameter")
    c.add_argument("--csv", help="also write a CSV mirror")
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_collect)

    t = sub.add_parser("train", help="offline Q-learning on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", default="robust-dueling", choices=["dqn", "dueling", "robust-dueling"])
    t.add_argument("--gamma", type=float, default=0.8)
    t.add_argument("--delta", type=float, default=1e-4)
    t.add_argument("--alpha", type=float, default=1.0)
    t.add_argument("--reg-mode", default="all-but-bias")
    t.add_argument("--objective", default="scalarized", help="scalarized, or rev,eng for a per-objective pair")
    t.add_argument("--steps", type=int, default=20_000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--optimizer", default="adam")
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--sync-every", type=int, default=100)
    t.add_argument("--hidden", default="64,64")
    t.add_argument("--normalization", choices=["standard", "identity"], default="standard")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval-aucc", help="cost curve and AUCC on test data")
    e.add_argument("--agent", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=["combined", "sensitivity"], default="combined")
    e.add_argument("--alpha", type=float, default=1.0)
    e.add_argument("--n-buckets", type=int, default=100)
    e.add_argument("--figure")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval_aucc)

    s = sub.add_parser("sweep-perturb", help="greedy CartPole returns under perturbed physics")
    s.add_argument("--agent", required=True)
    s.add_argument("--param", choices=["force_mag", "pole_length", "action_flip_prob"], required=True)
    s.add_argument("--grid", type=_floats, required=True)
    s.add_argument("--episodes", type=int, default=30)
    s.add_argument("--seeds", type=int, default=30)
    s.add_argument("--figure")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)

    d = sub.add_parser("distill", help="fit a regression-tree student to teacher scores")
    d.add_argument("--teacher", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--test", help="test data; adds the three-way AUCC report")
    d.add_argument("--report")
    d.add_argument("--depth", type=int, default=8)
    d.add_argument("--min-leaf", type=int, default=50)
    d.add_argument("--mode", choices=["combined", "sensitivity"], default="combined")
    d.add_argument("--alpha", type=float, default=1.0)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_distill)

    v = sub.add_parser("verify-theory", help="numerical checks on small robust MDPs")
    v.add_argument("--suite", choices=["prop1", "prop2", "fqi", "thm1"], required=True)
    v.add_argument("--seeds", type=int, default=20)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--instances", type=int, default=24)
    v.add_argument("--pairs", type=int, default=100)
    v.add_argument("--out", required=True)
    v.set_defaults(fn=cmd_verify_theory)

    r = sub.add_parser("run", help="run pipeline stages from a config file or bundled config name")
    r.add_argument("--config", required=True)
    r.add_argument("--stage", default="all",
                   choices=["collect", "train", "eval-aucc", "sweep-perturb", "distill", "verify-theory", "all"])
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_run)

    k = sub.add_parser("configs", help="list bundled configs or print one")
    k.add_argument("name", nargs="?")
    k.set_defaults(fn=cmd_configs)
    return p


def main(argv=None) -> int:
    from .config import ConfigError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"adload: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        code = args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(f"adload: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any stage failure maps to exit 2
        logging.getLogger("adload").debug("failure", exc_info=True)
        print(f"adload: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
