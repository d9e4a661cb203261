"""Config-driven experiment stages writing CSV artifacts, figures and manifests.

Output directory layout::

    config.resolved.ini          resolved configuration (every key)
    manifest-<stage>.json        input/output hashes, seed, versions
    data.orld train.orld test.orld expert.orlw
    agents/<variant>_s<k>.orlw   one checkpoint per variant and seed
    aucc.csv curves.csv cost_curves.png
    sweep.csv sweep_seeds.csv sweep.png
    distill.csv students/student_s<k>.tree distill.png
    theory.csv trend.csv trend.png
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
from pathlib import Path

import numpy as np

from . import __version__
from .agents import OnlineConfig, load_agents, save_agents, train_offline, train_online_cartpole
from .config import STAGES, ConfigError, ExperimentConfig
from .dataset import BehaviorPolicy, OfflineDataset, collect, split_by_time, split_random
from .distill import distill_ablation
from .envs import N_PREV_CHANNELS, CartPoleEnv, SessionEnv
from .uplift import TLearner, cost_curve, model_from_agents, model_scores, perturb_sweep, units_from_dataset

log = logging.getLogger(__name__)

# fixed component ids for splitting the root seed
_COMPONENT = {"collect": 1, "split": 2, "expert": 3, "agent": 4, "sweep": 5, "theory": 6}
ABLATED_SUFFIX = "-noprev"


class MissingArtifactError(RuntimeError):
    def __init__(self, path, stage):
        super().__init__(f"missing {path}; run stage '{stage}' first")
        self.path, self.stage = path, stage


def component_rng(root_seed, component, *extra):
    return np.random.default_rng([int(root_seed), _COMPONENT[component], *map(int, extra)])


def component_seed(root_seed, component, *extra) -> int:
    ss = np.random.SeedSequence([int(root_seed), _COMPONENT[component], *map(int, extra)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_csv(path, header, rows):
    """Rows are sequences; floats are written with ``repr`` so reruns are byte-identical."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


class Run:
    """One output directory bound to one resolved configuration."""

    def __init__(self, cfg: ExperimentConfig, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.resolved.ini").write_text(cfg.to_text())
        self.seed = cfg["run"]["seed"]

    # -- helpers -------------------------------------------------------------
    def path(self, name) -> Path:
        return self.out / name

    def need(self, name, stage) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(p, stage)
        return p

    def manifest(self, stage, inputs, outputs):
        data = {
            "stage": stage,
            "seed": self.seed,
            "config_sha256": hashlib.sha256(self.cfg.to_text().encode()).hexdigest(),
            "inputs": {str(Path(p).relative_to(self.out)): sha256(p) for p in inputs},
            "outputs": {str(Path(p).relative_to(self.out)): sha256(p) for p in outputs},
            "versions": {"adload": __version__, "numpy": np.__version__, "python": platform.python_version()},
        }
        with open(self.path(f"manifest-{stage}.json"), "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @property
    def kind(self):
        return self.cfg["env"]["kind"]

    def load_split(self, name):
        ds = OfflineDataset.load(self.need(name, "collect"))
        if self.cfg["dataset"]["normalization"] == "identity":
            ds = ds.with_normalization(np.zeros(ds.state_dim), np.ones(ds.state_dim))
        return ds

    def agent_names(self):
        names = list(self.cfg["agent"]["variants"])
        if self.cfg["agent"]["ablate_prev_action"]:
            names += [v + ABLATED_SUFFIX for v in self.cfg["agent"]["variants"]]
        return names

    def load_model(self, name, k, state_dim):
        agents = load_agents(self.need(f"agents/{name}_s{k}.orlw", "train"))
        return model_from_agents(agents, state_dim)

    # -- stages --------------------------------------------------------------
    def collect(self):
        cfg = self.cfg
        ds_cfg = cfg["dataset"]
        outputs = []
        if self.kind == "cartpole":
            env = CartPoleEnv(cfg.physics())
            if ds_cfg["epsilon"] < 1.0:
                ocfg = OnlineConfig(total_steps=ds_cfg["expert_steps"], seed=ds_cfg["expert_seed"])
                expert = train_online_cartpole(cfg.physics(), ocfg)
                log.info("expert greedy return %.1f", expert.eval_return)
                save_agents(self.path("expert.orlw"), [expert])
                outputs.append(self.path("expert.orlw"))
                policy = BehaviorPolicy(expert.greedy, ds_cfg["epsilon"])
            else:
                policy = BehaviorPolicy()
        else:
            env = SessionEnv(cfg.session_config())
            policy = BehaviorPolicy()
        # collection draws from the root seed itself, so `collect --seed S` and a
        # config with [run] seed = S produce the same transitions
        ds = collect(env, policy, ds_cfg["n_samples"], np.random.default_rng(self.seed))
        ds.save(self.path("data.orld"))
        outputs.append(self.path("data.orld"))
        if ds_cfg["split"] == "none":
            train, test = ds, None
        elif ds_cfg["split"] == "time":
            train, test = split_by_time(ds, ds_cfg["cut_bucket"])
        else:
            train, test = split_random(ds, ds_cfg["train_fraction"], component_rng(self.seed, "split"))
        train.save(self.path("train.orld"))
        outputs.append(self.path("train.orld"))
        if test is not None:
            test.save(self.path("test.orld"))
            outputs.append(self.path("test.orld"))
        self.manifest("collect", [], outputs)
        return outputs

    def train(self):
        ag = self.cfg["agent"]
        train = self.load_split("train.orld")
        (self.out / "agents").mkdir(exist_ok=True)
        outputs, rows = [], []
        for k in range(ag["n_seeds"]):
            seed = component_seed(self.seed, "agent", k)
            for name in self.agent_names():
                variant = name.removesuffix(ABLATED_SUFFIX)
                data = train
                if name.endswith(ABLATED_SUFFIX):
                    d = train.state_dim
                    data = train.drop_features(list(range(d - N_PREV_CHANNELS, d)))
                agents = []
                for obj in ag["objectives"]:
                    a = train_offline(data, self.cfg.agent_config(variant, obj, seed))
                    agents.append(a)
                    rows.append([name, k, obj, float(np.mean(a.loss_trace[-500:])) if a.loss_trace else 0.0])
                p = self.path(f"agents/{name}_s{k}.orlw")
                save_agents(p, agents)
                outputs.append(p)
        write_csv(self.path("train_log.csv"), ["agent", "seed", "objective", "final_loss"], rows)
        outputs.append(self.path("train_log.csv"))
        self.manifest("train", [self.path("train.orld")], outputs)
        return outputs

    def eval_aucc(self):
        if self.kind != "session":
            raise ConfigError("eval-aucc needs session data with revenue and engagement outcomes")
        ev, ag = self.cfg["eval"], self.cfg["agent"]
        train, test = self.load_split("train.orld"), self.load_split("test.orld")
        baseline = TLearner(self.cfg["distill"]["baseline_depth"], self.cfg["distill"]["min_samples_leaf"]).fit(train)
        curves, aucc_rows, curve_rows, first = {}, [], [], {}
        models = [("t-learner", k, baseline) for k in range(1)]
        models += [(n, k, None) for n in self.agent_names() for k in range(ag["n_seeds"])]
        for name, k, model in models:
            model = model or self.load_model(name, k, test.state_dim)
            scores = model_scores(model, test.states, ev["mode"], ag["alpha"])
            c = cost_curve(units_from_dataset(test, scores), ev["n_buckets"])
            aucc_rows.append([name, k, c.aucc, int(c.exceeds_one)])
            curve_rows += [[name, k, f, x, y] for f, x, y in zip(c.fractions, c.x, c.y)]
            curves.setdefault(name, []).append(c.aucc)
            first.setdefault(name, c)
        for name, vals in curves.items():
            aucc_rows.append([name, "mean", float(np.mean(vals)), ""])
        write_csv(self.path("aucc.csv"), ["model", "seed", "aucc", "exceeds_one"], aucc_rows)
        write_csv(self.path("curves.csv"), ["model", "seed", "fraction", "x", "y"], curve_rows)
        from .plotting import plot_cost_curves

        plot_cost_curves(first, self.path("cost_curves.png"))
        outs = [self.path(n) for n in ("aucc.csv", "curves.csv", "cost_curves.png")]
        self.manifest("eval-aucc", [self.path("train.orld"), self.path("test.orld")], outs)
        return outs

    def sweep_perturb(self):
        if self.kind != "cartpole":
            raise ConfigError("sweep-perturb needs the cartpole environment")
        ev, ag = self.cfg["eval"], self.cfg["agent"]
        summary, per_seed, table, inputs = [], [], {}, []
        base = self.cfg.physics()
        for name in ag["variants"]:
            for param in ev["sweep_params"]:
                grid = ev[f"{param}_grid"]
                results = []
                for k in range(ag["n_seeds"]):
                    p = self.need(f"agents/{name}_s{k}.orlw", "train")
                    inputs.append(p)
                    agent = load_agents(p)[0]
                    res = perturb_sweep(agent.greedy, param, grid, ev["episodes"], ev["seeds"], base,
                                        seed_offset=component_seed(self.seed, "sweep"))
                    results.append(res)
                    per_seed += [[name, k, param, g, m, s] for g, m, s in zip(res.grid, res.mean, res.std)]
                allr = np.concatenate([r.returns for r in results], axis=1)
                g = results[0].grid
                summary += [[name, param, gv, m, s] for gv, m, s in zip(g, allr.mean(axis=1), allr.std(axis=1))]
                table.setdefault(param, {})[name] = (g, allr.mean(axis=1), allr.std(axis=1))
        write_csv(self.path("sweep.csv"), ["agent", "param", "param_value", "mean", "std"], summary)
        write_csv(self.path("sweep_seeds.csv"), ["agent", "seed", "param", "param_value", "mean", "std"], per_seed)
        from .plotting import plot_sweeps

        plot_sweeps(table, self.path("sweep.png"))
        outs = [self.path(n) for n in ("sweep.csv", "sweep_seeds.csv", "sweep.png")]
        self.manifest("sweep-perturb", sorted(set(inputs)), outs)
        return outs

    def distill(self):
        if self.kind != "session":
            raise ConfigError("distill needs session data")
        di, ag, ev = self.cfg["distill"], self.cfg["agent"], self.cfg["eval"]
        train, test = self.load_split("train.orld"), self.load_split("test.orld")
        (self.out / "students").mkdir(exist_ok=True)
        baseline = TLearner(di["baseline_depth"], di["min_samples_leaf"]).fit(train)
        rows, outs, reports = [], [], []
        for k in range(ag["n_seeds"]):
            teacher = self.load_model(di["teacher"], k, train.state_dim)
            rep = distill_ablation(teacher, train, test, di["mode"], ag["alpha"], di["max_depth"],
                                   di["min_samples_leaf"], ev["n_buckets"], baseline)
            reports.append(rep)
            rows += [[k, label, v] for label, v in rep.rows()]
            p = self.path(f"students/student_s{k}.tree")
            rep.student.save(p)
            outs.append(p)
        means = [(label, float(np.mean([dict(r.rows())[label] for r in reports]))) for label, _ in reports[0].rows()]
        rows += [["mean", label, v] for label, v in means]
        write_csv(self.path("distill.csv"), ["seed", "model", "aucc"], rows)
        from .plotting import plot_distill

        plot_distill(means, self.path("distill.png"))
        outs += [self.path("distill.csv"), self.path("distill.png")]
        self.manifest("distill", [self.path("train.orld"), self.path("test.orld")], outs)
        return outs

    def verify_theory(self):
        from . import robust_linear as rl
        from .plotting import plot_trend

        th = self.cfg["theory"]
        rows, outs = [], []
        rng = component_rng(self.seed, "theory")
        if "prop1" in th["suites"]:
            for r in rl.suite_prop1(th["instances"], rng):
                rows.append(["prop1", r["instance"], "abs_residual", r["residual"], 1e-6, int(r["residual"] <= 1e-6)])
        if "prop2" in th["suites"]:
            for r in rl.suite_prop2(th["pairs"], rng):
                rows.append(["prop2", r["instance"], "contraction_ratio", r["ratio"], 1.0, int(r["ratio"] < 1.0)])
        if "fqi" in th["suites"]:
            for r in rl.suite_fqi(range(3), T=th["fqi_iterations"]):
                rows.append([f"fqi_delta={r['delta']:g}", r["instance"], "sup_gap", r["gap"], 1e-3,
                             int(r["gap"] <= 1e-3)])
        if "thm1" in th["suites"]:
            mdp = rl.LinearRmdp.chain(th["chain_states"], th["chain_gamma"], th["chain_delta"])
            seeds = [component_seed(self.seed, "theory", s) for s in range(th["seeds"])]
            tt = rl.theorem1_trend(mdp, th["trend_n"], th["trend_t"], seeds)
            mean, se = tt.mean(), tt.se()
            trend_rows = [[n, t, mean[j, i], se[j, i]] for j, n in enumerate(tt.Ns) for i, t in enumerate(tt.Ts)]
            write_csv(self.path("trend.csv"), ["N", "T", "mean_gap", "se"], trend_rows)
            plot_trend(tt.Ns, tt.Ts, mean, se, self.path("trend.png"))
            outs += [self.path("trend.csv"), self.path("trend.png")]
            for j in range(len(tt.Ns)):
                for i in range(1, len(tt.Ts)):
                    ok, m, s = rl.paired_nonincreasing(tt.gaps[:, j, i - 1], tt.gaps[:, j, i])
                    rows.append(["thm1_T", f"N={tt.Ns[j]},T={tt.Ts[i]}", "mean_increase", m, 2 * s, int(ok)])
            for j in range(1, len(tt.Ns)):
                for i in range(len(tt.Ts)):
                    ok, m, s = rl.paired_nonincreasing(tt.gaps[:, j - 1, i], tt.gaps[:, j, i])
                    rows.append(["thm1_N", f"N={tt.Ns[j]},T={tt.Ts[i]}", "mean_increase", m, 2 * s, int(ok)])
        write_csv(self.path("theory.csv"), ["suite", "instance", "quantity", "value", "threshold", "passed"], rows)
        outs.insert(0, self.path("theory.csv"))
        self.manifest("verify-theory", [], outs)
        failed = [r for r in rows if not r[-1]]
        return outs, failed

    def run(self, stage):
        """Run one stage (or ``all``); returns the failed theory checks, if any."""
        fn = {"collect": self.collect, "train": self.train, "eval-aucc": self.eval_aucc,
              "sweep-perturb": self.sweep_perturb, "distill": self.distill, "verify-theory": self.verify_theory}
        stages = list(self.cfg["run"]["stages"]) if stage == "all" else [stage]
        failed = []
        for s in stages:
            if s not in fn:
                raise ConfigError(f"unknown stage {s!r}; choose from {STAGES + ('all',)}")
            log.info("stage %s", s)
            out = fn[s]()
            if s == "verify-theory":
                failed += out[1]
        return failed


def run_pipeline(config, stage, out_dir):
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config)
    return Run(cfg, out_dir).run(stage)
