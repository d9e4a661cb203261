"""Experiment configuration files.

Grammar: an INI-style file of ``[section]`` headers followed by
``key = value`` lines. ``#`` and ``;`` start comments. Lists are comma
separated. Every key must belong to the schema below; unknown sections or
keys are rejected, as are values that fail type conversion or range checks.
Missing keys take the defaults listed here.
"""

from __future__ import annotations

import configparser
import io
from importlib import resources

from .agents import REG_MODES, VARIANTS, AgentConfig
from .envs import CartPolePhysics, SessionEnvConfig


class ConfigError(ValueError):
    """Configuration could not be parsed or validated."""


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(conv):
    def parse(text):
        return [conv(item.strip()) for item in text.split(",") if item.strip()]

    parse.is_list = True
    return parse


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "name": (str, "experiment"),
        "seed": (int, 0),
        "stages": (_list(str), ["collect", "train", "eval-aucc"]),
    },
    "env": {
        "kind": (str, "session"),
        # cartpole
        "force_mag": (float, 10.0),
        "pole_length": (float, 0.5),
        "action_flip_prob": (float, 0.0),
        "max_steps": (int, 500),
        # session
        "n_user_types": (int, 4),
        "n_user_features": (int, 3),
        "carryover_strength": (float, 0.5),
        "drift_amplitude": (float, 0.0),
        "episode_length_mean": (float, 5.0),
        "noise": (float, 0.3),
        "seed": (int, 0),
    },
    "dataset": {
        "n_samples": (int, 50_000),
        "epsilon": (float, 1.0),
        "expert_steps": (int, 60_000),
        "expert_seed": (int, 0),
        "split": (str, "random"),
        "train_fraction": (float, 0.7),
        "cut_bucket": (int, 16),
        "normalization": (str, "standard"),
    },
    "agent": {
        "variants": (_list(str), ["dueling", "robust-dueling"]),
        "objectives": (_list(str), ["rev", "eng"]),
        "gamma": (float, 0.8),
        "delta": (float, 1e-4),
        "reg_mode": (str, "all-but-bias"),
        "alpha": (float, 1.0),
        "steps": (int, 20_000),
        "batch_size": (int, 64),
        "lr": (float, 1e-3),
        "optimizer": (str, "adam"),
        "target_sync_every": (int, 100),
        "hidden": (_list(int), [64, 64]),
        "grad_clip": (float, 10.0),
        "n_seeds": (int, 1),
        "ablate_prev_action": (_bool, False),
    },
    "eval": {
        "mode": (str, "combined"),
        "n_buckets": (int, 100),
        "sweep_params": (_list(str), ["force_mag", "pole_length", "action_flip_prob"]),
        "force_mag_grid": (_list(float), [5.0, 7.5, 10.0, 12.5, 15.0]),
        "pole_length_grid": (_list(float), [0.25, 0.375, 0.5, 0.625, 0.75]),
        "action_flip_prob_grid": (_list(float), [0.0, 0.075, 0.15, 0.225, 0.3]),
        "episodes": (int, 30),
        "seeds": (int, 1),
    },
    "distill": {
        "teacher": (str, "robust-dueling"),
        "mode": (str, "combined"),
        "max_depth": (int, 8),
        "min_samples_leaf": (int, 50),
        "baseline_depth": (int, 6),
    },
    "theory": {
        "suites": (_list(str), ["prop1", "prop2", "fqi", "thm1"]),
        "instances": (int, 24),
        "pairs": (int, 100),
        "seeds": (int, 20),
        "fqi_iterations": (int, 300),
        "chain_states": (int, 6),
        "chain_gamma": (float, 0.9),
        "chain_delta": (float, 1e-3),
        "trend_n": (_list(int), [25, 50, 100, 200]),
        "trend_t": (_list(int), [1, 2, 4, 8, 16, 32]),
    },
}

STAGES = ("collect", "train", "eval-aucc", "sweep-perturb", "distill", "verify-theory")
THEORY_SUITES = ("prop1", "prop2", "fqi", "thm1")


class ExperimentConfig:
    """Validated, fully resolved configuration; access as ``cfg["agent"]["gamma"]``."""

    def __init__(self, values: dict):
        self.values = values
        self.validate()

    def __getitem__(self, section):
        return self.values[section]

    # -- construction --------------------------------------------------------
    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        values = {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in SCHEMA.items()}
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                conv = SCHEMA[section][key][0]
                try:
                    values[section][key] = conv(raw)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from exc
        return cls(values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    @classmethod
    def bundled(cls, name: str) -> "ExperimentConfig":
        return cls.from_text(bundled_text(name))

    def to_text(self) -> str:
        out = io.StringIO()
        for section, keys in SCHEMA.items():
            out.write(f"[{section}]\n")
            for key in keys:
                out.write(f"{key} = {_fmt(self.values[section][key])}\n")
            out.write("\n")
        return out.getvalue()

    # -- validation ------------------------------------------------------------
    def validate(self):
        v = self.values
        env, ds, ag, ev, di, th = v["env"], v["dataset"], v["agent"], v["eval"], v["distill"], v["theory"]
        for stage in v["run"]["stages"]:
            if stage not in STAGES:
                raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}")
        if env["kind"] not in ("cartpole", "session"):
            raise ConfigError("[env] kind must be cartpole or session")
        try:
            self.physics()
            self.session_config()
            for variant in ag["variants"]:
                if variant not in VARIANTS:
                    raise ValueError(f"unknown variant {variant!r}")
                for obj in ag["objectives"]:
                    self.agent_config(variant, obj, 0)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if ag["reg_mode"] not in REG_MODES:
            raise ConfigError(f"[agent] reg_mode must be one of {REG_MODES}")
        objectives = sorted(ag["objectives"])
        if objectives not in (["scalarized"], ["eng", "rev"]):
            raise ConfigError("[agent] objectives must be 'scalarized' or 'rev, eng'")
        if ag["n_seeds"] < 1:
            raise ConfigError("[agent] n_seeds must be positive")
        if ds["n_samples"] < 1:
            raise ConfigError("[dataset] n_samples must be positive")
        if not 0.0 <= ds["epsilon"] <= 1.0:
            raise ConfigError("[dataset] epsilon must lie in [0, 1]")
        if env["kind"] == "session" and ds["epsilon"] != 1.0:
            raise ConfigError("session data must be collected with randomized treatment (epsilon = 1)")
        if ds["split"] not in ("none", "random", "time"):
            raise ConfigError("[dataset] split must be none, random or time")
        if not 0.0 < ds["train_fraction"] < 1.0:
            raise ConfigError("[dataset] train_fraction must lie in (0, 1)")
        if ds["normalization"] not in ("standard", "identity"):
            raise ConfigError("[dataset] normalization must be standard or identity")
        if ev["mode"] not in ("combined", "sensitivity") or di["mode"] not in ("combined", "sensitivity"):
            raise ConfigError("score mode must be combined or sensitivity")
        if ev["n_buckets"] < 1 or ev["episodes"] < 1 or ev["seeds"] < 1:
            raise ConfigError("[eval] n_buckets, episodes and seeds must be positive")
        for p in ev["sweep_params"]:
            if p not in ("force_mag", "pole_length", "action_flip_prob"):
                raise ConfigError(f"[eval] unknown sweep parameter {p!r}")
        if di["teacher"] not in ag["variants"]:
            raise ConfigError("[distill] teacher must be one of the trained variants")
        if di["max_depth"] < 0 or di["min_samples_leaf"] < 1:
            raise ConfigError("[distill] max_depth >= 0 and min_samples_leaf >= 1 required")
        for s in th["suites"]:
            if s not in THEORY_SUITES:
                raise ConfigError(f"[theory] unknown suite {s!r}")
        if th["chain_delta"] < 0 or not 0 <= th["chain_gamma"] < 1:
            raise ConfigError("[theory] chain_delta >= 0 and chain_gamma in [0, 1) required")

    # -- builders --------------------------------------------------------------
    def physics(self) -> CartPolePhysics:
        e = self.values["env"]
        return CartPolePhysics(force_mag=e["force_mag"], pole_length=e["pole_length"],
                               action_flip_prob=e["action_flip_prob"], max_steps=e["max_steps"])

    def session_config(self) -> SessionEnvConfig:
        e = self.values["env"]
        return SessionEnvConfig(
            n_user_types=e["n_user_types"], n_user_features=e["n_user_features"],
            carryover_strength=e["carryover_strength"], drift_amplitude=e["drift_amplitude"],
            episode_length_mean=e["episode_length_mean"], rng_seed=e["seed"], noise=e["noise"],
        )

    def agent_config(self, variant, objective, seed) -> AgentConfig:
        a = self.values["agent"]
        return AgentConfig(
            variant=variant, gamma=a["gamma"], delta=a["delta"], reg_mode=a["reg_mode"], alpha=a["alpha"],
            objective=objective, target_sync_every=a["target_sync_every"], batch_size=a["batch_size"],
            train_steps=a["steps"], seed=seed, lr=a["lr"], optimizer=a["optimizer"], hidden=tuple(a["hidden"]),
            grad_clip=a["grad_clip"] if a["grad_clip"] > 0 else None,
        )


def bundled_names():
    return sorted(p.name[:-4] for p in resources.files("adload.configs").iterdir() if p.name.endswith(".ini"))


def bundled_text(name: str) -> str:
    res = resources.files("adload.configs") / f"{name}.ini"
    if not res.is_file():
        raise ConfigError(f"no bundled config {name!r}; available: {', '.join(bundled_names())}")
    return res.read_text()
