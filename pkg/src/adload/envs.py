"""Episodic environments: a perturbable CartPole and a synthetic ad-session MDP.

Both environments share one contract: ``reset(rng) -> EnvState`` and
``step(state, action, rng) -> StepOutcome``. Rewards come in two channels,
``reward_rev`` (monetization) and ``reward_eng`` (engagement); CartPole only
uses the first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

THETA_LIMIT = 12 * 2 * math.pi / 360
X_LIMIT = 2.4

LOW, HIGH = 0, 1


@dataclass(frozen=True)
class EnvState:
    features: np.ndarray
    done: bool = False
    steps: int = 0
    # session env bookkeeping; unused by CartPole
    time_bucket: int = 0
    latent: tuple = ()


@dataclass(frozen=True)
class StepOutcome:
    next_state: EnvState
    reward_rev: float
    reward_eng: float
    done: bool
    # True when the episode ended on the step limit rather than a failure
    truncated: bool = False


class TerminalStateError(RuntimeError):
    """Stepping an already-finished episode."""


# ---------------------------------------------------------------------------
# CartPole


@dataclass(frozen=True)
class CartPolePhysics:
    """CartPole-v1 constants; ``pole_length`` is the pole half-length."""

    force_mag: float = 10.0
    pole_length: float = 0.5
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    time_step: float = 0.02
    action_flip_prob: float = 0.0
    max_steps: int = 500

    def __post_init__(self):
        if self.force_mag <= 0:
            raise ValueError("force_mag must be positive")
        if self.pole_length <= 0:
            raise ValueError("pole_length must be positive")
        if not 0.0 <= self.action_flip_prob <= 1.0:
            raise ValueError("action_flip_prob must lie in [0, 1]")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")

    def with_param(self, name: str, value: float) -> "CartPolePhysics":
        """Copy with exactly one perturbation parameter changed."""
        if name not in PERTURBATION_PARAMS:
            raise ValueError(f"{name!r} is not a perturbation parameter; choose from {PERTURBATION_PARAMS}")
        return replace(self, **{name: float(value)})


PERTURBATION_PARAMS = ("force_mag", "pole_length", "action_flip_prob")


def _cartpole_derivs(x, x_dot, theta, theta_dot, force, p: CartPolePhysics):
    total_mass = p.cart_mass + p.pole_mass
    polemass_length = p.pole_mass * p.pole_length
    cos, sin = np.cos(theta), np.sin(theta)
    temp = (force + polemass_length * theta_dot**2 * sin) / total_mass
    theta_acc = (p.gravity * sin - cos * temp) / (
        p.pole_length * (4.0 / 3.0 - p.pole_mass * cos**2 / total_mass)
    )
    x_acc = temp - polemass_length * theta_acc * cos / total_mass
    return x_acc, theta_acc


def cartpole_step(state: EnvState, action: int, physics: CartPolePhysics, rng) -> StepOutcome:
    if state.done:
        raise TerminalStateError("cannot step a terminal CartPole state; call reset")
    if action not in (0, 1):
        raise ValueError(f"CartPole action must be 0 or 1, got {action!r}")
    if physics.action_flip_prob > 0 and rng.random() < physics.action_flip_prob:
        action = 1 - action
    x, x_dot, theta, theta_dot = (float(v) for v in state.features)
    force = physics.force_mag if action == 1 else -physics.force_mag
    x_acc, theta_acc = _cartpole_derivs(x, x_dot, theta, theta_dot, force, physics)
    tau = physics.time_step
    x = x + tau * x_dot
    x_dot = x_dot + tau * x_acc
    theta = theta + tau * theta_dot
    theta_dot = theta_dot + tau * theta_acc
    steps = state.steps + 1
    failed = abs(x) > X_LIMIT or abs(theta) > THETA_LIMIT
    truncated = not failed and steps >= physics.max_steps
    done = failed or truncated
    nxt = EnvState(np.array([x, x_dot, theta, theta_dot]), done=done, steps=steps)
    return StepOutcome(nxt, 1.0, 0.0, done, truncated)


class CartPoleEnv:
    kind = "cartpole"
    n_actions = 2
    state_dim = 4

    def __init__(self, physics: CartPolePhysics | None = None):
        self.physics = physics or CartPolePhysics()

    def reset(self, rng) -> EnvState:
        return EnvState(rng.uniform(-0.05, 0.05, size=4))

    def step(self, state, action, rng) -> StepOutcome:
        return cartpole_step(state, action, self.physics, rng)


def rollout_cartpole(policy, physics: CartPolePhysics, n_episodes: int, rng) -> np.ndarray:
    """Cumulative reward of ``n_episodes`` CartPole runs advanced in lockstep.

    ``policy`` maps a ``(k, 4)`` array of states to ``k`` integer actions.
    Dynamics are the same Euler update as ``cartpole_step``, vectorized.
    """
    s = rng.uniform(-0.05, 0.05, size=(n_episodes, 4))
    alive = np.ones(n_episodes, dtype=bool)
    totals = np.zeros(n_episodes)
    tau = physics.time_step
    for _ in range(physics.max_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        cur = s[idx]
        actions = np.asarray(policy(cur), dtype=np.int64)
        # one uniform per live episode per step keeps streams aligned across policies
        flips = rng.random(idx.size) < physics.action_flip_prob
        actions = np.where(flips, 1 - actions, actions)
        force = np.where(actions == 1, physics.force_mag, -physics.force_mag)
        x, x_dot, theta, theta_dot = cur.T
        x_acc, theta_acc = _cartpole_derivs(x, x_dot, theta, theta_dot, force, physics)
        nxt = np.stack(
            [x + tau * x_dot, x_dot + tau * x_acc, theta + tau * theta_dot, theta_dot + tau * theta_acc],
            axis=1,
        )
        s[idx] = nxt
        totals[idx] += 1.0
        failed = (np.abs(nxt[:, 0]) > X_LIMIT) | (np.abs(nxt[:, 2]) > THETA_LIMIT)
        alive[idx[failed]] = False
    return totals


# ---------------------------------------------------------------------------
# synthetic ad-load session environment


@dataclass(frozen=True)
class SessionEnvConfig:
    """Knobs of the synthetic session generator.

    ``carryover_strength`` scales how much a high ad load depresses the next
    session's engagement features and sharpens the next session's engagement
    penalty; ``drift_amplitude`` scales a time-of-day shift of the engagement
    response. Setting either to zero switches the effect off.
    """

    n_user_types: int = 4
    n_user_features: int = 3
    carryover_strength: float = 0.5
    drift_amplitude: float = 0.0
    episode_length_mean: float = 5.0
    rng_seed: int = 0
    noise: float = 0.3

    def __post_init__(self):
        if self.n_user_types < 1 or self.n_user_features < 1:
            raise ValueError("n_user_types and n_user_features must be positive")
        if self.carryover_strength < 0 or self.drift_amplitude < 0:
            raise ValueError("carryover_strength and drift_amplitude must be non-negative")
        if self.episode_length_mean < 1:
            raise ValueError("episode_length_mean must be at least 1")

    @property
    def state_dim(self) -> int:
        return self.n_user_features + N_SESSION_FEATURES + N_PREV_CHANNELS


# session features: recent organic consumption, log time-gap, hour-of-day
N_SESSION_FEATURES = 3
N_PREV_CHANNELS = 2
N_HOURS = 24


@dataclass(frozen=True)
class SessionWorld:
    """Fixed generator parameters drawn once from ``SessionEnvConfig.rng_seed``."""

    type_means: np.ndarray  # (types, user features)
    type_engagement: np.ndarray  # (types,) mean engagement feature per type
    rev_dir: np.ndarray  # user-feature direction of revenue uplift
    eng_dir: np.ndarray  # user-feature direction of engagement sensitivity
    base_dir: np.ndarray  # user-feature direction of baseline engagement
    drift_dir: np.ndarray  # user-feature direction along which drift rotates sensitivity

    @classmethod
    def from_config(cls, cfg: SessionEnvConfig) -> "SessionWorld":
        rng = np.random.default_rng(cfg.rng_seed)
        k, d = cfg.n_user_types, cfg.n_user_features
        unit = lambda v: v / np.linalg.norm(v)
        return cls(
            type_means=rng.normal(0.0, 1.0, size=(k, d)),
            type_engagement=rng.normal(0.0, 0.5, size=k),
            rev_dir=unit(rng.normal(size=d)),
            eng_dir=unit(rng.normal(size=d)),
            base_dir=unit(rng.normal(size=d)),
            drift_dir=unit(rng.normal(size=d)),
        )


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def session_effects(user, engagement, hour, prev_high, cfg: SessionEnvConfig, world: SessionWorld):
    """Closed-form expected outcomes of one session.

    Returns ``(rev_low, rev_uplift, eng_low, eng_uplift)`` so that
    ``E[rev | a] = rev_low + a * rev_uplift`` and likewise for engagement.
    ``eng_uplift`` is negative: a high ad load costs engagement. Arguments
    broadcast, so populations can be scored in one call.
    """
    user = np.atleast_2d(user)
    rev_score = user @ world.rev_dir
    eng_score = user @ world.eng_dir
    phase = np.sin(2 * np.pi * (np.asarray(hour, dtype=float) - 6.0) / N_HOURS)
    drift = cfg.drift_amplitude * phase
    rev_low = 1.0 + 0.2 * (user @ world.base_dir)
    rev_uplift = 0.6 + 0.4 * np.tanh(rev_score)
    eng_low = 2.0 * _sigmoid(user @ world.base_dir + 0.8 * engagement) + 0.5 * drift
    fatigue = 1.0 + cfg.carryover_strength * 2.0 * np.asarray(prev_high, dtype=float)
    sens = _sigmoid(1.5 * eng_score + 1.5 * drift * (user @ world.drift_dir) + 0.5 * drift)
    eng_uplift = -0.8 * fatigue * sens
    return rev_low, rev_uplift, eng_low, eng_uplift


class SessionEnv:
    """User sessions as episodes; one ad-load decision per session.

    State layout: ``[user features | engagement, log-gap, hour/23 | prev_low, prev_high]``.
    The previous-action channel is all zeros at the start of an episode.
    Episodes end after each session with probability ``1/episode_length_mean``.
    """

    kind = "session"
    n_actions = 2

    def __init__(self, cfg: SessionEnvConfig | None = None):
        self.cfg = cfg or SessionEnvConfig()
        self.world = SessionWorld.from_config(self.cfg)

    @property
    def state_dim(self) -> int:
        return self.cfg.state_dim

    def _features(self, user, engagement, log_gap, hour, prev_action):
        prev = np.zeros(N_PREV_CHANNELS)
        if prev_action is not None:
            prev[prev_action] = 1.0
        return np.concatenate([user, [engagement, log_gap, hour / (N_HOURS - 1)], prev])

    def reset(self, rng) -> EnvState:
        cfg, world = self.cfg, self.world
        user_type = int(rng.integers(cfg.n_user_types))
        user = world.type_means[user_type] + 0.5 * rng.normal(size=cfg.n_user_features)
        engagement = world.type_engagement[user_type] + 0.5 * rng.normal()
        log_gap = abs(rng.normal())
        hour = int(rng.integers(N_HOURS))
        feats = self._features(user, engagement, log_gap, hour, None)
        return EnvState(feats, time_bucket=hour, latent=(user_type,))

    def step(self, state, action, rng) -> StepOutcome:
        return session_step(self, state, action, rng)


def session_step(env: SessionEnv, state: EnvState, action: int, rng) -> StepOutcome:
    if state.done:
        raise TerminalStateError("cannot step a terminal session state; call reset")
    if action not in (LOW, HIGH):
        raise ValueError(f"session action must be 0 (low) or 1 (high), got {action!r}")
    cfg, world = env.cfg, env.world
    nu = cfg.n_user_features
    f = state.features
    user = f[:nu]
    engagement, log_gap = f[nu], f[nu + 1]
    hour = state.time_bucket
    prev_high = f[nu + N_SESSION_FEATURES + 1]
    rev_low, rev_up, eng_low, eng_up = session_effects(user, engagement - 0.3 * log_gap, hour, prev_high, cfg, world)
    reward_rev = float(rev_low[0] + action * rev_up[0] + cfg.noise * rng.normal())
    reward_eng = float(eng_low[0] + action * eng_up[0] + cfg.noise * rng.normal())

    (user_type,) = state.latent
    carry = cfg.carryover_strength * action
    next_eng = 0.6 * engagement + 0.4 * world.type_engagement[user_type] - carry + 0.3 * rng.normal()
    next_gap = abs(rng.normal()) + 0.5 * carry
    next_hour = min(N_HOURS - 1, hour + int(rng.integers(0, 3)))
    done = bool(rng.random() < 1.0 / cfg.episode_length_mean)
    feats = env._features(user, next_eng, next_gap, next_hour, action)
    nxt = EnvState(feats, done=done, steps=state.steps + 1, time_bucket=next_hour, latent=state.latent)
    return StepOutcome(nxt, reward_rev, reward_eng, done)


def make_env(kind: str, **kwargs):
    if kind == "cartpole":
        return CartPoleEnv(CartPolePhysics(**kwargs))
    if kind == "session":
        return SessionEnv(SessionEnvConfig(**kwargs))
    raise ValueError(f"unknown environment kind {kind!r}")
