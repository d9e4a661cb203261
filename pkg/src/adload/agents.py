"""Offline Q-learning agents: DQN, dueling DQN and robust dueling DQN.

All three share one minibatch loop and differ only in the network head and
the TD target:

* ``dqn``: plain Q head, ``y = r + gamma * max_a Q_target(s', a)``
* ``dueling``: dueling head, same target
* ``robust-dueling``: dueling head,
  ``y = r + gamma * V_target(s') - gamma * delta * ||w_target||``

Terminal transitions drop the bootstrap term and the penalty.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import Batch, OfflineDataset, sample_indices
from .neural import (
    LrSchedule,
    MlpNet,
    NetRecord,
    NonFiniteOutputError,
    clip_by_global_norm,
    make_optimizer,
    read_checkpoint,
    write_checkpoint,
)

log = logging.getLogger(__name__)

VARIANTS = ("dqn", "dueling", "robust-dueling")
REG_MODES = ("last-layer", "all-but-bias")
OBJECTIVES = ("scalarized", "rev", "eng")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step, message="non-finite loss"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass
class AgentConfig:
    variant: str = "robust-dueling"
    gamma: float = 0.8
    delta: float = 1e-4
    reg_mode: str = "all-but-bias"
    alpha: float = 1.0
    objective: str = "scalarized"
    target_sync_every: int = 100
    batch_size: int = 64
    train_steps: int = 20_000
    seed: int = 0
    lr: float = 1e-4
    optimizer: str = "adam"
    momentum: float = 0.0
    lr_every: int = 1
    lr_anchor: str = "initial"
    hidden: tuple = (64, 64)
    grad_clip: float | None = 10.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.reg_mode not in REG_MODES:
            raise ValueError(f"reg_mode must be one of {REG_MODES}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.target_sync_every < 1 or self.batch_size < 1 or self.train_steps < 0:
            raise ValueError("target_sync_every and batch_size must be positive, train_steps non-negative")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")

    @property
    def dueling(self) -> bool:
        return self.variant != "dqn"


@dataclass
class TrainedAgent:
    online: MlpNet
    target: MlpNet
    config: AgentConfig
    norm_mean: np.ndarray
    norm_std: np.ndarray
    loss_trace: list = field(default_factory=list)

    def q_values(self, states) -> np.ndarray:
        """Q-values for raw (unnormalized) states, one row per state."""
        x = (np.atleast_2d(np.asarray(states, dtype=np.float64)) - self.norm_mean) / self.norm_std
        return self.online.predict(x)

    def greedy(self, states) -> np.ndarray:
        return np.argmax(self.q_values(states), axis=1)

    def uplift(self, states, high=1, low=0) -> np.ndarray:
        q = self.q_values(states)
        return q[:, high] - q[:, low]

    def record(self) -> NetRecord:
        return NetRecord(self.online, self.config.objective, self.norm_mean, self.norm_std)


# ---------------------------------------------------------------------------
# TD targets


def td_targets_dqn(batch, target_net: MlpNet, gamma: float, alpha: float = 1.0, objective="scalarized"):
    r = batch.rewards(alpha, objective)
    boot = target_net.predict(batch.next_states).max(axis=1)
    return r + gamma * np.where(batch.done, 0.0, boot)


def robust_penalty(target_net: MlpNet, gamma: float, delta: float, reg_mode: str) -> float:
    if delta == 0.0:
        return 0.0
    return gamma * delta * target_net.weight_norm(reg_mode)


def td_targets_robust(batch, target_net: MlpNet, gamma, delta, reg_mode, alpha=1.0, objective="scalarized"):
    if delta < 0:
        raise ValueError("delta must be non-negative")
    r = batch.rewards(alpha, objective)
    _, v, _ = target_net.forward(batch.next_states, cache=False)
    boot = gamma * v - robust_penalty(target_net, gamma, delta, reg_mode)
    return r + np.where(batch.done, 0.0, boot)


def _targets(cfg: AgentConfig, batch, target_net):
    if cfg.variant == "robust-dueling":
        return td_targets_robust(batch, target_net, cfg.gamma, cfg.delta, cfg.reg_mode, cfg.alpha, cfg.objective)
    return td_targets_dqn(batch, target_net, cfg.gamma, cfg.alpha, cfg.objective)


# ---------------------------------------------------------------------------
# training


def _gradient_step(net, opt, states, actions, targets, lr, grad_clip):
    q, _, _ = net.forward(states)
    rows = np.arange(len(actions))
    err = q[rows, actions] - targets
    with np.errstate(over="ignore"):
        loss = float(np.mean(err * err))
    if not np.isfinite(loss):
        return loss  # caller reports divergence; leave the weights as they were
    dq = np.zeros_like(q)
    dq[rows, actions] = 2.0 * err / len(actions)
    grad = clip_by_global_norm(net.backward(dq), grad_clip)
    opt.step(net.flat, grad, lr)
    return loss


def train_offline(ds: OfflineDataset, cfg: AgentConfig, variant: str | None = None, init: MlpNet | None = None):
    """Minibatch TD regression on a fixed dataset.

    Runs ``cfg.train_steps`` gradient steps. The target network is re-synced
    from the online network every ``cfg.target_sync_every`` steps (including
    step 0). Raises ``TrainingDivergedError`` on a non-finite loss.
    """
    if variant is not None and variant != cfg.variant:
        cfg = AgentConfig(**{**asdict(cfg), "variant": variant})
    rng = np.random.default_rng(cfg.seed)
    init_rng, batch_rng = rng.spawn(2)
    if init is not None:
        net = init.copy()
    else:
        net = MlpNet(ds.state_dim, cfg.hidden, ds.n_actions, dueling=cfg.dueling, rng=init_rng)
    if net.n_actions != ds.n_actions:
        raise ValueError("network action count does not match dataset")
    target = net.copy()
    opt = make_optimizer(cfg.optimizer, net.flat.size, cfg.momentum)
    sched = LrSchedule(cfg.lr, max(cfg.train_steps, 1), every=cfg.lr_every, anchor=cfg.lr_anchor)

    states = ds.normalize(ds.states)
    next_states = ds.normalize(ds.next_states)
    actions = ds.actions
    rev = np.asarray(ds.records["reward_rev"], dtype=np.float64)
    eng = np.asarray(ds.records["reward_eng"], dtype=np.float64)
    done = ds.records["done"].astype(bool)

    losses = []
    for step in range(cfg.train_steps):
        if step % cfg.target_sync_every == 0:
            target.flat[:] = net.flat
        idx = sample_indices(len(ds), cfg.batch_size, batch_rng)
        batch = Batch(states[idx], actions[idx], rev[idx], eng[idx], next_states[idx], done[idx])
        try:
            y = _targets(cfg, batch, target)
            lr = sched.update(step)
            loss = _gradient_step(net, opt, batch.states, batch.actions, y, lr, cfg.grad_clip)
        except NonFiniteOutputError as exc:
            raise TrainingDivergedError(step, str(exc)) from exc
        if not np.isfinite(loss):
            raise TrainingDivergedError(step)
        losses.append(loss)
    return TrainedAgent(net, target, cfg, ds.norm_mean.copy(), ds.norm_std.copy(), losses)


def q_values(agent: TrainedAgent, states) -> np.ndarray:
    return agent.q_values(states)


# ---------------------------------------------------------------------------
# online DQN used only to build a competent behavior policy


@dataclass
class OnlineConfig:
    total_steps: int = 60_000
    buffer_size: int = 50_000
    warmup: int = 1_000
    batch_size: int = 64
    gamma: float = 0.99
    lr: float = 5e-4
    target_sync_every: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.02
    eps_decay_steps: int = 15_000
    eval_every: int = 5_000
    eval_episodes: int = 10
    target_return: float = 490.0
    hidden: tuple = (64, 64)
    seed: int = 0


def train_online_cartpole(physics=None, cfg: OnlineConfig | None = None):
    """Online dueling DQN on CartPole; returns the best evaluated agent.

    Training stops early once the greedy policy's mean return over
    ``eval_episodes`` reaches ``target_return``.
    """
    from .envs import CartPoleEnv, CartPolePhysics, rollout_cartpole

    cfg = cfg or OnlineConfig()
    env = CartPoleEnv(physics or CartPolePhysics())
    rng = np.random.default_rng(cfg.seed)
    init_rng, act_rng, batch_rng, eval_rng = rng.spawn(4)
    net = MlpNet(4, cfg.hidden, 2, dueling=True, rng=init_rng)
    target = net.copy()
    opt = make_optimizer("adam", net.flat.size)
    buf_s = np.zeros((cfg.buffer_size, 4))
    buf_s2 = np.zeros((cfg.buffer_size, 4))
    buf_a = np.zeros(cfg.buffer_size, dtype=np.int64)
    buf_r = np.zeros(cfg.buffer_size)
    buf_d = np.zeros(cfg.buffer_size, dtype=bool)
    n_stored = 0
    best, best_score = net.copy(), -np.inf
    state = env.reset(act_rng)
    zeros4, ones4 = np.zeros(4), np.ones(4)

    for t in range(cfg.total_steps):
        frac = min(1.0, t / cfg.eps_decay_steps)
        eps = cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)
        if act_rng.random() < eps:
            action = int(act_rng.integers(2))
        else:
            action = int(np.argmax(net.predict(state.features)[0]))
        out = env.step(state, action, act_rng)
        j = n_stored % cfg.buffer_size
        buf_s[j], buf_a[j], buf_r[j] = state.features, action, out.reward_rev
        buf_s2[j], buf_d[j] = out.next_state.features, out.done and not out.truncated
        n_stored += 1
        state = env.reset(act_rng) if out.done else out.next_state

        if n_stored >= cfg.warmup:
            if t % cfg.target_sync_every == 0:
                target.flat[:] = net.flat
            idx = batch_rng.integers(0, min(n_stored, cfg.buffer_size), size=cfg.batch_size)
            _, v2, _ = target.forward(buf_s2[idx], cache=False)
            y = buf_r[idx] + cfg.gamma * np.where(buf_d[idx], 0.0, v2)
            _gradient_step(net, opt, buf_s[idx], buf_a[idx], y, cfg.lr, 10.0)

        if (t + 1) % cfg.eval_every == 0:
            policy = lambda s: np.argmax(net.predict(s), axis=1)
            score = float(rollout_cartpole(policy, env.physics, cfg.eval_episodes, eval_rng).mean())
            log.info("online step %d: greedy return %.1f", t + 1, score)
            if score >= best_score:
                best, best_score = net.copy(), score
            if score >= cfg.target_return:
                break
    agent_cfg = AgentConfig(variant="dueling", gamma=cfg.gamma, delta=0.0, hidden=cfg.hidden, seed=cfg.seed)
    agent = TrainedAgent(best, best.copy(), agent_cfg, zeros4, ones4)
    agent.eval_return = best_score
    return agent


# ---------------------------------------------------------------------------
# persistence


def save_agents(path, agents) -> None:
    write_checkpoint(path, [a.record() for a in agents])


def load_agents(path) -> list[TrainedAgent]:
    out = []
    for rec in read_checkpoint(path):
        variant = "dueling" if rec.net.dueling else "dqn"
        cfg = AgentConfig(variant=variant, delta=0.0, objective=rec.role, hidden=rec.net.hidden)
        mean = rec.norm_mean if rec.norm_mean is not None else np.zeros(rec.net.in_dim)
        std = rec.norm_std if rec.norm_std is not None else np.ones(rec.net.in_dim)
        out.append(TrainedAgent(rec.net, rec.net.copy(), cfg, mean, std))
    return out
