"""Uplift evaluation: ranking scores, cost curves / AUCC, T-learner baseline,
and perturbed-CartPole reward sweeps.

Cost-curve estimator. Units are sorted by score (descending, ties by id).
For the top fraction ``p`` of units, with treatment randomized,

    gain_rev(p) = p * (mean rev | treated, top p  -  mean rev | control, top p)
    loss_eng(p) = p * (mean eng | control, top p  -  mean eng | treated, top p)

estimate the per-capita incremental revenue and engagement loss of treating
exactly that prefix. The curve plots ``loss_eng(p)/loss_eng(1)`` against
``gain_rev(p)/gain_rev(1)`` from (0, 0) to (1, 1); AUCC is the trapezoidal
area traced along the path. Random rankings give the diagonal (AUCC 0.5).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .distill import tree_fit
from .envs import PERTURBATION_PARAMS, CartPolePhysics, rollout_cartpole

log = logging.getLogger(__name__)

SENSITIVITY_EPS = 1e-9
MODES = ("combined", "sensitivity")


class NormalizationUndefinedError(ValueError):
    """The population shows no aggregate revenue gain or engagement loss."""


# ---------------------------------------------------------------------------
# scores


def score_units(d_rev, d_eng, mode="combined", alpha=1.0) -> np.ndarray:
    """Ranking scores from per-unit effect estimates.

    ``combined``: ``d_rev + alpha * d_eng``.
    ``sensitivity``: ``-d_rev / d_eng``; when ``|d_eng| < 1e-9`` the score is
    ``+inf`` if ``d_rev > 0`` (free revenue ranks first) and ``-inf`` otherwise.
    """
    d_rev = np.asarray(d_rev, dtype=np.float64)
    d_eng = np.asarray(d_eng, dtype=np.float64)
    if mode == "combined":
        return d_rev + alpha * d_eng
    if mode == "sensitivity":
        tiny = np.abs(d_eng) < SENSITIVITY_EPS
        safe = np.where(tiny, 1.0, d_eng)
        return np.where(tiny, np.where(d_rev > 0, np.inf, -np.inf), -d_rev / safe)
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


class AgentPair:
    """Per-objective Q-agents; effect estimates are Q-gaps ``Q(s, high) - Q(s, low)``."""

    def __init__(self, rev_agent, eng_agent, high=1, low=0):
        self.rev_agent, self.eng_agent = rev_agent, eng_agent
        self.high, self.low = high, low

    def deltas(self, states):
        return (self.rev_agent.uplift(states, self.high, self.low),
                self.eng_agent.uplift(states, self.high, self.low))


class ScalarizedAgent:
    """One agent trained on ``r_rev + alpha * r_eng``; only the combined score is defined."""

    def __init__(self, agent, high=1, low=0):
        self.agent, self.high, self.low = agent, high, low

    def deltas(self, states):
        gap = self.agent.uplift(states, self.high, self.low)
        return gap, np.zeros_like(gap)


class FeatureMask:
    """Wrap a delta model trained on a subset of state columns."""

    def __init__(self, model, keep):
        self.model, self.keep = model, np.asarray(keep)

    def deltas(self, states):
        return self.model.deltas(np.asarray(states)[:, self.keep])


def model_from_agents(agents, state_dim=None):
    """Delta model for the agents stored in one checkpoint.

    Agents whose input is narrower than ``state_dim`` were trained with the
    trailing previous-action channels removed; they see only the leading columns.
    """
    roles = {a.config.objective: a for a in agents}
    if set(roles) == {"rev", "eng"}:
        model = AgentPair(roles["rev"], roles["eng"])
    elif set(roles) == {"scalarized"} and len(agents) == 1:
        model = ScalarizedAgent(agents[0])
    else:
        raise ValueError(f"checkpoint must hold one scalarized agent or a rev/eng pair, got {sorted(roles)}")
    in_dim = agents[0].online.in_dim
    if state_dim is not None and in_dim < state_dim:
        model = FeatureMask(model, np.arange(in_dim))
    elif state_dim is not None and in_dim > state_dim:
        raise ValueError(f"agent expects {in_dim} features, data has {state_dim}")
    return model


def model_scores(model, states, mode="combined", alpha=1.0):
    if isinstance(model, ScalarizedAgent):
        if mode != "combined":
            raise ValueError("a scalarized agent only supports combined scoring")
        return model.deltas(states)[0]
    return score_units(*model.deltas(states), mode, alpha)


# ---------------------------------------------------------------------------
# cost curves


@dataclass(frozen=True)
class RankedUnit:
    unit_id: int
    score: float
    treated: bool
    observed_rev: float
    observed_eng: float


@dataclass
class Units:
    """Struct-of-arrays form of a ranked population."""

    score: np.ndarray
    treated: np.ndarray
    rev: np.ndarray
    eng: np.ndarray
    unit_id: np.ndarray = None

    def __post_init__(self):
        self.score = np.asarray(self.score, dtype=np.float64)
        self.treated = np.asarray(self.treated, dtype=bool)
        self.rev = np.asarray(self.rev, dtype=np.float64)
        self.eng = np.asarray(self.eng, dtype=np.float64)
        if self.unit_id is None:
            self.unit_id = np.arange(len(self.score))
        if np.isnan(self.score).any():
            raise ValueError("NaN ranking score")

    @classmethod
    def from_units(cls, units):
        return cls(
            [u.score for u in units], [u.treated for u in units], [u.observed_rev for u in units],
            [u.observed_eng for u in units], np.array([u.unit_id for u in units]),
        )

    def __len__(self):
        return len(self.score)


def units_from_dataset(ds, scores, high=1) -> Units:
    """Each transition is one unit; treatment is the logged (randomized) action."""
    r = ds.records
    return Units(scores, r["action"] == high, r["reward_rev"], r["reward_eng"], np.arange(len(ds)))


@dataclass
class CostCurve:
    fractions: np.ndarray
    x: np.ndarray
    y: np.ndarray
    aucc: float
    skipped: list = field(default_factory=list)

    @property
    def points(self):
        return list(zip(self.x.tolist(), self.y.tolist()))

    @property
    def exceeds_one(self) -> bool:
        return bool(self.aucc > 1.0 or self.y.max() > 1.0 or self.x.max() > 1.0)


def cost_curve(units, n_buckets=100) -> CostCurve:
    if not isinstance(units, Units):
        units = Units.from_units(units)
    n = len(units)
    if n == 0:
        raise ValueError("empty population")
    if n_buckets < 1:
        raise ValueError("n_buckets must be positive")
    order = np.lexsort((units.unit_id, -units.score))
    t = units.treated[order]
    rev, eng = units.rev[order], units.eng[order]
    cum_t = np.cumsum(t)
    cum_c = np.cumsum(~t)
    cum_rev_t = np.cumsum(np.where(t, rev, 0.0))
    cum_rev_c = np.cumsum(np.where(t, 0.0, rev))
    cum_eng_t = np.cumsum(np.where(t, eng, 0.0))
    cum_eng_c = np.cumsum(np.where(t, 0.0, eng))

    def effects(m):
        i = m - 1
        p = m / n
        g = p * (cum_rev_t[i] / cum_t[i] - cum_rev_c[i] / cum_c[i])
        l = p * (cum_eng_c[i] / cum_c[i] - cum_eng_t[i] / cum_t[i])
        return g, l

    if cum_t[-1] == 0 or cum_c[-1] == 0:
        raise NormalizationUndefinedError("population lacks treated or control units")
    gain_all, loss_all = effects(n)
    if gain_all <= 0 or loss_all <= 0:
        raise NormalizationUndefinedError(
            f"aggregate revenue gain {gain_all:.4g} / engagement loss {loss_all:.4g} must both be positive"
        )
    fr, xs, ys, skipped = [0.0], [0.0], [0.0], []
    for k in range(1, n_buckets + 1):
        m = n if k == n_buckets else int(math.ceil(k * n / n_buckets))
        if cum_t[m - 1] == 0 or cum_c[m - 1] == 0:
            skipped.append(k)
            continue
        g, l = effects(m)
        fr.append(m / n)
        xs.append(l / loss_all)
        ys.append(g / gain_all)
    if skipped:
        log.warning("cost curve: skipped %d buckets lacking treated or control units", len(skipped))
    x, y = np.array(xs), np.array(ys)
    x[-1], y[-1] = 1.0, 1.0
    aucc = float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))
    return CostCurve(np.array(fr), x, y, aucc, skipped)


def curve_rows(curve: CostCurve):
    return [{"fraction": f, "x": x, "y": y} for f, x, y in zip(curve.fractions, curve.x, curve.y)]


# ---------------------------------------------------------------------------
# T-learner baseline


class TLearner:
    """Per-arm regression trees for revenue and engagement outcomes."""

    def __init__(self, max_depth=6, min_samples_leaf=50, high=1, low=0):
        self.max_depth, self.min_samples_leaf = max_depth, min_samples_leaf
        self.high, self.low = high, low
        self.trees = {}

    def fit(self, ds, states=None) -> "TLearner":
        states = ds.states if states is None else states
        actions = ds.records["action"]
        for arm in (self.high, self.low):
            if not np.any(actions == arm):
                raise ValueError(f"training data has no samples for action {arm}")
        for outcome in ("reward_rev", "reward_eng"):
            y = ds.records[outcome]
            for arm in (self.high, self.low):
                m = actions == arm
                self.trees[outcome, arm] = tree_fit(states[m], y[m], self.max_depth, self.min_samples_leaf)
        return self

    def deltas(self, states):
        d = []
        for outcome in ("reward_rev", "reward_eng"):
            d.append(self.trees[outcome, self.high].predict(states) - self.trees[outcome, self.low].predict(states))
        return tuple(d)


def t_learner_fit(train, max_depth=6, min_samples_leaf=50) -> TLearner:
    return TLearner(max_depth, min_samples_leaf).fit(train)


# ---------------------------------------------------------------------------
# perturbation sweeps


def default_grid(param: str, nominal=None, steps=5, spread=0.5):
    """``steps`` points spanning +-``spread`` around nominal; flip probability spans [0, 0.3]."""
    if param == "action_flip_prob":
        return list(np.linspace(0.0, 0.3, steps))
    nominal = getattr(CartPolePhysics(), param) if nominal is None else nominal
    return list(np.linspace(nominal * (1 - spread), nominal * (1 + spread), steps))


@dataclass
class PerturbSweepResult:
    param: str
    grid: list
    mean: np.ndarray
    std: np.ndarray
    returns: np.ndarray  # (grid, seeds * episodes)
    nominal: float = None

    def rows(self):
        return [{"param_value": g, "mean": m, "std": s} for g, m, s in zip(self.grid, self.mean, self.std)]


def perturb_sweep(policy, param, grid=None, episodes=30, seeds=30, base: CartPolePhysics | None = None,
                  seed_offset=0) -> PerturbSweepResult:
    """Greedy CartPole returns while varying one physics parameter.

    The same random streams (per seed) are reused at every grid value. The
    nominal value is added to the grid if absent.
    """
    if param not in PERTURBATION_PARAMS:
        raise ValueError(f"param must be one of {PERTURBATION_PARAMS}")
    base = base or CartPolePhysics()
    nominal = getattr(base, param)
    grid = default_grid(param) if grid is None else list(grid)
    if not any(np.isclose(g, nominal) for g in grid):
        grid = sorted(grid + [nominal])
    seed_list = range(seeds) if isinstance(seeds, int) else list(seeds)
    returns = []
    for g in grid:
        physics = base.with_param(param, g)
        per_seed = [
            rollout_cartpole(policy, physics, episodes, np.random.default_rng([seed_offset, s]))
            for s in seed_list
        ]
        returns.append(np.concatenate(per_seed))
    returns = np.array(returns)
    return PerturbSweepResult(param, [float(g) for g in grid], returns.mean(axis=1), returns.std(axis=1),
                              returns, float(nominal))
