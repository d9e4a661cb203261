"""Small explicit robust MDPs with an IPM uncertainty set.

For a value function ``V = Phi @ w`` whose first feature is the constant 1,
the worst case over ``{q : sum(q) = 1, sup_{f in F} (q - p0)^T f <= delta}``
has the closed form ``p0 @ V - delta * ||w[1:]||``. This module implements
that closed form, an independent convex-programming oracle for it, the
resulting robust Bellman operator, value iteration, and robust fitted
Q-iteration with the tools to check their convergence numerically.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


class ProjectionError(ArithmeticError):
    """max_b Q is not representable in the span of Phi."""


class NonContractionError(ArithmeticError):
    pass


@dataclass
class LinearRmdp:
    P0: np.ndarray  # (S, A, S)
    r: np.ndarray  # (S, A)
    gamma: float
    Phi: np.ndarray  # (S, d), first column ones
    Psi: np.ndarray  # (S*A, d'), row s*A + a
    delta: float = 0.0

    def __post_init__(self):
        self.P0 = np.asarray(self.P0, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.Phi = np.asarray(self.Phi, dtype=np.float64)
        self.Psi = np.asarray(self.Psi, dtype=np.float64)
        S, A = self.r.shape
        if self.P0.shape != (S, A, S):
            raise ValueError("P0 must have shape (S, A, S)")
        if np.any(self.P0 < -1e-12) or not np.allclose(self.P0.sum(axis=2), 1.0):
            raise ValueError("every P0 row must be a probability vector")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.Phi.shape[0] != S or not np.allclose(self.Phi[:, 0], 1.0):
            raise ValueError("Phi must have one row per state and a leading column of ones")
        if np.linalg.matrix_rank(self.Phi) < self.Phi.shape[1]:
            raise ValueError("Phi must have full column rank")
        if self.Psi.shape[0] != S * A:
            raise ValueError("Psi must have one row per state-action pair")

    @property
    def n_states(self) -> int:
        return self.r.shape[0]

    @property
    def n_actions(self) -> int:
        return self.r.shape[1]

    def with_delta(self, delta) -> "LinearRmdp":
        return LinearRmdp(self.P0, self.r, self.gamma, self.Phi, self.Psi, delta)

    @classmethod
    def tabular(cls, P0, r, gamma, delta=0.0) -> "LinearRmdp":
        """Exact tabular features: ones column plus indicators of states 2..S."""
        S, A = np.shape(r)
        Phi = np.hstack([np.ones((S, 1)), np.eye(S)[:, 1:]])
        return cls(P0, r, gamma, Phi, np.eye(S * A), delta)

    @classmethod
    def random_tabular(cls, rng, n_states=5, n_actions=2, gamma=0.8, delta=0.0, concentration=1.0):
        P0 = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
        r = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
        return cls.tabular(P0, r, gamma, delta)

    @classmethod
    def chain(cls, n_states=6, gamma=0.9, delta=0.0, p_advance=0.7, p_slip=0.1, bait=0.2, goal=1.0):
        """A chain where myopic play is wrong, so planning horizon matters.

        Action 0 takes a small immediate reward and returns to state 0.
        Action 1 moves right with ``p_advance``, slips back one state with
        ``p_slip``, and otherwise stays. The last state pays ``goal`` for
        either action.
        """
        S = n_states
        P0 = np.zeros((S, 2, S))
        r = np.zeros((S, 2))
        for s in range(S):
            P0[s, 0, 0] = 1.0
            r[s, 0] = bait
            up, down = min(s + 1, S - 1), max(s - 1, 0)
            P0[s, 1, up] += p_advance
            P0[s, 1, down] += p_slip
            P0[s, 1, s] += 1.0 - p_advance - p_slip
        r[S - 1] += goal
        return cls.tabular(P0, r, gamma, delta)


# ---------------------------------------------------------------------------
# inner minimization: closed form and oracle


@dataclass
class LinearValue:
    """Member of the linear value class: ``||w|| <= 1`` and ``Phi w`` in ``[0, 1/(1-gamma)]``."""

    w: np.ndarray
    Phi: np.ndarray
    gamma: float

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if np.linalg.norm(self.w) > 1.0 + 1e-12:
            raise ValueError("weight norm exceeds 1")
        v = self.values
        if v.min() < -1e-12 or v.max() > 1.0 / (1.0 - self.gamma) + 1e-12:
            raise ValueError("values leave [0, 1/(1-gamma)]")

    @property
    def values(self) -> np.ndarray:
        return self.Phi @ self.w


def closed_form_inner_min(p0_row, w, Phi, delta) -> float:
    """Worst-case expected value ``p0 @ (Phi w) - delta * ||w[1:]||``."""
    w = np.asarray(w, dtype=np.float64)
    return float(np.asarray(p0_row) @ (Phi @ w) - delta * np.linalg.norm(w[1:]))


@dataclass
class OracleResult:
    value: float
    q: np.ndarray
    ipm_residual: float  # max(0, ||Phi^T (q - p0)|| - delta)
    sum_residual: float  # |sum(q) - 1|
    status: str


def ipm_inner_min_oracle(p0_row, w, Phi, delta, solver="CLARABEL") -> OracleResult:
    """Solve ``min_q q^T (Phi w)`` over the relaxed IPM ball numerically.

    The discrepancy ``sup_{||u||<=1} (q - p0)^T Phi u`` equals
    ``||Phi^T (q - p0)||``, so the problem is a second-order cone program in
    ``q``; it is handed to a conic solver rather than using the closed form.
    The simplex is relaxed to the affine constraint ``sum(q) = 1``.
    """
    import cvxpy as cp

    p0 = np.asarray(p0_row, dtype=np.float64)
    V = Phi @ np.asarray(w, dtype=np.float64)
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if delta == 0.0:
        return OracleResult(float(p0 @ V), p0.copy(), 0.0, 0.0, "singleton")
    q = cp.Variable(len(p0))
    prob = cp.Problem(cp.Minimize(V @ q), [cp.sum(q) == 1, cp.norm(Phi.T @ (q - p0), 2) <= delta])
    prob.solve(solver=solver)
    if q.value is None or prob.status not in ("optimal", "optimal_inaccurate"):
        raise ArithmeticError(f"oracle solver failed with status {prob.status}")
    qv = np.asarray(q.value)
    ipm = max(0.0, float(np.linalg.norm(Phi.T @ (qv - p0))) - delta)
    return OracleResult(float(V @ qv), qv, ipm, abs(float(qv.sum()) - 1.0), prob.status)


def random_linear_value(rng, n_states, d, gamma):
    """Random ``(Phi, w)`` with non-negative features of row norm at most 1, inside the value class."""
    while True:
        raw = rng.uniform(0.0, 1.0, size=(n_states, d - 1))
        # shrink (never stretch) rows: stretching a single column to unit norm makes it constant
        raw /= np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1.0)
        Phi = np.hstack([np.ones((n_states, 1)), raw])
        if np.linalg.matrix_rank(Phi) < d:
            continue
        w = rng.normal(size=d)
        w *= rng.uniform(0.2, 1.0) / np.linalg.norm(w)
        w[0] = abs(w[0]) + np.linalg.norm(w[1:])  # keeps Phi w >= 0 since feature rows have norm <= 1
        w /= max(1.0, np.linalg.norm(w))
        try:
            return Phi, LinearValue(w, Phi, gamma)
        except ValueError:
            continue


# ---------------------------------------------------------------------------
# robust Bellman operator and value iteration


def value_weights(V, Phi):
    """Least-squares weights of ``V`` on ``Phi`` and the relative residual."""
    w, *_ = np.linalg.lstsq(Phi, V, rcond=None)
    resid = float(np.linalg.norm(Phi @ w - V) / max(1.0, np.linalg.norm(V)))
    return w, resid


def ipm_penalty(V, Phi, delta, tol=1e-8) -> float:
    if delta == 0.0:
        return 0.0
    w, resid = value_weights(V, Phi)
    if resid > tol:
        raise ProjectionError(f"projection residual {resid:.3e} exceeds {tol:.1e}")
    return float(delta * np.linalg.norm(w[1:]))


def robust_bellman_apply(Q, mdp: LinearRmdp, tol=1e-8) -> np.ndarray:
    """``r + gamma * (P0 @ max_b Q - delta * ||w[1:]||)`` for a ``(S, A)`` table."""
    V = np.asarray(Q, dtype=np.float64).max(axis=1)
    return mdp.r + mdp.gamma * (mdp.P0 @ V - ipm_penalty(V, mdp.Phi, mdp.delta, tol))


def robust_policy_operator(V, policy, mdp: LinearRmdp, tol=1e-8) -> np.ndarray:
    idx = np.arange(mdp.n_states)
    P = mdp.P0[idx, policy]
    return mdp.r[idx, policy] + mdp.gamma * (P @ V - ipm_penalty(V, mdp.Phi, mdp.delta, tol))


@dataclass
class ViResult:
    Q: np.ndarray
    ratios: list
    iterations: int

    @property
    def V(self):
        return self.Q.max(axis=1)

    @property
    def policy(self):
        return self.Q.argmax(axis=1)


def robust_value_iteration(mdp: LinearRmdp, tol=1e-10, max_iters=100_000, check_bound=True) -> ViResult:
    """Iterate the robust Bellman operator to a sup-norm fixed point.

    Records ``||Q_{k+1} - Q_k|| / ||Q_k - Q_{k-1}||`` per iteration and aborts
    with ``NonContractionError`` if a ratio reaches 1 while differences are
    still above round-off.
    """
    if check_bound and mdp.delta > 0 and mdp.delta >= prop2_delta_bound(mdp):
        raise ValueError(f"delta {mdp.delta} is not below the contraction bound {prop2_delta_bound(mdp):.4g}")
    Q = np.zeros_like(mdp.r)
    ratios = []
    prev_diff = None
    for k in range(1, max_iters + 1):
        Q_new = robust_bellman_apply(Q, mdp)
        diff = float(np.max(np.abs(Q_new - Q)))
        Q = Q_new
        if prev_diff is not None and prev_diff > 1e-12:
            ratio = diff / prev_diff
            ratios.append(ratio)
            if ratio >= 1.0 and diff > 1e-10:
                raise NonContractionError(f"iteration {k}: difference ratio {ratio:.4f} >= 1")
        if diff < tol:
            return ViResult(Q, ratios, k)
        prev_diff = diff
    raise NonContractionError(f"no convergence to {tol} within {max_iters} iterations")


def robust_policy_value(mdp: LinearRmdp, policy, tol=1e-12, max_iters=100_000) -> np.ndarray:
    """Worst-case value of a deterministic policy under the IPM set."""
    V = np.zeros(mdp.n_states)
    policy = np.asarray(policy)
    for _ in range(max_iters):
        V_new = robust_policy_operator(V, policy, mdp)
        if np.max(np.abs(V_new - V)) < tol:
            return V_new
        V = V_new
    raise NonContractionError("robust policy evaluation did not converge")


def prop2_delta_bound(mdp: LinearRmdp, nu=None) -> float:
    """``lambda_min(Phi^T diag(nu_S) Phi) * (1 - gamma) / gamma``.

    ``nu`` is a state-action distribution (uniform by default); its state
    marginal weights the rows of ``Phi``.
    """
    S, A = mdp.n_states, mdp.n_actions
    nu = np.full((S, A), 1.0 / (S * A)) if nu is None else np.asarray(nu).reshape(S, A)
    nu_s = nu.sum(axis=1)
    G = mdp.Phi.T @ (nu_s[:, None] * mdp.Phi)
    lam = float(np.linalg.eigvalsh(G).min())
    if mdp.gamma == 0.0:
        return np.inf
    return lam * (1.0 - mdp.gamma) / mdp.gamma


def nu_norm(x, nu) -> float:
    return float(np.sqrt(np.sum(nu * x * x)))


def contraction_ratios(mdp: LinearRmdp, n_pairs, rng, nu=None, scale=10.0) -> np.ndarray:
    """``||T Q1 - T Q2||_nu / ||Q1 - Q2||_nu`` for random table pairs."""
    S, A = mdp.n_states, mdp.n_actions
    nu = np.full((S, A), 1.0 / (S * A)) if nu is None else np.asarray(nu).reshape(S, A)
    out = np.empty(n_pairs)
    for i in range(n_pairs):
        Q1 = rng.uniform(0.0, scale, size=(S, A))
        Q2 = rng.uniform(0.0, scale, size=(S, A))
        num = nu_norm(robust_bellman_apply(Q1, mdp) - robust_bellman_apply(Q2, mdp), nu)
        out[i] = num / nu_norm(Q1 - Q2, nu)
    return out


# ---------------------------------------------------------------------------
# robust fitted Q-iteration


@dataclass
class FqiData:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    weight: np.ndarray = None

    def __post_init__(self):
        if self.weight is None:
            self.weight = np.ones(len(self.s))

    def __len__(self):
        return len(self.s)


def sample_fqi_data(mdp: LinearRmdp, n, rng, behavior=None) -> FqiData:
    """``n`` transitions with ``(s, a)`` from ``behavior`` (uniform by default)."""
    S, A = mdp.n_states, mdp.n_actions
    probs = np.full(S * A, 1.0 / (S * A)) if behavior is None else np.asarray(behavior).ravel()
    sa = rng.choice(S * A, size=n, p=probs)
    s, a = sa // A, sa % A
    cdf = np.cumsum(mdp.P0[s, a], axis=1)
    s2 = np.minimum((rng.random(n)[:, None] > cdf).sum(axis=1), S - 1)
    return FqiData(s, a, mdp.r[s, a], s2)


def exact_fqi_data(mdp: LinearRmdp) -> FqiData:
    """Every ``(s, a, s')`` once, weighted by ``P0(s'|s, a)``: the infinite-sample limit."""
    S, A = mdp.n_states, mdp.n_actions
    s, a, s2 = (g.ravel() for g in np.meshgrid(np.arange(S), np.arange(A), np.arange(S), indexing="ij"))
    return FqiData(s, a, mdp.r[s, a], s2, mdp.P0[s, a, s2])


@dataclass
class FqiResult:
    thetas: list
    policies: list
    Q: np.ndarray  # final iterate as an (S, A) table
    ridge_used: bool = False

    def q_table(self, mdp, t):
        return (mdp.Psi @ self.thetas[t]).reshape(mdp.n_states, mdp.n_actions)


def robust_fqi(data: FqiData, mdp: LinearRmdp, delta=None, T=100, ridge=1e-6) -> FqiResult:
    """Robust FQI by weighted least squares on ``Psi``.

    Iterate ``t`` regresses ``r + gamma * max_a f_{t-1}(s', a) - gamma * delta * ||w_{t-1}[1:]||``
    on ``Psi``, where ``w_{t-1}`` are the ``Phi``-weights of ``max_a f_{t-1}``.
    ``f_0 = 0``. A rank-deficient design falls back to ridge regression with a
    warning. ``policies[t]`` is greedy in ``f_t``.
    """
    delta = mdp.delta if delta is None else delta
    S, A = mdp.n_states, mdp.n_actions
    X = mdp.Psi[data.s * A + data.a]
    sw = np.sqrt(data.weight)
    Xw = X * sw[:, None]
    d = X.shape[1]
    ridge_used = np.linalg.matrix_rank(Xw) < d
    if ridge_used:
        warnings.warn("singular FQI regression; using ridge fallback", RuntimeWarning, stacklevel=2)
        gram = Xw.T @ Xw + ridge * np.eye(d)

    theta = np.zeros(d)
    thetas = [theta]
    Q = np.zeros((S, A))
    policies = [Q.argmax(axis=1)]
    for _ in range(T):
        V = Q.max(axis=1)
        pen = 0.0
        if delta > 0:
            w, _ = value_weights(V, mdp.Phi)
            pen = delta * np.linalg.norm(w[1:])
        y = data.r + mdp.gamma * (V[data.s2] - pen)
        if ridge_used:
            theta = np.linalg.solve(gram, Xw.T @ (y * sw))
        else:
            theta, *_ = np.linalg.lstsq(Xw, y * sw, rcond=None)
        Q = (mdp.Psi @ theta).reshape(S, A)
        thetas.append(theta)
        policies.append(Q.argmax(axis=1))
    return FqiResult(thetas, policies, Q, bool(ridge_used))


# ---------------------------------------------------------------------------
# convergence-trend study


@dataclass
class TrendTable:
    Ns: list
    Ts: list
    gaps: np.ndarray  # (seeds, len(Ns), len(Ts))
    rows: list = field(default_factory=list)

    def mean(self):
        return self.gaps.mean(axis=0)

    def se(self):
        return self.gaps.std(axis=0, ddof=1) / np.sqrt(self.gaps.shape[0])


def suboptimality(mdp: LinearRmdp, policy, V_star=None, rho=None) -> float:
    V_star = robust_value_iteration(mdp).V if V_star is None else V_star
    rho = np.full(mdp.n_states, 1.0 / mdp.n_states) if rho is None else rho
    return float(rho @ (V_star - robust_policy_value(mdp, policy)))


def theorem1_trend(mdp: LinearRmdp, Ns, Ts, seeds) -> TrendTable:
    """Robust suboptimality of ``pi_T`` from robust FQI, per ``(seed, N, T)``."""
    if mdp.delta > 1.0 / (1.0 - mdp.gamma):
        raise ValueError("delta must not exceed 1/(1-gamma)")
    V_star = robust_value_iteration(mdp).V
    T_max = max(Ts)
    gaps = np.empty((len(seeds), len(Ns), len(Ts)))
    cache = {}
    rows = []
    for i, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        for j, n in enumerate(Ns):
            data = sample_fqi_data(mdp, n, rng)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = robust_fqi(data, mdp, T=T_max)
            for k, t in enumerate(Ts):
                pi = tuple(res.policies[t])
                if pi not in cache:
                    cache[pi] = suboptimality(mdp, np.array(pi), V_star)
                gaps[i, j, k] = cache[pi]
                rows.append({"seed": seed, "N": n, "T": t, "gap": cache[pi]})
    return TrendTable(list(Ns), list(Ts), gaps, rows)


def paired_nonincreasing(a, b, z=2.0):
    """True if ``mean(b - a) <= z * SE(b - a)`` (b is not worse than a beyond noise)."""
    diff = np.asarray(b) - np.asarray(a)
    se = diff.std(ddof=1) / np.sqrt(len(diff)) if len(diff) > 1 else 0.0
    return bool(diff.mean() <= z * se + 1e-12), float(diff.mean()), float(se)


# ---------------------------------------------------------------------------
# verification suites (one row per instance)


def suite_prop1(n_instances, rng, deltas=(1e-3, 1e-2, 1e-1), max_states=6, max_d=4):
    """Closed-form worst case vs the conic oracle on random instances."""
    rows = []
    for i in range(n_instances):
        S = int(rng.integers(2, max_states + 1))
        d = int(rng.integers(2, min(S, max_d) + 1))
        delta = deltas[i % len(deltas)]
        Phi, lv = random_linear_value(rng, S, d, 0.8)
        p0 = rng.dirichlet(np.ones(S))
        oracle = ipm_inner_min_oracle(p0, lv.w, Phi, delta)
        closed = closed_form_inner_min(p0, lv.w, Phi, delta)
        rows.append({"instance": i, "S": S, "d": d, "delta": delta, "oracle": oracle.value,
                     "closed_form": closed, "residual": abs(oracle.value - closed)})
    return rows


def suite_prop2(n_pairs, rng, n_states=5, n_actions=2, gamma=0.8, bound_fraction=0.5):
    """Contraction ratios at ``delta = bound_fraction * bound`` on a random tabular instance."""
    mdp = LinearRmdp.random_tabular(rng, n_states, n_actions, gamma)
    bound = prop2_delta_bound(mdp)
    ratios = contraction_ratios(mdp.with_delta(bound_fraction * bound), n_pairs, rng)
    return [{"instance": i, "delta": bound_fraction * bound, "bound": bound, "ratio": float(r)}
            for i, r in enumerate(ratios)]


def suite_fqi(seeds, deltas=(0.0, 1e-2), n_states=4, n_actions=2, gamma=0.8, T=300):
    """Sup-norm gap between robust FQI on exact-weight data and robust value iteration."""
    rows = []
    for seed in seeds:
        for delta in deltas:
            mdp = LinearRmdp.random_tabular(np.random.default_rng(seed), n_states, n_actions, gamma, delta=delta)
            vi = robust_value_iteration(mdp, check_bound=False)
            fqi = robust_fqi(exact_fqi_data(mdp), mdp, delta, T=T)
            rows.append({"instance": seed, "delta": delta, "gap": float(np.max(np.abs(fqi.Q - vi.Q))),
                         "max_vi_ratio": max(vi.ratios) if vi.ratios else 0.0})
    return rows
