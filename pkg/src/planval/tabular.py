"""Exact planning policy evaluation, improvement and iteration on finite MDPs.

Plan values are tables Q[s, j] over states and k-action plans, with plan
index j enumerating action tuples lexicographically (first action most
significant). A plan value here is the expected discounted return given that
the planning policy drew plan j at s; intermediate states inside the plan are
therefore weighted by how likely the policy was to produce that plan through
them. With this convention sum_j pi^k(j|s) Q[s, j] is exactly V^pi(s) for any
k, and the k-step backup is an affine map whose linear part is gamma^k times a
stochastic matrix.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import CapacityError, ConvergenceError, ShapeError

MAX_PLANS = 10 ** 6
MAX_POLICIES = 10 ** 6
MONOTONE_TOL = 1e-10
_SEARCH_TOL = 1e-11


class MonotonicityWarning(UserWarning):
    """Issued when a plan value decreases after an improvement step."""


def _frozen(x):
    a = np.array(x, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite MDP with transition table P[s, a, s'] and expected reward R[s, a]."""

    transition: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        P, R = _frozen(self.transition), _frozen(self.reward)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or R.shape != P.shape[:2]:
            raise ShapeError(f"inconsistent shapes P{P.shape} R{R.shape}")
        if P.shape[0] < 1 or P.shape[1] < 1:
            raise ShapeError("need at least one state and one action")
        if np.any(P < 0) or np.max(np.abs(P.sum(-1) - 1.0)) > 1e-12:
            raise ValueError("transition rows must be probability vectors")
        if not np.all(np.isfinite(R)):
            raise ValueError("rewards must be finite")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie strictly inside (0, 1)")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    def scaled(self, factor):
        return TabularMDP(self.transition, self.reward * factor, self.gamma)


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Stationary stochastic policy, probs[s, a]."""

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 2:
            raise ShapeError("policy table must be 2-D")
        if np.any(p < 0) or np.max(np.abs(p.sum(1) - 1.0)) > 1e-12:
            raise ValueError("policy rows must be probability vectors")
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_states, n_actions):
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions):
        actions = np.asarray(actions, dtype=int)
        return cls(np.eye(n_actions)[actions])

    @property
    def is_deterministic(self):
        return bool(np.all((self.probs == 0.0) | (self.probs == 1.0)))

    def actions(self):
        """Most likely action per state (lowest index on ties)."""
        return np.argmax(self.probs, axis=1)

    def log_probs(self):
        with np.errstate(divide="ignore"):
            lp = np.log(self.probs)
        return np.where(self.probs > 0, lp, 0.0)

    def same_as(self, other, tol=0.0):
        return np.max(np.abs(self.probs - other.probs)) <= tol


def plan_list(n_actions, k):
    """All k-action plans in table order."""
    return list(itertools.product(range(n_actions), repeat=k))


def plan_index(plan, n_actions):
    j = 0
    for a in plan:
        j = j * n_actions + int(a)
    return j


@dataclass(frozen=True, eq=False)
class PlanValueTable:
    """Q[s, j] for all states and all k-action plans."""

    k: int
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 2 or self.k < 1:
            raise ShapeError("plan value table must be 2-D with k >= 1")
        if not np.all(np.isfinite(v)):
            raise ValueError("plan values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def n_states(self):
        return self.values.shape[0]

    @property
    def n_actions(self):
        n = round(self.values.shape[1] ** (1.0 / self.k))
        for cand in (n - 1, n, n + 1):
            if cand >= 1 and cand ** self.k == self.values.shape[1]:
                return cand
        raise ShapeError("plan axis is not a power of k")

    @classmethod
    def zeros(cls, n_states, n_actions, k):
        _check_plan_space(n_actions, k)
        return cls(k, np.zeros((n_states, n_actions ** k)))

    def __getitem__(self, key):
        s, plan = key
        return float(self.values[s, plan_index(plan, self.n_actions)])


@dataclass(frozen=True)
class PlanDistribution:
    """Plans with positive probability, in table order."""

    support: tuple

    def __post_init__(self):
        total = sum(p for _, p in self.support)
        if abs(total - 1.0) > 1e-10:
            raise ValueError(f"plan probabilities sum to {total}")

    def prob(self, plan):
        plan = tuple(plan)
        for t, p in self.support:
            if t == plan:
                return p
        return 0.0

    def as_dict(self):
        return dict(self.support)


def _check_plan_space(n_actions, k):
    if k < 1:
        raise ValueError("plan length k must be >= 1")
    if n_actions ** k > MAX_PLANS:
        raise CapacityError(f"|A|^k = {n_actions}^{k} exceeds {MAX_PLANS}")


@dataclass(frozen=True, eq=False)
class PlanStats:
    """Per-(state, plan) statistics of a policy needed by the k-step backup."""

    prob: np.ndarray        # pi^k(j | s)
    reward: np.ndarray      # E[sum_m gamma^m r_m | j]
    end: np.ndarray         # P(s_k | j), shape (S, J, S)
    logp: np.ndarray        # E[sum_m gamma^m log pi(a_m|s_m) ; j], weighted by prob


def plan_stats(mdp, policy, k, conditioning="policy"):
    """Conditional reward and end-state statistics of every plan.

    ``conditioning="policy"`` conditions on the plan having been drawn by the
    policy. Plans the policy never draws fall back to blind execution; their
    entries do not influence V^pi but keep the table well defined.
    ``conditioning="open-loop"`` always uses blind execution.
    """
    _check_policy(mdp, policy)
    _check_plan_space(mdp.n_actions, k)
    W, WR, WH, WP, OR, OP = kernels.plan_path_stats(
        np.ascontiguousarray(mdp.transition), np.ascontiguousarray(mdp.reward),
        np.ascontiguousarray(policy.probs), np.ascontiguousarray(policy.log_probs()),
        mdp.gamma, int(k))
    if conditioning == "open-loop":
        Rc, Pc = OR, OP
    elif conditioning == "policy":
        pos = W > 0
        safe = np.where(pos, W, 1.0)
        Rc = np.where(pos, WR / safe, OR)
        Pc = np.where(pos[..., None], WP / safe[..., None], OP)
        # renormalise away rounding so rows stay stochastic
        Pc = Pc / Pc.sum(-1, keepdims=True)
    else:
        raise ValueError(f"unknown conditioning {conditioning!r}")
    return PlanStats(W, Rc, Pc, WH)


def _check_policy(mdp, policy):
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ShapeError(f"policy shape {policy.probs.shape} does not match MDP "
                         f"({mdp.n_states}, {mdp.n_actions})")


def _check_table(mdp, q):
    if q.values.shape != (mdp.n_states, mdp.n_actions ** q.k):
        raise ShapeError(f"table shape {q.values.shape} does not match MDP with "
                         f"{mdp.n_states} states, {mdp.n_actions} actions, k={q.k}")


def plan_distribution(mdp, policy, state, k):
    """Exact pi^k(. | state): marginal probability of each k-action sequence."""
    if not 0 <= state < mdp.n_states:
        raise IndexError(f"state {state} out of range")
    st = plan_stats(mdp, policy, k)
    row = st.prob[state]
    plans = plan_list(mdp.n_actions, k)
    return PlanDistribution(tuple((plans[j], float(row[j]))
                                  for j in np.flatnonzero(row > 0)))


def _marginal(st, q_values, soft, alpha):
    v = np.sum(st.prob * q_values, axis=1)
    if soft:
        v = v - alpha * st.logp.sum(axis=1)
    return v


def _backup_values(mdp, st, q_values, k, soft, alpha):
    v = _marginal(st, q_values, soft, alpha)
    return st.reward + mdp.gamma ** k * (st.end @ v)


def bellman_backup(mdp, q, policy, soft=False, alpha=0.0, conditioning="policy"):
    """One application of the k-step backup T^pi to a plan value table.

    In soft mode the bootstrap uses the soft state value, which adds
    alpha-weighted entropy of the k actions drawn at the next state,
    discounted like rewards.
    """
    _check_table(mdp, q)
    _check_policy(mdp, policy)
    if soft and not alpha > 0:
        raise ValueError("soft backup needs alpha > 0")
    st = plan_stats(mdp, policy, q.k, conditioning)
    return PlanValueTable(q.k, _backup_values(mdp, st, q.values, q.k, soft, alpha))


def evaluate_policy(mdp, policy, k, soft=False, alpha=0.0, tol=1e-10,
                    max_sweeps=100_000, conditioning="policy", history=None):
    """Iterate the backup from Q = 0 until the sup-norm change drops below tol.

    If ``history`` is a list, every iterate (starting with Q_0) is appended.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if soft and not alpha > 0:
        raise ValueError("soft evaluation needs alpha > 0")
    st = plan_stats(mdp, policy, k, conditioning)
    q, _ = _iterate_backup(mdp, st, k, soft, alpha, tol, max_sweeps, history)
    return PlanValueTable(k, q)


def _iterate_backup(mdp, st, k, soft, alpha, tol, max_sweeps, history=None):
    q = np.zeros_like(st.reward)
    if history is not None:
        history.append(q)
    res = np.inf
    for _ in range(max_sweeps):
        q_new = _backup_values(mdp, st, q, k, soft, alpha)
        res = float(np.max(np.abs(q_new - q)))
        q = q_new
        if history is not None:
            history.append(q)
        if res < tol:
            return q, res
    raise ConvergenceError(f"policy evaluation did not reach tol={tol}", res)


def solve_plan_values(mdp, policy, k, soft=False, alpha=0.0, conditioning="policy"):
    """Fixed point of the backup by a direct linear solve (no iteration)."""
    st = plan_stats(mdp, policy, k, conditioning)
    gk = mdp.gamma ** k
    M = st.prob                                           # (S, J)
    rhs = np.sum(M * st.reward, axis=1)
    if soft:
        rhs = rhs - alpha * st.logp.sum(axis=1)
    A = np.eye(mdp.n_states) - gk * np.einsum("sj,sjt->st", M, st.end)
    v = np.linalg.solve(A, rhs)
    return PlanValueTable(k, st.reward + gk * (st.end @ v))


def state_values(mdp, policy, q, soft=False, alpha=0.0):
    """V(s) = sum_j pi^k(j|s) Q[s, j] (minus in-plan log-probs when soft)."""
    _check_table(mdp, q)
    st = plan_stats(mdp, policy, q.k)
    return _marginal(st, q.values, soft, alpha)


def _lookahead_actions(mdp, v_old, k):
    u = v_old
    for _ in range(k - 1):
        u = np.max(mdp.reward + mdp.gamma * mdp.transition @ u, axis=1)
    return np.argmax(mdp.reward + mdp.gamma * mdp.transition @ u, axis=1)


def _k_step_objective(mdp, actions, v_old, k):
    rows = np.arange(mdp.n_states)
    P, R = mdp.transition[rows, actions], mdp.reward[rows, actions]
    f = v_old
    for _ in range(k):
        f = R + mdp.gamma * P @ f
    return f


def _greedy_k1(q_values, old_actions=None, tol=1e-12):
    best = q_values.max(axis=1, keepdims=True)
    near = q_values >= best - tol * np.maximum(1.0, np.abs(best))
    acts = np.argmax(near, axis=1)
    if old_actions is not None:
        keep = near[np.arange(len(acts)), old_actions]
        acts = np.where(keep, old_actions, acts)
    return acts


def improve_policy(mdp, q, policy_old, soft=False, alpha=0.0,
                   allow_heuristic=True, info=None):
    """Improvement step for plan value table ``q`` of ``policy_old``.

    Vanilla, k = 1: per-state greedy argmax.
    Vanilla, k > 1: exhaustive search over deterministic policies maximising
    the summed plan value, where the plan distribution and the in-plan steps
    are those of the candidate and the tail value is that of ``policy_old``
    (sum_s (T_pi^k V_old)(s)). Candidates must not lower any state's value,
    the premise of the improvement lemma. Larger instances fall back to
    k-horizon backward induction on V_old when ``allow_heuristic``.
    Soft: softmax(Q/alpha) for k = 1, per-state fixed-point sweeps for k > 1.

    ``info`` (a dict) receives the path taken.
    """
    _check_table(mdp, q)
    _check_policy(mdp, policy_old)
    k = q.k
    info = {} if info is None else info
    if soft:
        if not alpha > 0:
            raise ValueError("soft improvement needs alpha > 0")
        if k == 1:
            info["path"] = "softmax"
            return TabularPolicy(_softmax(q.values / alpha))
        info["path"] = "coordinate"
        v_old = state_values(mdp, policy_old, q, True, alpha)
        probs, sweeps = _soft_block_fixed_point(mdp, v_old, k, alpha, policy_old.probs)
        info["sweeps"] = sweeps
        return TabularPolicy(probs)

    old_det = policy_old.is_deterministic
    old_actions = policy_old.actions() if old_det else None
    if k == 1:
        info["path"] = "argmax"
        return TabularPolicy.deterministic(_greedy_k1(q.values, old_actions), mdp.n_actions)

    v_old = state_values(mdp, policy_old, q)
    if mdp.n_actions ** mdp.n_states <= MAX_POLICIES:
        info["path"] = "exhaustive"
        acts, obj = kernels.deterministic_search(
            np.ascontiguousarray(mdp.transition), np.ascontiguousarray(mdp.reward),
            np.ascontiguousarray(v_old), mdp.gamma, int(k), True, _SEARCH_TOL)
        if acts is not None:
            if old_det:
                old_obj = _k_step_objective(mdp, old_actions, v_old, k).sum()
                if old_obj >= obj - _SEARCH_TOL:
                    acts = old_actions
            return TabularPolicy.deterministic(acts, mdp.n_actions)
        # no feasible candidate can only come from rounding; use the heuristic
    if not allow_heuristic:
        raise CapacityError(f"{mdp.n_actions}^{mdp.n_states} deterministic policies "
                            f"exceed {MAX_POLICIES} and the heuristic is disabled")
    info["path"] = "heuristic"
    acts = _lookahead_actions(mdp, v_old, k)
    if old_det:
        f_new = _k_step_objective(mdp, acts, v_old, k)
        f_old = _k_step_objective(mdp, old_actions, v_old, k)
        if f_old.sum() >= f_new.sum() - _SEARCH_TOL:
            acts = old_actions
    return TabularPolicy.deterministic(acts, mdp.n_actions)


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _soft_tail_q(mdp, probs, v_old, k, alpha):
    """Tail soft-Q for each in-plan position and visit weights (all starts)."""
    P, R, g = mdp.transition, mdp.reward, mdp.gamma
    with np.errstate(divide="ignore"):
        lp = np.where(probs > 0, np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    # u[j] = soft value with j steps left, terminal value v_old
    u = [v_old]
    for _ in range(k - 1):
        qj = R + g * P @ u[-1]
        u.append(np.sum(probs * (qj - alpha * lp), axis=1))
    tail = [R + g * P @ u[k - 1 - m] for m in range(k)]      # position m
    p_pi = np.einsum("sa,sat->st", probs, P)
    d = np.ones(mdp.n_states)
    weights = []
    for m in range(k):
        weights.append(g ** m * d)
        d = d @ p_pi
    return tail, weights


def _soft_block_fixed_point(mdp, v_old, k, alpha, probs0, tol=1e-10, max_sweeps=10_000):
    probs = np.array(probs0, dtype=float)
    for sweep in range(1, max_sweeps + 1):
        change = 0.0
        for s in range(mdp.n_states):
            tail, weights = _soft_tail_q(mdp, probs, v_old, k, alpha)
            num = sum(w[s] * t[s] for w, t in zip(weights, tail))
            qbar = num / sum(w[s] for w in weights)
            new = _softmax(qbar / alpha)
            change = max(change, float(np.max(np.abs(new - probs[s]))))
            probs[s] = new
        if change < tol:
            return probs, sweep
    raise ConvergenceError("soft improvement fixed point not reached", change)


@dataclass
class IterationTrace:
    """Per-iteration record of planning policy iteration."""

    residuals: list = field(default_factory=list)     # last sup-norm change of evaluation
    state_values: list = field(default_factory=list)  # V per state, one array per iteration
    plan_values: list = field(default_factory=list)   # Q tables, one per iteration
    paths: list = field(default_factory=list)         # improvement path taken
    violations: list = field(default_factory=list)    # (iteration, count, worst decrease)

    @property
    def iterations(self):
        return len(self.state_values)


def planning_policy_iteration(mdp, k, soft=False, alpha=0.0, tol=1e-10,
                              max_iterations=1000, initial_policy=None,
                              allow_heuristic=True, policy_tol=1e-12):
    """Alternate evaluation and improvement until the policy stops changing.

    Returns (policy, plan value table, trace). Entrywise decreases of the
    plan values between consecutive policies are recorded in
    ``trace.violations`` and reported with a MonotonicityWarning.
    """
    policy = initial_policy or TabularPolicy.uniform(mdp.n_states, mdp.n_actions)
    trace = IterationTrace()
    q_prev = None
    for it in range(max_iterations):
        st = plan_stats(mdp, policy, k)
        q_arr, res = _iterate_backup(mdp, st, k, soft, alpha, tol, 100_000)
        q = PlanValueTable(k, q_arr)
        trace.residuals.append(res)
        trace.plan_values.append(q.values)
        trace.state_values.append(state_values(mdp, policy, q, soft, alpha))
        if q_prev is not None:
            diff = q.values - q_prev
            bad = diff < -MONOTONE_TOL
            if np.any(bad):
                trace.violations.append((it, int(bad.sum()), float(diff.min())))
                warnings.warn(f"plan value decreased at iteration {it} in "
                              f"{int(bad.sum())} entries (worst {diff.min():.3e})",
                              MonotonicityWarning, stacklevel=2)
        info = {}
        new_policy = improve_policy(mdp, q, policy, soft, alpha, allow_heuristic, info)
        trace.paths.append(info.get("path"))
        if new_policy.same_as(policy, policy_tol):
            return policy, q, trace
        policy, q_prev = new_policy, q.values
    raise ConvergenceError("planning policy iteration hit its iteration cap",
                           float(trace.residuals[-1]))


def oracle_optimal(mdp, tol=1e-12, max_iterations=1_000_000):
    """Classic value iteration plus greedy extraction (test oracle)."""
    P, R, g = mdp.transition, mdp.reward, mdp.gamma
    v = np.zeros(mdp.n_states)
    for _ in range(max_iterations):
        v_new = np.max(R + g * P @ v, axis=1)
        done = np.max(np.abs(v_new - v)) < tol
        v = v_new
        if done:
            break
    acts = np.argmax(R + g * P @ v, axis=1)
    return TabularPolicy.deterministic(acts, mdp.n_actions), v


def greedy_action_sets(mdp, v, tol=1e-8):
    """Actions within ``tol`` of the best one-step lookahead value, per state."""
    q = mdp.reward + mdp.gamma * mdp.transition @ v
    best = q.max(axis=1, keepdims=True)
    return [frozenset(np.flatnonzero(row >= b - tol)) for row, b in zip(q, best)]


# -- text format ---------------------------------------------------------------

_HEADER = "tabular-mdp"
_VERSION = "v1"


def format_mdp(mdp):
    """Serialise to the line-oriented text format (17 significant digits)."""
    out = [f"{_HEADER} {_VERSION} {mdp.n_states} {mdp.n_actions} {mdp.gamma:.17g}"]
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            probs = " ".join(f"{p:.17g}" for p in mdp.transition[s, a])
            out.append(f"{s} {a} {mdp.reward[s, a]:.17g} {probs}")
    return "\n".join(out) + "\n"


def parse_mdp(text):
    lines = [ln.split() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0][:2] != [_HEADER, _VERSION] or len(lines[0]) != 5:
        raise ValueError("missing 'tabular-mdp v1 <nS> <nA> <gamma>' header")
    nS, nA, gamma = int(lines[0][2]), int(lines[0][3]), float(lines[0][4])
    P = np.full((nS, nA, nS), np.nan)
    R = np.full((nS, nA), np.nan)
    for row in lines[1:]:
        if len(row) != 3 + nS:
            raise ValueError(f"expected {3 + nS} fields, got {len(row)}")
        s, a = int(row[0]), int(row[1])
        R[s, a] = float(row[2])
        P[s, a] = [float(x) for x in row[3:]]
    if np.isnan(R).any() or np.isnan(P).any():
        raise ValueError("some (state, action) rows are missing")
    return TabularMDP(P, R, gamma)


def save_mdp(mdp, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_mdp(mdp))


def load_mdp(path):
    with open(path, encoding="utf-8") as fh:
        return parse_mdp(fh.read())
