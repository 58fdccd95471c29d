"""Diagnostics: policy-gradient direction under model error, and plan-value bias.

Both studies write plain CSV tables; plotting is left to the reader.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import ndtr

from . import autodiff as ad
from .actor import make_planner
from .critic import CriticPair, critic_update, polyak_update, td_target
from .buffer import SegmentBuffer
from .dynamics import TrueDynamicsModel
from .envs import TabularEnv
from .errors import DegenerateInputError, PreconditionError
from .tabular import TabularPolicy, plan_index, solve_plan_values


def normalized_cosine(g, h):
    """(1 + cos(g, h)) / 2, so 0.5 means orthogonal."""
    g = np.ravel(np.asarray(g, dtype=float))
    h = np.ravel(np.asarray(h, dtype=float))
    ng, nh = np.linalg.norm(g), np.linalg.norm(h)
    if ng == 0.0 or nh == 0.0:
        raise DegenerateInputError("normalized cosine of a zero vector")
    c = float(np.dot(g, h) / (ng * nh))
    return min(1.0, max(0.0, 0.5 * (1.0 + c)))


# -- gradient direction study ---------------------------------------------------------------


@dataclass
class GradStudyRecord:
    state_id: int
    rollout_error: float
    ncs_mppve: float
    ncs_mbpo: float


def _flat_grad(grads, store):
    return np.concatenate([g.ravel() for g in grads.aligned(store).values()])


def _rollouts(env, model, actor, s0, k, rng, model_mode="mean"):
    """Real and fake k-step rollouts from ``s0`` sharing the policy noise.

    Per step: policy noise, then environment noise, then model noise. Both
    rollouts move through observations so that a true-dynamics model
    reproduces the real one exactly.
    """
    tape = ad.Tape(record=False)
    real, fake, etas = [s0], [s0], []
    for _ in range(k):
        eta = rng.standard_normal((1, actor.act_dim))
        env_noise = env.draw_noise(rng, 1)
        members, mnoise = model.draw_noise(rng, 1, model_mode)
        etas.append(eta)
        a_real = actor.head(tape, real[-1], eta).value.value
        s2, _ = env.dynamics(env.state_from_obs(real[-1]), a_real, env_noise)
        real.append(env.observe(s2))
        a_fake = actor.head(tape, fake[-1], eta).value.value
        f2, _ = model.predict(tape, fake[-1], a_fake, members, mnoise)
        fake.append(np.asarray(f2.value, dtype=float).reshape(1, -1))
    return real, fake, etas


def _mppve_grad(actor, plan_critic, states, etas):
    """Gradient of -Q_k(s_0, f(s_0, eta_0), ..., f(s_{k-1}, eta_{k-1})); states held fixed."""
    tape = ad.Tape()
    acts = [actor.head(tape, states[m], etas[m]).value for m in range(len(etas))]
    q = plan_critic.q_min(tape, states[0], ad.concat(acts, axis=-1), trainable=False)
    return _flat_grad(tape.backward(ad.reduce_sum(-1.0 * q)), actor.params)


def _mbpo_grad(actor, step_critic, states, etas):
    """Mean over the k rollout states of the single-step gradient of -Q_1(s_m, f(s_m, eta_m))."""
    tape = ad.Tape()
    total = None
    for m in range(len(etas)):
        a = actor.head(tape, states[m], etas[m]).value
        q = ad.reduce_sum(-1.0 * step_critic.q_min(tape, states[m], a, trainable=False))
        total = q if total is None else total + q
    return _flat_grad(tape.backward(total * (1.0 / len(etas))), actor.params)


def gradient_direction_study(env, model, actor, plan_critic, step_critic, states, k, rng,
                             residuals=(0.0, 0.0), residual_threshold=0.2, model_mode="mean"):
    """Per start state: rollout error and the two real-vs-fake gradient cosines.

    ``residuals`` are the normalised TD residuals of (plan critic, step
    critic) against the frozen policy; either above ``residual_threshold``
    means the critics are not converged and the study refuses to run.
    """
    if max(residuals) > residual_threshold:
        raise PreconditionError(f"critic residuals {residuals} exceed {residual_threshold}")
    records = []
    for i, s0 in enumerate(np.atleast_2d(states)):
        real, fake, etas = _rollouts(env, model, actor, s0[None], k, rng, model_mode)
        err = float(np.mean([np.linalg.norm(f - r) for f, r in zip(fake[1:], real[1:])]))
        ncs_p = normalized_cosine(_mppve_grad(actor, plan_critic, real, etas),
                                  _mppve_grad(actor, plan_critic, fake, etas))
        ncs_m = normalized_cosine(_mbpo_grad(actor, step_critic, real, etas),
                                  _mbpo_grad(actor, step_critic, fake, etas))
        records.append(GradStudyRecord(i, err, ncs_p, ncs_m))
    return records


def dominance_test(records):
    """Paired one-sided t-test of ncs_mppve > ncs_mbpo; returns (mean diff, p-value)."""
    a = np.array([r.ncs_mppve for r in records])
    b = np.array([r.ncs_mbpo for r in records])
    if np.allclose(a, b):
        return 0.0, 1.0
    res = stats.ttest_rel(a, b, alternative="greater")
    return float(np.mean(a - b)), float(res.pvalue)


def severe_error_ratio(records, error_bins, method="mppve"):
    """Fraction of records with ncs < 0.5 per rollout-error bin (None when a bin is empty)."""
    if not records:
        raise ValueError("no records")
    edges = np.asarray(error_bins, dtype=float)
    err = np.array([r.rollout_error for r in records])
    ncs = np.array([getattr(r, f"ncs_{method}") for r in records])
    out = []
    for i in range(len(edges) - 1):
        lo, hi = edges[i], edges[i + 1]
        inside = (err >= lo) & ((err < hi) if i < len(edges) - 2 else (err <= hi))
        n = int(inside.sum())
        out.append(None if n == 0 else float(np.sum(ncs[inside] < 0.5)) / n)
    return out


def collect_on_policy(env, actor, n, rng, deterministic=False):
    """Observations visited by running ``actor`` from fresh resets (one env at a time)."""
    out, st = [], env.reset(rng, 1)
    while len(out) < n:
        out.append(st.observation[0].copy())
        a = actor.act(st.observation, rng, deterministic)
        st, _, done = env.step(st, a, rng=rng)
        if done[0]:
            st = env.reset(rng, 1)
    return np.array(out)


def td_residual(critic, batch, targets):
    """RMS TD error divided by the spread of the targets."""
    q = critic.q_min(ad.Tape(record=False), batch.s0, batch.flat_actions()).value
    return float(np.sqrt(np.mean((q - targets) ** 2)) / (np.std(targets) + 1e-8))


def fit_study_critics(env, actor, k, rng, gamma=0.99, n_transitions=20_000, updates=4000,
                      batch_size=256, hidden=(64, 64), lr=1e-3, polyak=0.01, activation="tanh"):
    """Train a plan critic (k) and a step critic (1) on on-policy real data.

    Bootstrap plans come from the frozen policy composed with the true
    dynamics. Returns (plan critic, step critic, (plan residual, step residual))
    with residuals measured on a fresh batch. The default activation is tanh:
    a ReLU critic has piecewise-constant action gradients, so per-state
    gradient directions jump under arbitrarily small state errors.
    """
    buf = SegmentBuffer(n_transitions, env.spec.obs_dim, env.spec.act_dim, "env")
    st, ep = env.reset(rng, 1), buf.new_episode()
    for _ in range(n_transitions):
        a = actor.act(st.observation, rng)
        st2, r, done = env.step(st, a, rng=rng)
        buf.add(st.observation, a, r, st2.observation, False, ep, st.step_index)
        st = st2
        if done[0]:
            st, ep = env.reset(rng, 1), buf.new_episode()
    true = TrueDynamicsModel(env)
    out = []
    for kk in (k, 1):
        critic = CriticPair(env.spec.obs_dim, env.spec.act_dim, kk, rng, hidden, activation,
                            polyak=polyak, lr=lr)
        planner = make_planner(actor, true, kk)
        for _ in range(updates):
            b = buf.sample_windows(batch_size, kk, rng)
            critic_update(critic, b, td_target(b, critic, planner, gamma, rng=rng))
            polyak_update(critic)
        b = buf.sample_windows(4 * batch_size, kk, rng)
        out.append((critic, td_residual(critic, b, td_target(b, critic, planner, gamma, rng=rng))))
    return out[0][0], out[1][0], (out[0][1], out[1][1])


def write_grad_records(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state_id", "rollout_error", "ncs_mppve", "ncs_mbpo"])
        for r in records:
            w.writerow([r.state_id, f"{r.rollout_error:.17g}", f"{r.ncs_mppve:.17g}", f"{r.ncs_mbpo:.17g}"])


# -- value bias study -------------------------------------------------------------------------


@dataclass
class BiasSamples:
    obs: np.ndarray          # (n, obs)
    plans: np.ndarray        # (n, k, act)
    q_mc: np.ndarray         # (n,)
    q_mc_se: np.ndarray      # (n,) standard error of each MC mean


@dataclass
class ValueBiasReport:
    mean_bias: float
    std_bias: float
    mean_se: float           # MC standard error of mean_bias
    bias: np.ndarray
    samples: BiasSamples


def mc_horizon(gamma, tol=1e-4):
    return 1 if gamma == 0 else int(math.ceil(math.log(tol) / math.log(gamma)))


def collect_bias_samples(env, actor, k, n_mc, gamma, rng, n_states=100, states=None):
    """On-policy states, plans from k real policy steps, and MC plan values.

    Each plan is executed open loop ``n_mc`` times from its state, after
    which the policy acts until the discount falls below 1e-4.
    """
    obs = collect_on_policy(env, actor, n_states, rng) if states is None else np.atleast_2d(states)
    n = len(obs)
    # plans: k real steps of the policy from each state
    s = env.state_from_obs(obs)
    plans = []
    for _ in range(k):
        a = actor.act(env.observe(s), rng)
        plans.append(a)
        s, _ = env.dynamics(s, a, env.draw_noise(rng, n))
    plans = np.stack(plans, axis=1)
    # Monte-Carlo returns, n_mc per state, vectorised
    H = mc_horizon(gamma)
    s = np.repeat(env.state_from_obs(obs), n_mc, axis=0)
    ret = np.zeros(n * n_mc)
    disc = 1.0
    for t in range(max(H, k)):
        a = np.repeat(plans[:, t], n_mc, axis=0) if t < k else actor.act(env.observe(s), rng)
        s, r = env.dynamics(s, a, env.draw_noise(rng, len(ret)))
        ret += disc * r
        disc *= gamma
    ret = ret.reshape(n, n_mc)
    se = ret.std(axis=1, ddof=1) / math.sqrt(n_mc) if n_mc > 1 else np.zeros(n)
    return BiasSamples(obs, plans, ret.mean(axis=1), se)


def bias_report(samples, q_pred):
    """Normalised bias (Q_pred - Q_mc) / |mean Q_mc| with its MC error."""
    denom = abs(float(np.mean(samples.q_mc)))
    if denom == 0.0:
        raise DegenerateInputError("mean Monte-Carlo value is zero")
    bias = (np.asarray(q_pred, dtype=float) - samples.q_mc) / denom
    mean_se = float(np.sqrt(np.sum(samples.q_mc_se ** 2)) / len(bias) / denom)
    return ValueBiasReport(float(np.mean(bias)), float(np.std(bias)), mean_se, bias, samples)


def predict_plan_values(critic, obs, plans):
    tape = ad.Tape(record=False)
    return critic.q_min(tape, obs, plans.reshape(len(obs), -1), target=False, trainable=False).value


def value_bias_study(env, actor, critic, k, n_mc, gamma, rng, n_states=100, states=None):
    samples = collect_bias_samples(env, actor, k, n_mc, gamma, rng, n_states, states)
    return bias_report(samples, predict_plan_values(critic, samples.obs, samples.plans))


def induced_tabular_policy(env: TabularEnv, actor):
    """Exact bin probabilities of the squashed Gaussian policy in each state.

    tanh is monotone, so P(bin j) = Phi((atanh(e_{j+1}) - mu) / sigma)
    - Phi((atanh(e_j) - mu) / sigma) with bin edges e_j on [-1, 1].
    """
    nS, nA = env.mdp.n_states, env.mdp.n_actions
    tape = ad.Tape(record=False)
    smp = actor.head(tape, np.eye(nS), np.zeros((nS, 1)))
    mu, sigma = smp.mean.value[:, 0], np.exp(smp.log_std.value[:, 0])
    edges = -1.0 + 2.0 * np.arange(nA + 1) / nA
    with np.errstate(divide="ignore"):
        u = np.arctanh(edges)
    cdf = ndtr((u[None, :] - mu[:, None]) / sigma[:, None])
    probs = np.diff(cdf, axis=1)
    probs = np.clip(probs, 0.0, None)
    return TabularPolicy(probs / probs.sum(axis=1, keepdims=True))


def exact_plan_values(env: TabularEnv, actor, k, obs, plans):
    """Exact open-loop plan values Q^pi(s, plan) for a tabular-embedded env."""
    pol = induced_tabular_policy(env, actor)
    table = solve_plan_values(env.mdp, pol, k, conditioning="open-loop")
    nA = env.mdp.n_actions
    from .envs import action_bins
    bins = action_bins(plans[..., 0], nA)
    s = np.argmax(obs, axis=-1)
    return np.array([table.values[si, plan_index(b, nA)] for si, b in zip(s, bins)])


def write_bias_report(path, report):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "q_mc", "q_mc_se", "normalized_bias"])
        for i, (q, se, b) in enumerate(zip(report.samples.q_mc, report.samples.q_mc_se, report.bias)):
            w.writerow([i, f"{q:.17g}", f"{se:.17g}", f"{b:.17g}"])
        w.writerow(["mean", "", f"{report.mean_se:.17g}", f"{report.mean_bias:.17g}"])
        w.writerow(["std", "", "", f"{report.std_bias:.17g}"])
