"""Planning policy: k-step plans composed through the model, actor loss, temperature."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, StateError


class Actor:
    """Tanh-squashed Gaussian policy pi_phi(a | s) with actions in [-1, 1]."""

    def __init__(self, obs_dim, act_dim, rng, hidden=(64, 64), activation="relu", lr=3e-4):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.spec = ad.MLPSpec("actor", (obs_dim,) + tuple(hidden) + (2 * act_dim,), activation)
        self.params = ad.ParamStore()
        ad.init_mlp(self.params, self.spec, rng)
        self.optimizer = ad.Adam(lr=lr)
        self.updates = 0
        self.model_states_seen = 0
        self.real_states_seen = 0

    def head(self, tape, obs, noise):
        return ad.gaussian_head(self.params, self.spec, obs, noise, tape)

    def act(self, obs, rng=None, deterministic=False):
        """Numpy action sample (or the squashed mean when deterministic)."""
        obs = np.atleast_2d(obs)
        noise = np.zeros((len(obs), self.act_dim)) if deterministic \
            else rng.standard_normal((len(obs), self.act_dim))
        return self.head(ad.Tape(record=False), obs, noise).value.value

    def state_arrays(self):
        return {f"actor/{k}": v for k, v in self.params.items()}

    def load_arrays(self, arrays):
        for k in self.params.names():
            self.params.assign(k, arrays[f"actor/{k}"])


@dataclass
class PlanNoise:
    policy: list                 # k arrays (B, act)
    model: list                  # k - 1 pairs (members, noise)


def draw_plan_noise(rng, n, k, act_dim, model=None, model_mode="sample"):
    """Policy noise for each step interleaved with model noise between steps."""
    pol, mod = [], []
    for m in range(k):
        pol.append(rng.standard_normal((n, act_dim)))
        if m < k - 1:
            mod.append(model.draw_noise(rng, n, model_mode))
    return PlanNoise(pol, mod)


def zero_plan_noise(n, k, act_dim, model=None):
    mod = []
    for _ in range(k - 1):
        members = np.asarray(model.elites)[np.zeros(n, dtype=int)]
        width = model.draw_noise(np.random.default_rng(0), 1)[1].shape[-1]
        mod.append((members, np.zeros((n, width))))
    return PlanNoise([np.zeros((n, act_dim)) for _ in range(k)], mod)


@dataclass
class PlanRollout:
    start: ad.Var
    actions: list                # k Vars (B, act)
    states: list                 # k Vars: the start then k - 1 imagined states
    step_log_probs: list         # k Vars (B,)
    log_prob: ad.Var             # (B,) sum of the step log-probs
    noise: PlanNoise
    rewards: list = field(default_factory=list)   # k - 1 imagined rewards

    @property
    def k(self):
        return len(self.actions)

    def flat_actions(self):
        return ad.concat(self.actions, axis=-1)


def plan(actor, model, s, k, noise, tape):
    """Build a k-step plan from real states ``s`` on ``tape``.

    Actions come from the policy head; between actions the model advances
    the state with its parameters held constant, so gradients reach the
    policy through the imagined states. Returns a PlanRollout.
    """
    if k > 1 and (model is None or not model.trained):
        raise StateError("planning with k > 1 needs a trained model")
    s = s if isinstance(s, ad.Var) else tape.const(s)
    if not np.all(np.isfinite(s.value)):
        raise StateError("plan start states must be finite")
    states, actions, logps, rewards = [s], [], [], []
    cur = s
    for m in range(k):
        smp = actor.head(tape, cur, noise.policy[m])
        actions.append(smp.value)
        logps.append(smp.log_prob)
        if m < k - 1:
            members, mnoise = noise.model[m]
            cur, r = model.predict(tape, cur, smp.value, members, mnoise)
            states.append(cur)
            rewards.append(r)
    total = logps[0]
    for lp in logps[1:]:
        total = total + lp
    return PlanRollout(s, actions, states, logps, total, noise, rewards)


def make_planner(actor, model, k, model_mode="sample"):
    """Numpy sampler (obs, rng) -> (plans (B, k, act), log-probs (B,))."""
    def planner(obs, rng):
        noise = draw_plan_noise(rng, len(obs), k, actor.act_dim, model, model_mode)
        p = plan(actor, model, obs, k, noise, ad.Tape(record=False))
        return np.stack([a.value for a in p.actions], axis=1), p.log_prob.value
    return planner


def actor_loss(critic, plans, soft=False, alpha=0.0, tape=None):
    """mean(-Q(s_0, plan) + alpha * log pi^k(plan | s_0)).

    The critic is evaluated exactly once, at the real start states.
    """
    q = critic.q_min(tape or plans.start.tape, plans.start, plans.flat_actions(), trainable=False)
    obj = -1.0 * q
    if soft:
        obj = obj + alpha * plans.log_prob
    return ad.reduce_mean(obj)


def actor_update(actor, states, critic, model, k, rng, soft=False, temperature=None,
                 model_mode="sample", allow_model_states=False):
    """One optimiser step on actor_loss for a StateBatch of real states.

    Returns (loss, plan log-probs). Model-buffer states are refused unless
    ``allow_model_states`` is set (used only by the mixed-improvement
    ablation with k = 1).
    """
    src = np.broadcast_to(np.asarray(states.source), (len(states),))
    n_model = int(np.sum(src == "model"))
    if n_model and not allow_model_states:
        raise ContractError("the planning actor trains on environment states only")
    noise = draw_plan_noise(rng, len(states), k, actor.act_dim, model, model_mode)
    tape = ad.Tape()
    plans = plan(actor, model, states.obs, k, noise, tape)
    alpha = temperature.alpha if (soft and temperature is not None) else 0.0
    loss = actor_loss(critic, plans, soft, alpha, tape)
    grads = tape.backward(loss)
    actor.optimizer.step(actor.params, grads.aligned(actor.params))
    actor.updates += 1
    actor.model_states_seen += n_model
    actor.real_states_seen += len(states) - n_model
    return float(loss.value), plans.log_prob.value


class Temperature:
    """Entropy weight alpha = exp(log_alpha) tuned toward a per-step entropy target."""

    def __init__(self, alpha=0.2, target_entropy=-1.0, lr=3e-4, learnable=True):
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        self.params = ad.ParamStore()
        self.params.add("log_alpha", np.array([math.log(alpha)]))
        self.target_entropy = float(target_entropy)
        self.learnable = learnable
        self.optimizer = ad.Adam(lr=lr)

    @property
    def log_alpha(self):
        return float(self.params["log_alpha"][0])

    @property
    def alpha(self):
        return math.exp(self.log_alpha)

    def state_arrays(self):
        return {"temperature/log_alpha": self.params["log_alpha"]}

    def load_arrays(self, arrays):
        self.params.assign("log_alpha", arrays["temperature/log_alpha"])


def alpha_loss(temperature, plan_log_probs, k, tape):
    """-log_alpha * (mean(log pi^k / k) + target_entropy)."""
    la = tape.param(temperature.params, "log_alpha")
    drive = float(np.mean(np.asarray(plan_log_probs) / k)) + temperature.target_entropy
    return ad.reduce_sum(-1.0 * la * drive)


def alpha_update(temperature, plan_log_probs, k=1):
    if not temperature.learnable:
        return temperature
    tape = ad.Tape()
    loss = alpha_loss(temperature, plan_log_probs, k, tape)
    temperature.optimizer.step(temperature.params, tape.backward(loss))
    return temperature
