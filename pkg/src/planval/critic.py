"""Plan-value critic Q(s, a_0..a_{k-1}): targets, loss, updates, target network."""
from __future__ import annotations

import itertools

import numpy as np

from . import autodiff as ad
from .buffer import PlanBatch, PlanSegment
from .envs import action_bins
from .errors import ShapeError


class CriticPair:
    """Online and target parameters of one (or two) plan-value networks.

    The network reads the observation concatenated with the k actions in
    order, so its input width is obs_dim + k * act_dim.
    """

    def __init__(self, obs_dim, act_dim, k, rng, hidden=(64, 64), activation="relu",
                 polyak=0.005, lr=3e-4, twin=False):
        if not 0.0 < polyak <= 1.0:
            raise ValueError("polyak rate must lie in (0, 1]")
        self.obs_dim, self.act_dim, self.k = obs_dim, act_dim, k
        self.polyak, self.twin = polyak, twin
        width = obs_dim + k * act_dim
        self.specs = [ad.MLPSpec(f"critic.q{i}", (width,) + tuple(hidden) + (1,), activation)
                      for i in range(2 if twin else 1)]
        self.params = ad.ParamStore()
        for spec in self.specs:
            ad.init_mlp(self.params, spec, rng)
        self.target = self.params.copy()
        self.optimizer = ad.Adam(lr=lr)
        self.updates = 0
        self.online_evals = 0
        self.eval_log = []          # observations passed to online evaluations

    @property
    def input_width(self):
        return self.specs[0].sizes[0]

    def q(self, tape, obs, actions, target=False, trainable=True):
        """Per-head values, each a (B,) Var. ``actions`` is (B, k * act_dim)."""
        obs = obs if isinstance(obs, ad.Var) else tape.const(obs)
        actions = actions if isinstance(actions, ad.Var) else tape.const(actions)
        if obs.shape[-1] + actions.shape[-1] != self.input_width:
            raise ShapeError(f"critic input width {obs.shape[-1] + actions.shape[-1]} "
                             f"!= {self.input_width}")
        store = self.target if target else self.params
        if not target:
            self.online_evals += 1
            self.eval_log.append(obs.value)
        x = ad.concat([obs, actions], axis=-1)
        return [ad.reshape(ad.mlp_forward(store, s, x, tape, trainable and not target), (len(obs),))
                for s in self.specs]

    def q_min(self, tape, obs, actions, target=False, trainable=True):
        heads = self.q(tape, obs, actions, target, trainable)
        if len(heads) == 1:
            return heads[0]
        a, b = heads
        pick = (a.value <= b.value).astype(float)
        return a * pick + b * (1.0 - pick)

    def state_arrays(self):
        out = {f"critic/{k}": v for k, v in self.params.items()}
        out.update({f"critic_target/{k}": v for k, v in self.target.items()})
        return out

    def load_arrays(self, arrays):
        for k in self.params.names():
            self.params.assign(k, arrays[f"critic/{k}"])
            self.target.assign(k, arrays[f"critic_target/{k}"])


def _as_batch(segment):
    if isinstance(segment, PlanSegment):
        return PlanBatch.from_segments([segment])
    return segment


def discounted_sum(rewards, gamma):
    k = rewards.shape[-1]
    return rewards @ (gamma ** np.arange(k))


def td_target(segment, critic, planner, gamma, soft=False, alpha=0.0, rng=None):
    """Single-sample k-step target for a PlanSegment or a PlanBatch.

    ``planner(obs, rng)`` returns a fresh plan (B, k, act) and its log-prob
    (B,) from the current planning policy. Rows with a terminal inside the
    window get no bootstrap. Returns a (B,) array.
    """
    batch = _as_batch(segment)
    k = batch.k
    if k != critic.k:
        raise ShapeError(f"segment length {k} != critic plan length {critic.k}")
    ret = discounted_sum(batch.rewards, gamma)
    acts, logp = planner(batch.s_k, rng)
    tape = ad.Tape(record=False)
    q = critic.q_min(tape, batch.s_k, np.reshape(acts, (len(batch), -1)), target=True).value
    boot = q - alpha * logp if soft else q
    return ret + gamma ** k * np.where(batch.terminal, 0.0, boot)


def critic_loss(critic, batch, targets, tape=None):
    """Mean of 0.5 (Q - y)^2 per head, summed over heads; y is a constant."""
    tape = tape or ad.Tape()
    y = np.asarray(targets, dtype=float)
    heads = critic.q(tape, batch.s0, batch.flat_actions())
    loss = None
    for qv in heads:
        d = qv - y
        term = ad.reduce_mean(0.5 * d * d)
        loss = term if loss is None else loss + term
    return loss


def critic_update(critic, batch, targets):
    """One optimiser step on critic_loss; returns the loss value."""
    tape = ad.Tape()
    loss = critic_loss(critic, batch, targets, tape)
    grads = tape.backward(loss)
    critic.optimizer.step(critic.params, grads.aligned(critic.params))
    critic.updates += 1
    return float(loss.value)


def polyak_update(critic):
    t = critic.polyak
    for name, v in critic.params.items():
        old = critic.target[name]
        # incremental form leaves the target bit-exact once it equals the online weights
        critic.target.assign(name, v.copy() if t == 1.0 else old + t * (v - old))
    return critic


class TabularPlanCritic:
    """Exact plan values of a tabular MDP behind the critic interface.

    Observations are one-hot; each action coordinate is mapped to a bin.
    With ``interpolate`` the value is multilinear between bin centres, which
    gives a usable pathwise gradient in the actions; without it the lookup is
    exact and piecewise constant.
    """

    def __init__(self, table, n_actions, interpolate=False):
        self.table = table              # PlanValueTable
        self.k = table.k
        self.n_actions = n_actions
        self.interpolate = interpolate
        self.online_evals = 0
        self.eval_log = []

    def lookup(self, obs, actions):
        s = np.argmax(obs, axis=-1)
        bins = action_bins(np.asarray(actions).reshape(len(s), self.k), self.n_actions)
        idx = np.zeros(len(s), dtype=int)
        for m in range(self.k):
            idx = idx * self.n_actions + bins[:, m]
        return self.table.values[s, idx]

    def q(self, tape, obs, actions, target=False, trainable=True):
        obs_v = obs.value if isinstance(obs, ad.Var) else np.asarray(obs)
        if not target:
            self.online_evals += 1
            self.eval_log.append(obs_v)
        if not self.interpolate:
            av = actions.value if isinstance(actions, ad.Var) else actions
            return [tape.const(self.lookup(obs_v, av))]
        actions = actions if isinstance(actions, ad.Var) else tape.const(actions)
        s = np.argmax(obs_v, axis=-1)
        nA = self.n_actions
        pos = ad.clip((actions + 1.0) * (0.5 * nA) - 0.5, 0.0, nA - 1.0)
        lo = np.minimum(np.floor(pos.value), nA - 2).astype(int) if nA > 1 \
            else np.zeros(pos.shape, dtype=int)
        frac = pos - lo
        total = None
        for corner in itertools.product((0, 1), repeat=self.k):
            idx = np.zeros(len(s), dtype=int)
            w = None
            for m, c in enumerate(corner):
                b = np.minimum(lo[:, m] + c, nA - 1)
                idx = idx * nA + b
                wm = frac[:, m] if c else 1.0 - frac[:, m]
                w = wm if w is None else w * wm
            term = w * self.table.values[s, idx]
            total = term if total is None else total + term
        return [total]

    def q_min(self, tape, obs, actions, target=False, trainable=True):
        return self.q(tape, obs, actions, target, trainable)[0]
