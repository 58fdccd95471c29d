"""H-step model-value-expansion targets for a single-step critic."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .buffer import PlanBatch, StateBatch
from .dynamics import model_step


def imagine(actor, model, s, H, rng, model_mode="sample"):
    """Roll the policy H model steps from ``s``.

    Draws, per step m = 0..H: policy noise at state m, then (if m < H) model
    noise. Returns (states [H + 1], actions [H + 1], log-probs [H + 1],
    rewards [H]).
    """
    tape = ad.Tape(record=False)
    states, actions, logps, rewards = [np.asarray(s, dtype=float)], [], [], []
    for m in range(H + 1):
        noise = rng.standard_normal((len(s), actor.act_dim))
        smp = actor.head(tape, states[-1], noise)
        actions.append(smp.value.value)
        logps.append(smp.log_prob.value)
        if m < H:
            s2, r = model_step(model, states[-1], actions[-1], rng, model_mode)
            states.append(s2)
            rewards.append(r)
    return states, actions, logps, rewards


def mve_targets(batch, critic, actor, model, H, gamma, rng, soft=False, alpha=0.0,
                model_mode="sample"):
    """Targets for real transitions and the imagined ones along their rollouts.

    ``batch`` is a one-step PlanBatch (s, a, r, s'). The imagined rollout
    starts at s'; each state's value is backed up from the same bootstrap at
    the final imagined state, so imagined transition i gets an (H - i)-step
    target. Returns (real targets (B,), fake PlanBatch, fake targets).
    """
    if H < 0:
        raise ValueError("H must be >= 0")
    states, actions, logps, rewards = imagine(actor, model, batch.s_k, H, rng, model_mode)
    tape = ad.Tape(record=False)
    q = critic.q_min(tape, states[H], actions[H], target=True).value
    v = q - alpha * logps[H] if soft else q
    fake_y = [None] * H
    for i in reversed(range(H)):
        fake_y[i] = rewards[i] + gamma * v
        v = fake_y[i] - alpha * logps[i] if soft else fake_y[i]
    term = batch.terminal
    y_real = batch.rewards[:, 0] + gamma * np.where(term, 0.0, v)
    keep = ~term
    n = int(keep.sum())
    fake = PlanBatch(
        np.concatenate([states[i][keep] for i in range(H)]) if H else np.zeros((0, batch.s0.shape[1])),
        np.concatenate([actions[i][keep][:, None, :] for i in range(H)]) if H
        else np.zeros((0, 1, batch.actions.shape[2])),
        np.concatenate([rewards[i][keep][:, None] for i in range(H)]) if H else np.zeros((0, 1)),
        np.concatenate([states[i + 1][keep] for i in range(H)]) if H else np.zeros((0, batch.s0.shape[1])),
        np.full(n * H, -1), np.array(["model"] * (n * H)))
    fake_targets = np.concatenate([fake_y[i][keep] for i in range(H)]) if H else np.zeros(0)
    return y_real, fake, fake_targets


def mve_target(model, critic, actor, segment, H, gamma, rng, soft=False, alpha=0.0):
    """Target of a single transition (a one-step PlanSegment)."""
    batch = PlanBatch.from_segments([segment])
    return float(mve_targets(batch, critic, actor, model, H, gamma, rng, soft, alpha)[0][0])


def imagined_states(actor, model, s, H, rng, model_mode="sample"):
    """StateBatch of the real states followed by their imagined successors."""
    states = imagine(actor, model, s, H, rng, model_mode)[0]
    obs = np.concatenate(states)
    src = np.array(["env"] * len(s) + ["model"] * (len(obs) - len(s)))
    return StateBatch(obs, src)
