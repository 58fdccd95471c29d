"""Ring buffers of transitions with k-step window sampling.

Every stored transition carries the id of the episode (or model rollout) it
belongs to, its position in that episode and a true-terminal flag. A k-window
starting at a transition is valid when the next k transitions are stored
contiguously in the same episode, or when the episode terminates inside the
window; in the latter case rewards after the terminal step are zero and the
missing actions are filled by a caller-supplied policy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ShapeError

SOURCES = ("env", "model")


@dataclass
class PlanSegment:
    """One k-step window: s0, k actions, k rewards, s_k, optional terminal index."""

    s0: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    s_k: np.ndarray
    done_within: int | None = None

    def __post_init__(self):
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=float))
        self.rewards = np.array(self.rewards, dtype=float).reshape(-1)
        if len(self.actions) != len(self.rewards):
            raise ShapeError("a segment needs exactly k actions and k rewards")
        if self.done_within is not None:
            if not 0 <= self.done_within < self.k:
                raise ValueError("done_within must lie in [0, k)")
            self.rewards[self.done_within + 1:] = 0.0

    @property
    def k(self):
        return len(self.rewards)


@dataclass
class StateBatch:
    obs: np.ndarray
    source: str

    def __len__(self):
        return len(self.obs)


@dataclass
class PlanBatch:
    """Batched k-windows. ``done_within`` is -1 where no terminal occurs."""

    s0: np.ndarray           # (B, obs)
    actions: np.ndarray      # (B, k, act)
    rewards: np.ndarray      # (B, k)
    s_k: np.ndarray          # (B, obs)
    done_within: np.ndarray  # (B,)
    source: np.ndarray       # (B,) of str

    def __len__(self):
        return len(self.s0)

    @property
    def k(self):
        return self.rewards.shape[1]

    @property
    def terminal(self):
        return self.done_within >= 0

    def flat_actions(self):
        return self.actions.reshape(len(self), -1)

    def segment(self, i):
        d = int(self.done_within[i])
        return PlanSegment(self.s0[i], self.actions[i], self.rewards[i], self.s_k[i],
                           None if d < 0 else d)

    @classmethod
    def from_segments(cls, segments, source="env"):
        return cls(np.stack([s.s0 for s in segments]),
                   np.stack([s.actions for s in segments]),
                   np.stack([s.rewards for s in segments]),
                   np.stack([s.s_k for s in segments]),
                   np.array([-1 if s.done_within is None else s.done_within for s in segments]),
                   np.array([source] * len(segments)))

    @staticmethod
    def concat(batches):
        batches = [b for b in batches if len(b)]
        return PlanBatch(*(np.concatenate([getattr(b, f) for b in batches])
                           for f in ("s0", "actions", "rewards", "s_k", "done_within", "source")))


class SegmentBuffer:
    """Fixed-capacity ring of transitions from one source."""

    def __init__(self, capacity, obs_dim, act_dim, source="env"):
        if source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity, self.obs_dim, self.act_dim = capacity, obs_dim, act_dim
        self._source = source
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.episode = np.full(capacity, -1, dtype=np.int64)
        self.position = np.zeros(capacity, dtype=np.int64)
        self.cursor = 0
        self.size = 0
        self._next_episode = 0

    @property
    def source(self):
        return self._source

    def __len__(self):
        return self.size

    def clear(self):
        self.cursor = self.size = 0
        self.episode[:] = -1

    def new_episode(self):
        e = self._next_episode
        self._next_episode += 1
        return e

    def add(self, obs, act, rew, next_obs, done, episode, position):
        """Append a batch of transitions (all arrays share the leading length)."""
        obs = np.atleast_2d(obs)
        n = len(obs)
        idx = (self.cursor + np.arange(n)) % self.capacity
        self.obs[idx] = obs
        self.act[idx] = np.reshape(act, (n, self.act_dim))
        self.rew[idx] = np.reshape(rew, n)
        self.next_obs[idx] = np.reshape(next_obs, (n, self.obs_dim))
        self.done[idx] = np.broadcast_to(done, n)
        self.episode[idx] = np.broadcast_to(episode, n)
        self.position[idx] = np.broadcast_to(position, n)
        self.cursor = (self.cursor + n) % self.capacity
        self.size = min(self.size + n, self.capacity)

    def add_rollouts(self, segments):
        """Store model rollouts (arrays shaped (n, L, ...)), one episode each."""
        n, L = segments.rew.shape
        eps = self._next_episode + np.arange(n)
        self._next_episode += n
        flat = lambda x: x.reshape((n * L,) + x.shape[2:])  # noqa: E731
        self.add(flat(segments.obs), flat(segments.act), flat(segments.rew), flat(segments.next_obs),
                 False, np.repeat(eps, L), np.tile(np.arange(L), n))

    # logical order: offset 0 is the oldest stored transition
    def _phys(self, offset):
        return (self.cursor - self.size + offset) % self.capacity

    def window_info(self, offsets, k):
        """Validity and terminal index (-1 if none) of windows at logical offsets."""
        offsets = np.asarray(offsets)
        first = self._phys(offsets)
        ep0, pos0 = self.episode[first], self.position[first]
        valid = np.ones(len(offsets), dtype=bool)
        alive = np.ones(len(offsets), dtype=bool)     # no terminal seen yet
        done_within = np.full(len(offsets), -1)
        for m in range(k):
            need = alive.copy()
            inside = offsets + m < self.size
            ph = self._phys(np.minimum(offsets + m, self.size - 1))
            ok = inside & (self.episode[ph] == ep0) & (self.position[ph] == pos0 + m)
            valid &= ~need | ok
            term = need & ok & self.done[ph]
            done_within[term] = m
            alive &= ~term
        return valid, done_within

    def sample_windows(self, n, k, rng, fill=None, max_rounds=100):
        """Uniform sample of ``n`` valid k-windows via rejection.

        ``fill(obs, rng)`` supplies actions for slots after a terminal; by
        default they are zeros.
        """
        if self.size == 0:
            raise CapacityError(f"{self._source} buffer is empty")
        chosen, dws = [], []
        got = 0
        for _ in range(max_rounds):
            cand = rng.integers(0, self.size, size=max(n - got, 1) * 2)
            valid, dw = self.window_info(cand, k)
            cand, dw = cand[valid], dw[valid]
            take = min(len(cand), n - got)
            chosen.append(cand[:take])
            dws.append(dw[:take])
            got += take
            if got == n:
                break
        if got < n:
            raise CapacityError(f"could not find {n} valid {k}-windows in {self._source} buffer")
        return self._gather(np.concatenate(chosen), np.concatenate(dws), k, rng, fill)

    def _gather(self, offsets, done_within, k, rng, fill):
        B = len(offsets)
        steps = np.minimum(offsets[:, None] + np.arange(k)[None, :], self.size - 1)
        end = np.where(done_within >= 0, done_within, k - 1)
        mask = np.arange(k)[None, :] <= end[:, None]
        ph = self._phys(steps)
        actions = self.act[ph].copy()
        rewards = np.where(mask, self.rew[ph], 0.0)
        last = self._phys(offsets + end)
        s_k = self.next_obs[last]
        term = done_within >= 0
        if np.any(term & (done_within < k - 1)):
            for i in np.flatnonzero(term & (done_within < k - 1)):
                for m in range(done_within[i] + 1, k):
                    actions[i, m] = 0.0 if fill is None else fill(s_k[i:i + 1], rng)[0]
        return PlanBatch(self.obs[ph[:, 0]].copy(), actions, rewards, s_k.copy(), done_within,
                         np.array([self._source] * B))

    def sample_states(self, n, rng):
        if self.size == 0:
            raise CapacityError(f"{self._source} buffer is empty")
        idx = self._phys(rng.integers(0, self.size, size=n))
        return StateBatch(self.obs[idx].copy(), self._source)

    def all_obs(self):
        return self.obs[self._phys(np.arange(self.size))]

    def transitions(self):
        from .dynamics import TransitionBatch
        ph = self._phys(np.arange(self.size))
        return TransitionBatch(self.obs[ph], self.act[ph], self.rew[ph], self.next_obs[ph], self.done[ph])


def sample_mixed(env_buf, model_buf, n, k, real_ratio, rng, fill=None):
    """Critic batch with round(real_ratio * n) env windows, the rest from the model buffer."""
    if model_buf is None or len(model_buf) == 0:
        return env_buf.sample_windows(n, k, rng, fill)
    n_env = int(round(real_ratio * n))
    parts = []
    if n_env:
        parts.append(env_buf.sample_windows(n_env, k, rng, fill))
    if n - n_env:
        parts.append(model_buf.sample_windows(n - n_env, k, rng, fill))
    return PlanBatch.concat(parts)
