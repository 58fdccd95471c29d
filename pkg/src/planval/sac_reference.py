"""Plain single-step SAC written directly in numpy with hand-derived gradients.

It shares no code with the autodiff-based learners on purpose: it is the
independent reference that the k = 1 planning learners are checked against,
and it is the agent behind the ``sac`` baseline variant.
"""
from __future__ import annotations

import math

import numpy as np

_EDGE = 1.0 - 1e-12
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _sigmoid(v):
    return np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))


def _softplus(v):
    return np.logaddexp(0.0, v)


class _Net:
    """ReLU MLP with a manual backward pass."""

    def __init__(self, weights):
        self.w = weights          # list of (W, b)

    def forward(self, x):
        hs, zs = [x], []
        h = x
        for i, (W, b) in enumerate(self.w):
            z = h @ W + b
            zs.append(z)
            h = np.maximum(z, 0.0) if i < len(self.w) - 1 else z
            hs.append(h)
        return h, (hs, zs)

    def backward(self, cache, g):
        hs, zs = cache
        grads = [None] * len(self.w)
        for i in reversed(range(len(self.w))):
            W, _ = self.w[i]
            if i < len(self.w) - 1:
                g = g * (zs[i] > 0)
            grads[i] = (hs[i].T @ g, g.sum(0))
            g = g @ W.T
        return grads, g


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = self.v = None

    def step(self, arrays, grads):
        if self.m is None:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            a[...] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _layers(store, prefix):
    out, i = [], 0
    while f"{prefix}.w{i}" in store:
        out.append((np.array(store[f"{prefix}.w{i}"]), np.array(store[f"{prefix}.b{i}"])))
        i += 1
    return out


class SACReference:
    """Single Q network, squashed Gaussian policy, learned temperature."""

    def __init__(self, actor_w, critic_w, target_w, log_alpha, gamma=0.99, polyak=0.005,
                 lr_actor=3e-4, lr_critic=3e-4, lr_alpha=3e-4, target_entropy=-1.0,
                 learn_alpha=True):
        self.actor, self.critic, self.target = _Net(actor_w), _Net(critic_w), _Net(target_w)
        self.log_alpha = np.array([float(log_alpha)])
        self.gamma, self.polyak = gamma, polyak
        self.target_entropy, self.learn_alpha = target_entropy, learn_alpha
        self.opt_actor, self.opt_critic, self.opt_alpha = _Adam(lr_actor), _Adam(lr_critic), _Adam(lr_alpha)
        self.act_dim = actor_w[-1][0].shape[1] // 2

    @classmethod
    def from_stores(cls, actor_store, critic_store, target_store, log_alpha, **kw):
        """Copy initial weights from ParamStores laid out like the planning learners."""
        return cls(_layers(actor_store, "actor"), _layers(critic_store, "critic.q0"),
                   _layers(target_store, "critic.q0"), log_alpha, **kw)

    @classmethod
    def fresh(cls, obs_dim, act_dim, rng, hidden=(64, 64), alpha=0.2, **kw):
        """Random init matching the planning learners' initialiser draw order."""
        def init(sizes):
            return [(rng.standard_normal((a, b)) / math.sqrt(a), np.zeros(b))
                    for a, b in zip(sizes[:-1], sizes[1:])]
        actor = init((obs_dim,) + tuple(hidden) + (2 * act_dim,))
        critic = init((obs_dim + act_dim,) + tuple(hidden) + (1,))
        target = [(W.copy(), b.copy()) for W, b in critic]
        return cls(actor, critic, target, math.log(alpha), **kw)

    @property
    def alpha(self):
        return math.exp(self.log_alpha[0])

    # policy ------------------------------------------------------------------------
    def _policy(self, obs, noise):
        out, cache = self.actor.forward(obs)
        d = self.act_dim
        mean, raw = out[:, :d], out[:, d:]
        ls = np.clip(raw, -20.0, 2.0)
        std = np.exp(ls)
        u = mean + std * noise
        t = np.tanh(u)
        a = np.clip(t, -_EDGE, _EDGE)
        corr = 2.0 * (math.log(2.0) - u - _softplus(-2.0 * u))
        logp = np.sum(-0.5 * noise * noise - _HALF_LOG_2PI - ls - corr, axis=-1)
        return a, logp, (cache, raw, std, u, t, noise)

    def _policy_backward(self, pc, g_a, g_logp):
        cache, raw, std, u, t, noise = pc
        g_u = g_a * (np.abs(t) < _EDGE) * (1.0 - t * t)
        g_u = g_u + g_logp[:, None] * (2.0 - 4.0 * _sigmoid(-2.0 * u))
        g_ls = -g_logp[:, None] + g_u * std * noise
        g_raw = g_ls * ((raw > -20.0) & (raw < 2.0))
        grads, _ = self.actor.backward(cache, np.concatenate([g_u, g_raw], axis=-1))
        return grads

    def act(self, obs, rng=None, deterministic=False):
        obs = np.atleast_2d(obs)
        noise = np.zeros((len(obs), self.act_dim)) if deterministic \
            else rng.standard_normal((len(obs), self.act_dim))
        return self._policy(obs, noise)[0]

    def q(self, obs, act, target=False):
        net = self.target if target else self.critic
        return net.forward(np.concatenate([obs, act], axis=-1))[0][:, 0]

    # updates -----------------------------------------------------------------------
    def critic_update(self, s, a, r, s2, done, rng):
        """One step on mean 0.5 (Q(s, a) - y)^2; policy noise for a' drawn from ``rng``."""
        noise = rng.standard_normal((len(s2), self.act_dim))
        a2, logp2, _ = self._policy(s2, noise)
        y = r + self.gamma * (1.0 - done) * (self.q(s2, a2, target=True) - self.alpha * logp2)
        q, cache = self.critic.forward(np.concatenate([s, a], axis=-1))
        resid = q[:, 0] - y
        loss = float(np.mean(0.5 * resid * resid))
        grads, _ = self.critic.backward(cache, (resid / len(s))[:, None])
        self.opt_critic.step([p for wb in self.critic.w for p in wb], [g for gb in grads for g in gb])
        return loss

    def actor_update(self, s, rng):
        noise = rng.standard_normal((len(s), self.act_dim))
        a, logp, pc = self._policy(s, noise)
        x = np.concatenate([s, a], axis=-1)
        q, qcache = self.critic.forward(x)
        alpha = self.alpha
        loss = float(np.mean(-q[:, 0] + alpha * logp))
        n = len(s)
        _, g_x = self.critic.backward(qcache, np.full((n, 1), -1.0 / n))
        grads = self._policy_backward(pc, g_x[:, s.shape[1]:], np.full(n, alpha / n))
        self.opt_actor.step([p for wb in self.actor.w for p in wb], [g for gb in grads for g in gb])
        return loss, logp

    def alpha_update(self, logp):
        if self.learn_alpha:
            g = -(float(np.mean(logp)) + self.target_entropy)
            self.opt_alpha.step([self.log_alpha], [np.array([g])])

    def polyak_update(self):
        t = self.polyak
        for (W, b), (Wt, bt) in zip(self.critic.w, self.target.w):
            Wt[...] = t * W + (1.0 - t) * Wt
            bt[...] = t * b + (1.0 - t) * bt

    def weights(self):
        return {"actor": self.actor.w, "critic": self.critic.w, "target": self.target.w}
