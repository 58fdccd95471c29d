"""Ensemble of Gaussian MLPs predicting (state delta, reward).

Members share one ParamStore; every weight carries a leading member axis so
the whole ensemble runs as one batched matmul. Inputs (obs, action) and
targets (delta obs, reward) are standardised with statistics fitted on the
training split. Log-variances are soft-clamped between learnable bounds that
are themselves kept inside [-10, 0.5].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import CapacityError, NumericError, StateError

LOGVAR_MIN = -10.0
LOGVAR_MAX = 0.5
BOUND_REG = 0.01
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class TransitionBatch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray = None

    def __post_init__(self):
        n = len(self.s)
        if self.done is None:
            self.done = np.zeros(n, dtype=bool)
        if not (len(self.a) == len(self.r) == len(self.s_next) == len(self.done) == n):
            raise ValueError("transition arrays differ in length")
        for x in (self.s, self.a, self.r, self.s_next):
            if not np.all(np.isfinite(x)):
                raise NumericError("non-finite transition data")

    def __len__(self):
        return len(self.s)

    def take(self, idx):
        return TransitionBatch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])


class EnsembleDynamicsModel:
    """p_theta(s', r | s, a) as an ensemble of diagonal Gaussians."""

    def __init__(self, obs_dim, act_dim, rng, n_members=5, n_elites=3, hidden=(64, 64),
                 activation="relu", lr=1e-3):
        if not 1 <= n_elites <= n_members:
            raise ValueError("need 1 <= n_elites <= n_members")
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.out_dim = obs_dim + 1
        self.n_members, self.n_elites = n_members, n_elites
        self.spec = ad.MLPSpec("model", (obs_dim + act_dim,) + tuple(hidden) + (2 * self.out_dim,),
                               activation, ensemble=n_members)
        self.params = ad.ParamStore()
        ad.init_mlp(self.params, self.spec, rng)
        self.params.add("model.max_logvar", np.full((n_members, 1, self.out_dim), LOGVAR_MAX))
        self.params.add("model.min_logvar", np.full((n_members, 1, self.out_dim), LOGVAR_MIN))
        self.in_mu = np.zeros(obs_dim + act_dim)
        self.in_sd = np.ones(obs_dim + act_dim)
        self.out_mu = np.zeros(self.out_dim)
        self.out_sd = np.ones(self.out_dim)
        self.elites = np.arange(n_elites)
        self.trained = False
        self.lr = lr
        self.optimizer = ad.Adam(lr=lr)

    # normalisation ---------------------------------------------------------------
    def fit_normalizer(self, batch):
        x = np.concatenate([batch.s, batch.a], axis=-1)
        y = self.targets(batch)
        self.in_mu, self.in_sd = x.mean(0), _safe_sd(x.std(0))
        self.out_mu, self.out_sd = y.mean(0), _safe_sd(y.std(0))

    def targets(self, batch):
        return np.concatenate([batch.s_next - batch.s, np.reshape(batch.r, (-1, 1))], axis=-1)

    def normalize_in(self, x):
        return (x - self.in_mu) / self.in_sd

    def denormalize_in(self, z):
        return z * self.in_sd + self.in_mu

    def normalize_out(self, y):
        return (y - self.out_mu) / self.out_sd

    def denormalize_out(self, z):
        return z * self.out_sd + self.out_mu

    # forward ------------------------------------------------------------------------
    def forward(self, tape, x_norm, trainable=True):
        """Normalised inputs (E, B, in) or (B, in) -> (mean, logvar), each (E, B, D)."""
        if not isinstance(x_norm, ad.Var):
            x_norm = tape.const(x_norm)
        if x_norm.ndim == 2:
            x_norm = ad.reshape(x_norm, (1,) + x_norm.shape)
        out = ad.mlp_forward(self.params, self.spec, x_norm, tape, trainable)
        D = self.out_dim
        mean = out[..., :D]
        lv = out[..., D:]
        hi = tape.param(self.params, "model.max_logvar", trainable)
        lo = tape.param(self.params, "model.min_logvar", trainable)
        lv = hi - ad.softplus(hi - lv)
        lv = lo + ad.softplus(lv - lo)
        # the two soft bounds overlap by log(1 + e^(lo - hi)); clip the remainder
        lv = ad.clip(lv, LOGVAR_MIN, LOGVAR_MAX)
        return mean, lv

    def draw_noise(self, rng, n, mode="sample"):
        """Elite member per row (uniform) and standard-normal output noise."""
        members = self.elites[rng.integers(0, len(self.elites), size=n)]
        noise = rng.standard_normal((n, self.out_dim))
        if mode == "mean":
            noise = np.zeros_like(noise)
        elif mode != "sample":
            raise ValueError(f"unknown model mode {mode!r}")
        return members, noise

    def member_forward(self, tape, x_norm, member, trainable=False):
        """One member on normalised rows (B, in) -> (mean, logvar), each (B, D)."""
        h = x_norm
        n_layers = len(self.spec.sizes) - 1
        act = ad.ACTIVATIONS[self.spec.activation]
        for i in range(n_layers):
            wn, bn = self.spec.layer_names(i)
            W = tape.param(self.params, wn, trainable)[member]
            b = tape.param(self.params, bn, trainable)[member]
            h = ad.matmul(h, W) + b
            if i < n_layers - 1:
                h = act(h)
        D = self.out_dim
        lv = h[:, D:]
        hi = tape.param(self.params, "model.max_logvar", trainable)[member]
        lo = tape.param(self.params, "model.min_logvar", trainable)[member]
        lv = hi - ad.softplus(hi - lv)
        lv = ad.clip(lo + ad.softplus(lv - lo), LOGVAR_MIN, LOGVAR_MAX)
        return h[:, :D], lv

    def predict(self, tape, s, a, members, noise, trainable=False):
        """Differentiable one-step prediction; returns (s_next, r) as Vars.

        Row b uses member ``members[b]`` only; rows are grouped by member so
        each member runs once on its own rows.
        """
        if not self.trained:
            raise StateError("dynamics model has not been trained")
        if not tape.record:
            sv = s.value if isinstance(s, ad.Var) else np.asarray(s, dtype=float)
            av = a.value if isinstance(a, ad.Var) else np.asarray(a, dtype=float)
            s2, r = self._predict_values(sv, av, np.asarray(members, dtype=int), noise)
            return tape.const(s2), tape.const(r)
        s = s if isinstance(s, ad.Var) else tape.const(s)
        a = a if isinstance(a, ad.Var) else tape.const(a)
        members = np.asarray(members, dtype=int)
        x = (ad.concat([s, a], axis=-1) - self.in_mu) * (1.0 / self.in_sd)
        groups = [(e, np.flatnonzero(members == e)) for e in np.unique(members)]
        means, stds = [], []
        for e, idx in groups:
            xe = x if len(groups) == 1 else x[idx]
            mean, lv = self.member_forward(tape, xe, int(e), trainable)
            means.append(mean)
            stds.append(ad.exp(0.5 * lv))
        if len(groups) == 1:
            mean, std = means[0], stds[0]
        else:
            ix = [g[1] for g in groups]
            mean = ad.assemble_rows(means, ix, len(members))
            std = ad.assemble_rows(stds, ix, len(members))
        z = mean + std * noise
        y = z * self.out_sd + self.out_mu
        return s + y[:, :self.obs_dim], y[:, self.obs_dim]

    def _predict_values(self, s, a, members, noise):
        """Same arithmetic as ``predict`` on plain arrays (no tape)."""
        x = (np.concatenate([s, a], axis=-1) - self.in_mu) * (1.0 / self.in_sd)
        n_layers = len(self.spec.sizes) - 1
        act = _NP_ACTIVATIONS[self.spec.activation]
        D = self.out_dim
        mean = np.zeros((len(s), D))
        std = np.zeros((len(s), D))
        for e in np.unique(members):
            idx = np.flatnonzero(members == e)
            h = x[idx]
            for i in range(n_layers):
                wn, bn = self.spec.layer_names(i)
                h = h @ self.params[wn][e] + self.params[bn][e]
                if i < n_layers - 1:
                    h = act(h)
            hi = self.params["model.max_logvar"][e]
            lo = self.params["model.min_logvar"][e]
            lv = hi - ad._softplus(hi - h[:, D:])
            lv = np.clip(lo + ad._softplus(lv - lo), LOGVAR_MIN, LOGVAR_MAX)
            mean[idx] = h[:, :D]
            std[idx] = np.exp(0.5 * lv)
        z = mean + std * noise
        y = z * self.out_sd + self.out_mu
        return s + y[:, :self.obs_dim], y[:, self.obs_dim]

    # checkpoint helpers ----------------------------------------------------------------
    def state_arrays(self):
        out = {f"model/{k}": v for k, v in self.params.items()}
        out.update({"model/in_mu": self.in_mu, "model/in_sd": self.in_sd,
                    "model/out_mu": self.out_mu, "model/out_sd": self.out_sd,
                    "model/elites": self.elites.astype(np.float64),
                    "model/trained": np.array([float(self.trained)])})
        return out

    def load_arrays(self, arrays):
        for k in self.params.names():
            self.params.assign(k, arrays[f"model/{k}"])
        self.in_mu, self.in_sd = arrays["model/in_mu"].copy(), arrays["model/in_sd"].copy()
        self.out_mu, self.out_sd = arrays["model/out_mu"].copy(), arrays["model/out_sd"].copy()
        self.elites = arrays["model/elites"].astype(int)
        self.trained = bool(arrays["model/trained"][0])


_NP_ACTIVATIONS = {
    "relu": lambda v: np.maximum(v, 0.0),
    "tanh": np.tanh,
    "swish": lambda v: v * ad._sigmoid(v),
    "softplus": ad._softplus,
    "sigmoid": ad._sigmoid,
    "identity": lambda v: v,
}


def _safe_sd(sd):
    return np.where(sd < 1e-8, 1.0, sd)


def gaussian_nll(mean, logvar, target):
    """Per-point diagonal Gaussian NLL, summed over the last axis (Vars)."""
    diff = mean - target
    return 0.5 * ad.reduce_sum(diff * diff * ad.exp(-1.0 * logvar) + logvar + _LOG_2PI, axis=-1)


def model_nll(model, batch, tape=None, inputs=None, targets=None, bound_reg=True):
    """Mean Gaussian NLL over members and rows on standardised targets.

    ``batch`` is a TransitionBatch shared by all members; alternatively pass
    per-member arrays ``inputs`` (E, B, in) and ``targets`` (E, B, D) that are
    already standardised. Adds 0.01 * (sum max_logvar - sum min_logvar).
    Returns a scalar Var.
    """
    tape = tape or ad.Tape()
    if inputs is None:
        if len(batch) == 0:
            raise ValueError("empty batch")
        x = model.normalize_in(np.concatenate([batch.s, batch.a], axis=-1))
        y = model.normalize_out(model.targets(batch))
        inputs = np.broadcast_to(x, (model.n_members,) + x.shape)
        targets = np.broadcast_to(y, (model.n_members,) + y.shape)
    mean, lv = model.forward(tape, inputs)
    loss = ad.reduce_mean(gaussian_nll(mean, lv, targets))
    if bound_reg:
        hi = tape.param(model.params, "model.max_logvar")
        lo = tape.param(model.params, "model.min_logvar")
        loss = loss + BOUND_REG * (ad.reduce_sum(hi) - ad.reduce_sum(lo)) * (1.0 / model.n_members)
    if not np.isfinite(loss.value):
        raise NumericError("model NLL is not finite")
    return loss


def _clamp_bounds(model):
    p = model.params
    p.assign("model.max_logvar", np.clip(p["model.max_logvar"], LOGVAR_MIN, LOGVAR_MAX))
    p.assign("model.min_logvar", np.clip(p["model.min_logvar"], LOGVAR_MIN, LOGVAR_MAX))


def holdout_nll(model, batch):
    """Per-member mean Gaussian NLL on ``batch`` (no regulariser)."""
    tape = ad.Tape(record=False)
    x = model.normalize_in(np.concatenate([batch.s, batch.a], axis=-1))
    y = model.normalize_out(model.targets(batch))
    mean, lv = model.forward(tape, x)
    return np.mean(gaussian_nll(mean, lv, y).value, axis=1)


@dataclass
class TrainingReport:
    holdout_nll: list = field(default_factory=list)    # per epoch, array over members
    best_epoch: np.ndarray = None
    selected_nll: np.ndarray = None
    elites: np.ndarray = None
    epochs: int = 0

    @property
    def mean_holdout(self):
        return float(np.mean(self.selected_nll[self.elites]))


def train_model(model, data, rng, holdout_fraction=0.2, max_epochs=100, batch_size=64,
                patience=5, max_holdout=5000):
    """Bootstrapped per-member training with early stopping on holdout NLL.

    Epoch 0 is the untrained (or previously trained) model, so the selected
    holdout NLL of every member is never worse than at epoch 0.
    """
    n = len(data)
    if n < 10 * batch_size:
        raise CapacityError(f"{n} transitions < 10 x batch size {batch_size}")
    perm = rng.permutation(n)
    n_hold = min(int(round(holdout_fraction * n)), max_holdout)
    hold, train = data.take(perm[:n_hold]), data.take(perm[n_hold:])
    model.fit_normalizer(train)
    model.trained = True
    E = model.n_members
    x_all = model.normalize_in(np.concatenate([train.s, train.a], axis=-1))
    y_all = model.normalize_out(model.targets(train))
    boot = rng.integers(0, len(train), size=(E, len(train)))

    report = TrainingReport()
    best = holdout_nll(model, hold)
    report.holdout_nll.append(best.copy())
    snap = {k: v.copy() for k, v in model.params.items()}
    best_epoch = np.zeros(E, dtype=int)
    stale = 0
    n_batches = max(1, len(train) // batch_size)
    for epoch in range(1, max_epochs + 1):
        order = np.stack([rng.permutation(boot[e]) for e in range(E)])
        for b in range(n_batches):
            idx = order[:, b * batch_size:(b + 1) * batch_size]
            tape = ad.Tape()
            loss = model_nll(model, None, tape, inputs=x_all[idx], targets=y_all[idx])
            grads = tape.backward(loss)
            model.optimizer.step(model.params, grads)
            _clamp_bounds(model)
        cur = holdout_nll(model, hold)
        report.holdout_nll.append(cur.copy())
        improved = cur < best - 1e-4 * np.abs(best)
        for e in np.flatnonzero(improved):
            for k, v in model.params.items():
                snap[k][e] = v[e]
            best[e] = cur[e]
            best_epoch[e] = epoch
        stale = 0 if np.any(improved) else stale + 1
        report.epochs = epoch
        if stale >= patience:
            break
    for k in model.params.names():
        model.params.assign(k, snap[k])
    report.selected_nll = best
    report.best_epoch = best_epoch
    model.elites = select_elites(best, model.n_elites)
    report.elites = model.elites.copy()
    return report


def select_elites(scores, n_elites):
    """Indices of the ``n_elites`` lowest scores, returned sorted."""
    order = np.lexsort((np.arange(len(scores)), np.asarray(scores)))
    return np.sort(order[:n_elites])


def model_step(model, s, a, rng, mode="sample"):
    """One model step for a batch of (s, a); returns (s_next, r) arrays."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    members, noise = model.draw_noise(rng, len(s), mode)
    tape = ad.Tape(record=False)
    s2, r = model.predict(tape, s, a, members, noise)
    return s2.value, r.value


class TrueDynamicsModel:
    """Test double exposing an environment's exact dynamics as a model.

    Model noise is the environment's own standard-normal noise, so a plan
    through this model is a real rollout. Predictions are constants on the
    tape (no gradient flows through the true dynamics).
    """

    trained = True

    def __init__(self, env):
        self.env = env
        self.obs_dim = env.spec.obs_dim
        self.elites = np.array([0])

    def draw_noise(self, rng, n, mode="sample"):
        noise = rng.standard_normal((n, self.env.spec.noise_dim))
        if mode == "mean":
            noise = np.zeros_like(noise)
        return np.zeros(n, dtype=int), noise

    def predict(self, tape, s, a, members, noise, trainable=False):
        sv = s.value if isinstance(s, ad.Var) else np.asarray(s, dtype=float)
        av = a.value if isinstance(a, ad.Var) else np.asarray(a, dtype=float)
        state = self.env.state_from_obs(sv)
        s2, r = self.env.dynamics(state, av, noise)
        return tape.const(self.env.observe(s2)), tape.const(np.asarray(r, dtype=float))


class NoisyModel:
    """Adds N(0, sigma^2) to the predicted state delta of a base model."""

    def __init__(self, base, sigma):
        self.base, self.sigma = base, float(sigma)
        self.obs_dim = base.obs_dim

    @property
    def trained(self):
        return self.base.trained

    @property
    def elites(self):
        return self.base.elites

    def draw_noise(self, rng, n, mode="sample"):
        members, noise = self.base.draw_noise(rng, n, mode)
        extra = rng.standard_normal((n, self.obs_dim))
        return members, np.concatenate([noise, extra], axis=-1)

    def predict(self, tape, s, a, members, noise, trainable=False):
        k = noise.shape[-1] - self.obs_dim
        s2, r = self.base.predict(tape, s, a, members, noise[:, :k], trainable)
        return s2 + self.sigma * noise[:, k:], r


@dataclass
class Segments:
    """Contiguous model rollouts: arrays shaped (n, length, ...)."""

    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray

    @property
    def done(self):
        return np.zeros(self.rew.shape, dtype=bool)

    def __len__(self):
        return len(self.obs)


def branched_rollout(model, policy, start_pool, n_starts, length, rng, mode="sample"):
    """Roll ``policy`` in the model from states drawn uniformly from ``start_pool``.

    ``start_pool`` is an array of observations or a buffer with
    ``sample_states``. ``policy(obs, rng)`` returns actions in [-1, 1]. No
    termination is predicted, so every step has done = False.
    """
    if length < 1:
        raise ValueError("rollout length must be >= 1")
    if len(start_pool) == 0:
        raise ValueError("empty start pool")
    if hasattr(start_pool, "sample_states"):
        s = start_pool.sample_states(n_starts, rng).obs
    else:
        s = np.asarray(start_pool)[rng.integers(0, len(start_pool), size=n_starts)]
    obs, act, rew, nxt = [], [], [], []
    for _ in range(length):
        a = policy(s, rng)
        s2, r = model_step(model, s, a, rng, mode)
        obs.append(s)
        act.append(a)
        rew.append(r)
        nxt.append(s2)
        s = s2
    stack = lambda xs: np.stack(xs, axis=1)  # noqa: E731
    return Segments(stack(obs), stack(act), stack(rew), stack(nxt))
