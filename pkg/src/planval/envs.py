"""Built-in environments with state injection and explicit noise.

All environments are batched: internal states, actions and noise carry a
leading batch axis. Policies act in [-1, 1]^d; ``EnvSpec.scale_action`` maps
that box onto the environment's torque/action bounds. Randomness never comes
from a hidden global generator: callers pass standard-normal noise arrays (or
a ``numpy.random.Generator`` to draw them from).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import StateError
from .tabular import TabularMDP


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    act_dim: int
    action_low: float
    action_high: float
    horizon: int
    reward_low: float
    reward_high: float
    noise_dim: int = 0

    def __post_init__(self):
        if self.horizon < 1 or self.action_low >= self.action_high:
            raise ValueError("inconsistent EnvSpec")
        if self.reward_low > self.reward_high:
            raise ValueError("reward bounds reversed")

    def scale_action(self, a):
        """Map a policy action in [-1, 1] onto [action_low, action_high]."""
        a = np.clip(a, -1.0, 1.0)
        return self.action_low + 0.5 * (a + 1.0) * (self.action_high - self.action_low)


@dataclass
class EnvState:
    """Batch of environment states plus bookkeeping."""

    state: np.ndarray
    observation: np.ndarray
    done: np.ndarray
    step_index: int = 0


class Env:
    """Common driver; subclasses define ``spec`` and the batched dynamics."""

    spec: EnvSpec
    name = "env"

    def initial_states(self, rng, n):
        raise NotImplementedError

    def observe(self, state):
        raise NotImplementedError

    def state_from_obs(self, obs):
        raise NotImplementedError

    def dynamics(self, state, action, noise):
        """One step from raw (policy-space) actions; returns (next_state, reward)."""
        raise NotImplementedError

    def draw_noise(self, rng, n):
        return rng.standard_normal((n, self.spec.noise_dim))

    def reset(self, rng, n=1):
        s = self.initial_states(rng, n)
        return EnvState(s, self.observe(s), np.zeros(n, dtype=bool), 0)

    def step(self, env_state, action, noise=None, rng=None):
        """Advance a batch; all members share the step counter."""
        if np.any(env_state.done):
            raise StateError("cannot step a finished episode")
        action = np.asarray(action, dtype=float).reshape(len(env_state.state), -1)
        if noise is None:
            noise = self.draw_noise(rng, len(action)) if rng is not None \
                else np.zeros((len(action), self.spec.noise_dim))
        s2, r = self.dynamics(env_state.state, action, noise)
        t = env_state.step_index + 1
        done = np.full(len(s2), t >= self.spec.horizon)
        return EnvState(s2, self.observe(s2), done, t), r, done


# -- pendulum --------------------------------------------------------------------

PENDULUM_G = 10.0
PENDULUM_M = 1.0
PENDULUM_L = 1.0
PENDULUM_DT = 0.05
PENDULUM_MAX_SPEED = 8.0
PENDULUM_MAX_TORQUE = 2.0


def wrap_angle(x):
    """Wrap into (-pi, pi]."""
    y = np.mod(x + np.pi, 2.0 * np.pi) - np.pi
    return np.where(y == -np.pi, np.pi, y)


def pendulum_step(state, torque, step_index=0, horizon=200):
    """Swing-up pendulum, semi-implicit Euler. angle 0 is upright.

    ``state`` is (..., 2) holding (angle, angular velocity). Returns
    (next_state, reward, done).
    """
    state = np.asarray(state, dtype=float)
    th, om = state[..., 0], state[..., 1]
    u = np.clip(np.asarray(torque, dtype=float), -PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE)
    reward = -(wrap_angle(th) ** 2 + 0.1 * om ** 2 + 0.001 * u ** 2)
    g, m, l, dt = PENDULUM_G, PENDULUM_M, PENDULUM_L, PENDULUM_DT
    om2 = om + dt * (3.0 * g / (2.0 * l) * np.sin(th) + 3.0 / (m * l * l) * u)
    om2 = np.clip(om2, -PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED)
    th2 = th + dt * om2
    return np.stack([th2, om2], axis=-1), reward, step_index + 1 >= horizon


class Pendulum(Env):
    name = "pendulum"
    spec = EnvSpec(obs_dim=3, act_dim=1, action_low=-PENDULUM_MAX_TORQUE,
                   action_high=PENDULUM_MAX_TORQUE, horizon=200,
                   reward_low=-(np.pi ** 2 + 0.1 * PENDULUM_MAX_SPEED ** 2
                                + 0.001 * PENDULUM_MAX_TORQUE ** 2),
                   reward_high=0.0)

    def initial_states(self, rng, n):
        th = rng.uniform(-np.pi, np.pi, n)
        om = rng.uniform(-1.0, 1.0, n)
        return np.stack([th, om], axis=-1)

    def observe(self, state):
        state = np.asarray(state, dtype=float)
        return np.stack([np.cos(state[..., 0]), np.sin(state[..., 0]), state[..., 1]], axis=-1)

    def state_from_obs(self, obs):
        obs = np.asarray(obs, dtype=float)
        return np.stack([np.arctan2(obs[..., 1], obs[..., 0]), obs[..., 2]], axis=-1)

    def dynamics(self, state, action, noise):
        u = self.spec.scale_action(action[..., 0])
        s2, r, _ = pendulum_step(state, u)
        return s2, r


# -- linear-Gaussian chain -----------------------------------------------------------

LINCHAIN_A = 0.9
LINCHAIN_B = 0.5
LINCHAIN_SIGMA = 0.05


def linchain_step(state, action, noise, step_index=0, horizon=50):
    """s' = 0.9 s + 0.5 a + 0.05 noise, r = -s^2 - 0.1 a^2 (|a| <= 1)."""
    s = np.asarray(state, dtype=float)
    a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
    s2 = LINCHAIN_A * s + LINCHAIN_B * a + LINCHAIN_SIGMA * np.asarray(noise, dtype=float)
    return s2, -s ** 2 - 0.1 * a ** 2, step_index + 1 >= horizon


class LinChain(Env):
    name = "linchain"
    spec = EnvSpec(obs_dim=1, act_dim=1, action_low=-1.0, action_high=1.0, horizon=50,
                   reward_low=-np.inf, reward_high=0.0, noise_dim=1)

    def initial_states(self, rng, n):
        return rng.uniform(-1.0, 1.0, (n, 1))

    def observe(self, state):
        return np.array(state, dtype=float)

    def state_from_obs(self, obs):
        return np.array(obs, dtype=float)

    def dynamics(self, state, action, noise):
        s2, r, _ = linchain_step(state[..., 0], action[..., 0], noise[..., 0])
        return s2[..., None], r


# -- tabular MDPs ----------------------------------------------------------------------


def random_mdp(seed, n_states, n_actions, reward_sparsity=0.0, gamma=0.9):
    """Random finite MDP, deterministic per seed.

    Transition rows are normalised exponential samples (a flat Dirichlet);
    rewards are uniform on [0, 1] with a ``reward_sparsity`` fraction zeroed.
    """
    if not (1 <= n_states <= 64 and 1 <= n_actions <= 8):
        raise ValueError("random_mdp supports n_states <= 64 and n_actions <= 8")
    if not 0.0 <= reward_sparsity <= 1.0:
        raise ValueError("reward_sparsity must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    P = rng.exponential(1.0, (n_states, n_actions, n_states)) + 1e-12
    P /= P.sum(-1, keepdims=True)
    R = rng.uniform(0.0, 1.0, (n_states, n_actions))
    R[rng.uniform(size=R.shape) < reward_sparsity] = 0.0
    return TabularMDP(P, R, gamma)


def m2_mdp(gamma=0.9):
    """Two states; action 0 stays, action 1 toggles; reward 1 in state 1."""
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = P[1, 0, 1] = 1.0
    P[0, 1, 1] = P[1, 1, 0] = 1.0
    R = np.array([[0.0, 0.0], [1.0, 1.0]])
    return TabularMDP(P, R, gamma)


def action_bins(a, n_actions):
    """Discretise policy actions in [-1, 1] into ``n_actions`` equal bins."""
    a = np.asarray(a, dtype=float)
    idx = np.floor((np.clip(a, -1.0, 1.0) + 1.0) * 0.5 * n_actions).astype(int)
    return np.minimum(idx, n_actions - 1)


def bin_centers(n_actions):
    return -1.0 + (2.0 * np.arange(n_actions) + 1.0) / n_actions


class TabularEnv(Env):
    """A finite MDP seen through one-hot observations and a 1-D action.

    The continuous action is binned into the MDP's actions; the next state is
    drawn by inverse-CDF from the standard-normal noise mapped to (0, 1).
    """

    name = "tabular"

    def __init__(self, mdp: TabularMDP, horizon=50, start_probs=None):
        self.mdp = mdp
        nS = mdp.n_states
        self.start_probs = np.full(nS, 1.0 / nS) if start_probs is None \
            else np.asarray(start_probs, dtype=float)
        r = mdp.reward
        self.spec = EnvSpec(obs_dim=nS, act_dim=1, action_low=-1.0, action_high=1.0,
                            horizon=horizon, reward_low=float(r.min()),
                            reward_high=float(r.max()), noise_dim=1)
        self._cdf = np.cumsum(mdp.transition, axis=-1)

    def initial_states(self, rng, n):
        return rng.choice(self.mdp.n_states, size=n, p=self.start_probs)

    def observe(self, state):
        return np.eye(self.mdp.n_states)[np.asarray(state, dtype=int)]

    def state_from_obs(self, obs):
        return np.argmax(np.asarray(obs), axis=-1)

    def sample_next(self, s, a_idx, noise):
        u = ndtr(np.asarray(noise, dtype=float))
        cdf = self._cdf[s, a_idx]
        nxt = (cdf < u[..., None]).sum(-1)
        return np.minimum(nxt, self.mdp.n_states - 1)

    def dynamics(self, state, action, noise):
        s = np.asarray(state, dtype=int)
        a = action_bins(action[..., 0], self.mdp.n_actions)
        return self.sample_next(s, a, noise[..., 0]), self.mdp.reward[s, a]


def make_env(selector: str) -> Env:
    """Environment from a selector: pendulum, linchain, random-mdp:<seed>:<nS>:<nA>."""
    if selector == "pendulum":
        return Pendulum()
    if selector == "linchain":
        return LinChain()
    if selector.startswith("random-mdp:"):
        parts = selector.split(":")
        if len(parts) != 4:
            raise ValueError("expected random-mdp:<seed>:<nS>:<nA>")
        seed, nS, nA = (int(p) for p in parts[1:])
        return TabularEnv(random_mdp(seed, nS, nA))
    raise ValueError(f"unknown environment selector {selector!r}")


def oracle_rollout(env, start, actions, noise=None):
    """Ground-truth rollout from an injected state.

    ``start`` is a single observation or an EnvState with batch size 1;
    ``actions`` is a (k, act_dim) sequence in policy space. Returns
    (observations including the start, rewards).
    """
    if isinstance(start, EnvState):
        if np.any(start.done):
            raise StateError("cannot inject a terminated episode")
        s = np.asarray(start.state)[:1]
        obs0 = np.asarray(start.observation)[0]
    else:
        obs0 = np.asarray(start, dtype=float)
        s = env.state_from_obs(obs0[None])
    actions = np.asarray(actions, dtype=float).reshape(-1, env.spec.act_dim)
    if noise is None:
        noise = np.zeros((len(actions), env.spec.noise_dim))
    obs, rews = [obs0.copy()], []
    for m, a in enumerate(actions):
        s, r = env.dynamics(s, a[None], np.asarray(noise[m], dtype=float).reshape(1, -1))
        obs.append(env.observe(s)[0])
        rews.append(float(r[0]))
    return tuple(obs), tuple(rews)
