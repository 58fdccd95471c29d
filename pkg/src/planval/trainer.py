"""Training loop for the planning learner and its ablations.

Randomness is split into independent streams spawned from the run seed, so
that changing what one component consumes (for example model training) does
not shift the draws of another (for example the policy noise).
"""
from __future__ import annotations

import csv
import io
import math
import os
import time
from dataclasses import astuple, dataclass, fields

import numpy as np

from . import checkpoint as ckpt
from .actor import Actor, Temperature, actor_update, alpha_update, make_planner
from .buffer import PlanBatch, SegmentBuffer, sample_mixed
from .config import TrainerConfig, format_config
from .critic import CriticPair, critic_update, polyak_update, td_target
from .dynamics import EnsembleDynamicsModel, branched_rollout, train_model
from .envs import make_env
from .errors import PlanvalError
from .mve import imagined_states, mve_targets
from .sac_reference import SACReference

STREAMS = ("env", "explore", "model", "rollout", "batch", "policy", "eval",
           "init_actor", "init_critic", "init_model")


@dataclass
class MetricsRow:
    env_step: int
    return_: float
    critic_loss: float
    actor_loss: float
    model_holdout_nll: float
    alpha: float
    rollout_length: int
    wall_clock: float


METRICS_HEADER = ("env_step", "return", "critic_loss", "actor_loss", "model_holdout_nll",
                  "alpha", "rollout_length", "wall_clock")


class MetricsTable:
    def __init__(self, rows=None):
        self.rows = list(rows or [])

    def __len__(self):
        return len(self.rows)

    def append(self, row):
        if self.rows and row.env_step <= self.rows[-1].env_step:
            raise ValueError("env_step must increase")
        self.rows.append(row)

    def column(self, name):
        name = "return_" if name == "return" else name
        return np.array([getattr(r, name) for r in self.rows])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in self.rows:
            w.writerow([v if isinstance(v, int) else f"{v:.17g}" for v in astuple(r)])
        return buf.getvalue()

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as fh:
            rd = csv.reader(fh)
            header = tuple(next(rd))
            if header != METRICS_HEADER:
                raise ValueError(f"unexpected metrics header {header}")
            types = [f.type for f in fields(MetricsRow)]
            rows = [MetricsRow(*(int(v) if t in (int, "int") else float(v) for v, t in zip(line, types)))
                    for line in rd]
        return cls(rows)


@dataclass
class RunResult:
    metrics: MetricsTable
    checkpoint: dict
    checkpoint_path: str | None
    counters: dict


def make_streams(seed):
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(STREAMS, children)}


def evaluate(env, policy, rng, episodes=10):
    """Mean undiscounted return of ``policy(obs)`` over parallel episodes."""
    st = env.reset(rng, episodes)
    total = np.zeros(episodes)
    while not np.any(st.done):
        st, r, _ = env.step(st, policy(st.observation), rng=rng)
        total += r
    return float(np.mean(total))


class Trainer:
    def __init__(self, cfg: TrainerConfig, out_dir=None):
        self.cfg = cfg.validate()
        self.out_dir = out_dir
        self.rng = make_streams(cfg.seed)
        self.env = make_env(cfg.env)
        sp = self.env.spec
        self.obs_dim, self.act_dim = sp.obs_dim, sp.act_dim
        v = cfg.variant
        self.plan_k = cfg.k if v in ("mppve", "sac-mppve") else 1
        self.actor = Actor(sp.obs_dim, sp.act_dim, self.rng["init_actor"], cfg.hidden, lr=cfg.lr_actor)
        self.critic = CriticPair(sp.obs_dim, sp.act_dim, self.plan_k, self.rng["init_critic"], cfg.hidden,
                                 polyak=cfg.polyak, lr=cfg.lr_critic, twin=cfg.twin)
        self.temperature = Temperature(cfg.alpha, cfg.target_entropy, cfg.lr_alpha,
                                       learnable=cfg.soft and cfg.learn_alpha)
        self.model = None
        if v != "sac":
            m = cfg.model
            self.model = EnsembleDynamicsModel(sp.obs_dim, sp.act_dim, self.rng["init_model"], m.members,
                                               m.elites, m.hidden, m.activation, lr=m.lr)
        self.sac = None
        if v == "sac":
            self.sac = SACReference.from_stores(
                self.actor.params, self.critic.params, self.critic.target,
                math.log(cfg.alpha) if cfg.soft else -math.inf, gamma=cfg.gamma, polyak=cfg.polyak,
                lr_actor=cfg.lr_actor, lr_critic=cfg.lr_critic, lr_alpha=cfg.lr_alpha,
                target_entropy=cfg.target_entropy, learn_alpha=cfg.soft and cfg.learn_alpha)
        self.env_buf = SegmentBuffer(cfg.buffer.env_capacity, sp.obs_dim, sp.act_dim, "env")
        self.model_buf = SegmentBuffer(cfg.buffer.model_capacity, sp.obs_dim, sp.act_dim, "model") \
            if v == "mppve" else None
        self.metrics = MetricsTable()
        self.timing = []
        self.t = 0
        self.model_nll = 0.0
        self.counters = {"critic_updates": 0, "actor_updates": 0, "actor_model_states": 0,
                         "actor_real_states": 0, "model_trainings": 0, "per_step_critic": set(),
                         "per_step_actor": set()}
        self._losses_c, self._losses_a = [], []
        self._episode = None
        self._state = None

    # environment interaction ----------------------------------------------------------
    def _policy_action(self, obs):
        if self.sac is not None:
            return self.sac.act(obs, self.rng["policy"])
        return self.actor.act(obs, self.rng["policy"])

    def _deterministic(self, obs):
        if self.sac is not None:
            return self.sac.act(obs, deterministic=True)
        return self.actor.act(obs, deterministic=True)

    def _env_step(self, action):
        if self._state is None or np.any(self._state.done):
            self._state = self.env.reset(self.rng["env"], 1)
            self._episode = self.env_buf.new_episode()
        st = self._state
        st2, r, _ = self.env.step(st, action, rng=self.rng["env"])
        # episodes end only by the time limit, which is not a true terminal
        self.env_buf.add(st.observation, action, r, st2.observation, False, self._episode, st.step_index)
        self._state = st2
        self.t += 1

    # learner updates --------------------------------------------------------------------
    @property
    def alpha(self):
        if not self.cfg.soft:
            return 0.0
        return self.sac.alpha if self.sac is not None else self.temperature.alpha

    def _fill(self, obs, rng):
        return self.actor.act(obs, rng)

    def _updates(self):
        cfg, v = self.cfg, self.cfg.variant
        r = self.rng
        if v == "mppve":
            L = cfg.rollout_length(self.t) + cfg.k - 1
            seg = branched_rollout(self.model, lambda o, g: self.actor.act(o, g), self.env_buf,
                                   cfg.rollouts, L, r["rollout"], cfg.model.mode)
            self.model_buf.add_rollouts(seg)
        c0, a0 = self.counters["critic_updates"], self.counters["actor_updates"]
        if v == "sac":
            self._sac_updates()
        else:
            for _ in range(cfg.critic_updates):
                if v in ("mppve", "sac-mppve"):
                    batch = sample_mixed(self.env_buf, self.model_buf, cfg.batch_size, self.plan_k,
                                         cfg.real_ratio, r["batch"], self._fill)
                    planner = make_planner(self.actor, self.model, self.plan_k, cfg.model.mode)
                    y = td_target(batch, self.critic, planner, cfg.gamma, cfg.soft, self.alpha, r["policy"])
                else:
                    real = self.env_buf.sample_windows(cfg.batch_size, 1, r["batch"], self._fill)
                    y_real, fake, y_fake = mve_targets(real, self.critic, self.actor, self.model, cfg.horizon,
                                                       cfg.gamma, r["policy"], cfg.soft, self.alpha,
                                                       cfg.model.mode)
                    batch = PlanBatch.concat([real, fake])
                    y = np.concatenate([y_real, y_fake])
                self._losses_c.append(critic_update(self.critic, batch, y))
                polyak_update(self.critic)
                self.counters["critic_updates"] += 1
            states = self.env_buf.sample_states(cfg.batch_size, r["batch"])
            if v == "sac-mve-mpi":
                states = imagined_states(self.actor, self.model, states.obs, cfg.horizon, r["rollout"],
                                         cfg.model.mode)
            loss, logp = actor_update(self.actor, states, self.critic, self.model, self.plan_k, r["policy"],
                                      cfg.soft, self.temperature, cfg.model.mode,
                                      allow_model_states=(v == "sac-mve-mpi"))
            self._losses_a.append(loss)
            self.counters["actor_updates"] += 1
            n_model = int(np.sum(np.broadcast_to(np.asarray(states.source), (len(states),)) == "model"))
            self.counters["actor_model_states"] += n_model
            self.counters["actor_real_states"] += len(states) - n_model
            if cfg.soft:
                alpha_update(self.temperature, logp, self.plan_k)
        self.counters["per_step_critic"].add(self.counters["critic_updates"] - c0)
        self.counters["per_step_actor"].add(self.counters["actor_updates"] - a0)

    def _sac_updates(self):
        cfg, r, ref = self.cfg, self.rng, self.sac
        for _ in range(cfg.critic_updates):
            b = self.env_buf.sample_windows(cfg.batch_size, 1, r["batch"], self._fill)
            self._losses_c.append(ref.critic_update(b.s0, b.actions[:, 0], b.rewards[:, 0], b.s_k,
                                                    b.terminal.astype(float), r["policy"]))
            ref.polyak_update()
            self.counters["critic_updates"] += 1
        s = self.env_buf.sample_states(cfg.batch_size, r["batch"])
        loss, logp = ref.actor_update(s.obs, r["policy"])
        self._losses_a.append(loss)
        self.counters["actor_updates"] += 1
        self.counters["actor_real_states"] += len(s)
        ref.alpha_update(logp)

    def _train_model(self):
        m = self.cfg.model
        rep = train_model(self.model, self.env_buf.transitions(), self.rng["model"], m.holdout,
                          m.max_epochs, m.batch_size, m.patience)
        self.model_nll = rep.mean_holdout
        self.counters["model_trainings"] += 1
        if self.model_buf is not None:
            self.model_buf.clear()

    def _record(self, start):
        cfg = self.cfg
        ret = evaluate(self.env, self._deterministic, self.rng["eval"], cfg.metrics.eval_episodes)
        elapsed = time.perf_counter() - start
        self.timing.append((self.t, elapsed))
        mean = lambda xs: float(np.mean(xs)) if xs else 0.0  # noqa: E731
        length = cfg.rollout_length(self.t) if cfg.variant == "mppve" else 0
        self.metrics.append(MetricsRow(self.t, ret, mean(self._losses_c), mean(self._losses_a),
                                       float(self.model_nll), float(self.alpha), length,
                                       elapsed if cfg.metrics.wall_clock else 0.0))
        self._losses_c, self._losses_a = [], []
        return ret

    # main loop --------------------------------------------------------------------------
    def run(self):
        cfg = self.cfg
        start = time.perf_counter()
        try:
            for _ in range(cfg.start_size):
                self._env_step(self.rng["explore"].uniform(-1.0, 1.0, (1, self.act_dim)))
            done = False
            for _epoch in range(cfg.epochs):
                if self.model is not None:
                    self._train_model()
                for _ in range(cfg.steps_per_epoch):
                    self._env_step(self._policy_action(self._state_obs()))
                    self._updates()
                    if self.t % cfg.metrics.eval_interval == 0:
                        ret = self._record(start)
                        if not math.isnan(cfg.stop_return) and ret >= cfg.stop_return:
                            done = True
                            break
                if done:
                    break
        except (PlanvalError, FloatingPointError) as e:
            self._dump("crash.ckpt", error=f"{type(e).__name__}: {e}")
            raise
        arrays, meta = self.checkpoint_payload()
        path = self._dump("final.ckpt")
        if self.out_dir:
            self.metrics.write(os.path.join(self.out_dir, "metrics.csv"))
            with open(os.path.join(self.out_dir, "timing.csv"), "w", encoding="utf-8") as fh:
                fh.write("env_step,seconds\n")
                fh.writelines(f"{t},{s:.6f}\n" for t, s in self.timing)
        counters = dict(self.counters)
        return RunResult(self.metrics, {"arrays": arrays, "metadata": meta}, path, counters)

    def _state_obs(self):
        if self._state is None or np.any(self._state.done):
            self._state = self.env.reset(self.rng["env"], 1)
            self._episode = self.env_buf.new_episode()
        return self._state.observation

    # checkpoints --------------------------------------------------------------------------
    def checkpoint_payload(self, **extra):
        arrays = {}
        if self.sac is not None:
            w = self.sac.weights()
            for i, (W, b) in enumerate(w["actor"]):
                arrays[f"actor/actor.w{i}"], arrays[f"actor/actor.b{i}"] = W, b
            for i, (W, b) in enumerate(w["critic"]):
                arrays[f"critic/critic.q0.w{i}"], arrays[f"critic/critic.q0.b{i}"] = W, b
            for i, (W, b) in enumerate(w["target"]):
                arrays[f"critic_target/critic.q0.w{i}"], arrays[f"critic_target/critic.q0.b{i}"] = W, b
            arrays["temperature/log_alpha"] = self.sac.log_alpha
        else:
            arrays.update(self.actor.state_arrays())
            arrays.update(self.critic.state_arrays())
            arrays.update(self.temperature.state_arrays())
            arrays.update(self.actor.optimizer.state("opt_actor"))
            arrays.update(self.critic.optimizer.state("opt_critic"))
        if self.model is not None and self.model.trained:
            arrays.update(self.model.state_arrays())
        text = format_config(self.cfg)
        meta = {"seed": self.cfg.seed, "step": self.t, "config_digest": ckpt.config_digest(text),
                "config": text, "variant": self.cfg.variant, "env": self.cfg.env}
        meta.update(extra)
        return arrays, meta

    def _dump(self, name, **extra):
        if not self.out_dir:
            return None
        os.makedirs(self.out_dir, exist_ok=True)
        arrays, meta = self.checkpoint_payload(**extra)
        path = os.path.join(self.out_dir, name)
        ckpt.save_checkpoint(path, arrays, meta)
        return path


def run_mppve(cfg, out_dir=None):
    """Full training run; returns RunResult (metrics, checkpoint, counters)."""
    return Trainer(cfg, out_dir).run()


def run_ablation(cfg, out_dir=None):
    if cfg.variant == "mppve":
        raise ValueError("run_ablation expects an ablation variant")
    return Trainer(cfg, out_dir).run()


def restore_trainer(path):
    """Rebuild a Trainer (networks, model, temperature) from a checkpoint file."""
    from .config import parse_config

    arrays, meta = ckpt.load_checkpoint(path)
    tr = Trainer(parse_config(meta["config"]))
    tr.actor.load_arrays(arrays)
    tr.critic.load_arrays(arrays)
    tr.temperature.load_arrays(arrays)
    if tr.model is not None and "model/trained" in arrays:
        tr.model.load_arrays(arrays)
    tr.t = int(meta["step"])
    return tr
