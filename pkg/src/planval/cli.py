"""Command line entry point: train, ppi, grad-study, bias-study."""
from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .errors import ConfigError, NumericError, PlanvalError

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="planval")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training job from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--variant")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (default runs/<variant>-seed<seed>)")

    q = sub.add_parser("ppi", help="planning policy iteration on a tabular MDP")
    q.add_argument("--mdp", required=True, help="MDP file or random-mdp:<seed>:<nS>:<nA> or m2")
    q.add_argument("--k", type=int, required=True)
    q.add_argument("--soft", action="store_true")
    q.add_argument("--alpha", type=float, default=0.1)
    q.add_argument("--out")

    g = sub.add_parser("grad-study", help="gradient direction under injected model error")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--k", type=int, required=True)
    g.add_argument("--inject", type=float, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--states", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--transitions", type=int, default=20_000, help="on-policy data for the study critics")
    g.add_argument("--critic-updates", type=int, default=4000)
    g.add_argument("--residual-threshold", type=float, default=0.2)

    b = sub.add_parser("bias-study", help="normalised plan-value bias against Monte-Carlo returns")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--k", type=int, required=True)
    b.add_argument("--mc", type=int, required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--states", type=int, default=100)
    b.add_argument("--seed", type=int, default=0)
    return p


def _train(args):
    from .config import load_config
    from .trainer import run_mppve

    cfg = load_config(args.config)
    if args.variant:
        cfg.variant = args.variant
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    out = args.out or os.path.join("runs", f"{cfg.variant}-seed{cfg.seed}")
    res = run_mppve(cfg, out)
    print(os.path.join(out, "metrics.csv"))
    if len(res.metrics):
        print(f"final return {res.metrics.rows[-1].return_:.3f} at step {res.metrics.rows[-1].env_step}")


def _load_mdp(spec):
    from .envs import m2_mdp, make_env
    from .tabular import load_mdp

    if spec == "m2":
        return m2_mdp()
    if spec.startswith("random-mdp:"):
        return make_env(spec).mdp
    if not os.path.exists(spec):
        raise ConfigError(f"no MDP file {spec!r}")
    return load_mdp(spec)


def _ppi(args):
    from .tabular import planning_policy_iteration, state_values

    mdp = _load_mdp(args.mdp)
    pol, q, trace = planning_policy_iteration(mdp, args.k, soft=args.soft, alpha=args.alpha)
    v = state_values(mdp, pol, q, soft=args.soft, alpha=args.alpha)
    header = ["state"] + [f"p_action{a}" for a in range(mdp.n_actions)] + ["value"]
    rows = [[s] + [f"{p:.17g}" for p in pol.probs[s]] + [f"{v[s]:.17g}"] for s in range(mdp.n_states)]
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if args.out:
            fh.close()
    print(f"iterations {trace.iterations}", file=sys.stderr)


def _grad_study(args):
    from .analysis import (collect_on_policy, dominance_test, fit_study_critics,
                           gradient_direction_study, write_grad_records)
    from .dynamics import NoisyModel
    from .trainer import restore_trainer

    tr = restore_trainer(args.checkpoint)
    if tr.model is None or not tr.model.trained:
        raise ConfigError("checkpoint has no trained dynamics model")
    rng = np.random.default_rng(args.seed)
    plan_c, step_c, res = fit_study_critics(tr.env, tr.actor, args.k, rng, tr.cfg.gamma,
                                            args.transitions, args.critic_updates)
    states = collect_on_policy(tr.env, tr.actor, args.states, rng)
    model = NoisyModel(tr.model, args.inject)
    recs = gradient_direction_study(tr.env, model, tr.actor, plan_c, step_c, states, args.k, rng, res,
                                    args.residual_threshold)
    write_grad_records(args.out, recs)
    diff, p = dominance_test(recs)
    print(f"mean ncs mppve {np.mean([r.ncs_mppve for r in recs]):.4f} "
          f"mbpo {np.mean([r.ncs_mbpo for r in recs]):.4f} diff {diff:.4f} p {p:.3g}")


def _bias_study(args):
    from .analysis import value_bias_study, write_bias_report
    from .trainer import restore_trainer

    tr = restore_trainer(args.checkpoint)
    if tr.critic.k != args.k:
        raise ConfigError(f"checkpoint critic has plan length {tr.critic.k}, not {args.k}")
    rng = np.random.default_rng(args.seed)
    rep = value_bias_study(tr.env, tr.actor, tr.critic, args.k, args.mc, tr.cfg.gamma, rng, args.states)
    write_bias_report(args.out, rep)
    print(f"mean normalized bias {rep.mean_bias:.4f} (se {rep.mean_se:.4f}) std {rep.std_bias:.4f}")


def main(argv=None):
    args = _parser().parse_args(argv)
    handler = {"train": _train, "ppi": _ppi, "grad-study": _grad_study, "bias-study": _bias_study}
    try:
        handler[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PlanvalError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
