"""Pure numpy versions of the tabular kernels.

Used when the compiled extension is not importable. Both versions share the
same signatures and return layouts; plans are indexed lexicographically with
the first action most significant (the order of ``itertools.product``).
"""
import numpy as np


def plan_path_stats(P, R, pi, logpi, gamma, k):
    """Forward path enumeration over all k-action plans.

    Returns (W, WR, WH, WP, OR, OP):
      W[s, j]      joint probability that pi draws plan j from s
      WR[s, j]     W-weighted discounted k-step reward
      WH[s, j]     W-weighted discounted sum of log pi along the plan
      WP[s, j, t]  W-weighted probability of ending in t
      OR, OP       the same reward / end-state statistics with the plan
                   executed blind (no policy weighting)
    """
    nS, nA = R.shape
    w = np.eye(nS)[:, None, :]            # (s0, prefix, s_m)
    wr = np.zeros_like(w)
    wh = np.zeros_like(w)
    o = w.copy()
    orr = np.zeros_like(w)
    for m in range(k):
        g = gamma ** m
        # weight of taking a at s_m, then landing in t
        step_w = pi[:, :, None] * P                    # (s, a, t)
        nw = np.einsum('ips,sat->ipat', w, step_w)
        nwr = np.einsum('ips,sat->ipat', wr, step_w) \
            + np.einsum('ips,sa,sat->ipat', w, g * R, step_w)
        nwh = np.einsum('ips,sat->ipat', wh, step_w) \
            + np.einsum('ips,sa,sat->ipat', w, g * logpi, step_w)
        no = np.einsum('ips,sat->ipat', o, P)
        nor = np.einsum('ips,sat->ipat', orr, P) \
            + np.einsum('ips,sa,sat->ipat', o, g * R, P)
        n_pre = w.shape[1] * nA
        w, wr, wh = (x.reshape(nS, n_pre, nS) for x in (nw, nwr, nwh))
        o, orr = no.reshape(nS, n_pre, nS), nor.reshape(nS, n_pre, nS)
    return (w.sum(-1), wr.sum(-1), wh.sum(-1), np.ascontiguousarray(w),
            orr.sum(-1), np.ascontiguousarray(o))


def deterministic_search(P, R, v_old, gamma, k, constrained, tol):
    """Best deterministic policy for sum_s (T_pi^k v_old)(s).

    Candidates are enumerated lexicographically (state 0 most significant).
    With ``constrained`` a candidate must satisfy T_pi^k v_old >= v_old - tol
    in every state. Returns (policy index vector, objective) or (None, -inf)
    when nothing is feasible.
    """
    nS, nA = R.shape
    n_pol = nA ** nS
    best_obj, best_idx = -np.inf, -1
    chunk = 1 << 15
    radix = nA ** np.arange(nS - 1, -1, -1)
    rows = np.arange(nS)
    for lo in range(0, n_pol, chunk):
        ids = np.arange(lo, min(lo + chunk, n_pol))
        acts = (ids[:, None] // radix[None, :]) % nA         # (n, nS)
        Ppi = P[rows[None, :], acts]                          # (n, nS, nS)
        Rpi = R[rows[None, :], acts]
        f = np.broadcast_to(v_old, Rpi.shape)
        for _ in range(k):
            f = Rpi + gamma * np.einsum('nst,nt->ns', Ppi, f)
        obj = f.sum(1)
        if constrained:
            ok = np.all(f >= v_old[None, :] - tol, axis=1)
            obj = np.where(ok, obj, -np.inf)
        # strict improvement keeps the earliest candidate on ties
        for i in np.flatnonzero(obj > best_obj + tol):
            if obj[i] > best_obj + tol:
                best_obj, best_idx = obj[i], ids[i]
    if best_idx < 0:
        return None, -np.inf
    acts = (best_idx // radix) % nA
    return acts.astype(np.int64), float(best_obj)
