# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled tabular kernels; see _kernels_py for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def plan_path_stats(const double[:, :, ::1] P, const double[:, ::1] R, const double[:, ::1] pi,
                    const double[:, ::1] logpi, double gamma, int k):
    cdef Py_ssize_t nS = R.shape[0], nA = R.shape[1]
    cdef Py_ssize_t n_plans = nA ** k
    cdef Py_ssize_t s0, j, m, s, t, a, rem, div
    cdef double g, ws, wrs, whs, os_, ors, p, q
    W = np.zeros((nS, n_plans))
    WR = np.zeros((nS, n_plans))
    WH = np.zeros((nS, n_plans))
    WP = np.zeros((nS, n_plans, nS))
    OR = np.zeros((nS, n_plans))
    OP = np.zeros((nS, n_plans, nS))
    cdef double[:, ::1] W_ = W, WR_ = WR, WH_ = WH, OR_ = OR
    cdef double[:, :, ::1] WP_ = WP, OP_ = OP
    cdef double[::1] w = np.empty(nS), wr = np.empty(nS), wh = np.empty(nS)
    cdef double[::1] o = np.empty(nS), orr = np.empty(nS)
    cdef double[::1] nw = np.empty(nS), nwr = np.empty(nS), nwh = np.empty(nS)
    cdef double[::1] no = np.empty(nS), nor = np.empty(nS)
    with nogil:
        for s0 in range(nS):
            for j in range(n_plans):
                for s in range(nS):
                    w[s] = 0.0; wr[s] = 0.0; wh[s] = 0.0; o[s] = 0.0; orr[s] = 0.0
                w[s0] = 1.0
                o[s0] = 1.0
                div = n_plans
                g = 1.0
                for m in range(k):
                    div = div // nA
                    a = (j // div) % nA
                    for t in range(nS):
                        nw[t] = 0.0; nwr[t] = 0.0; nwh[t] = 0.0; no[t] = 0.0; nor[t] = 0.0
                    for s in range(nS):
                        ws = w[s] * pi[s, a]
                        wrs = (wr[s] + w[s] * g * R[s, a]) * pi[s, a]
                        whs = (wh[s] + w[s] * g * logpi[s, a]) * pi[s, a]
                        os_ = o[s]
                        ors = orr[s] + o[s] * g * R[s, a]
                        for t in range(nS):
                            p = P[s, a, t]
                            nw[t] += ws * p
                            nwr[t] += wrs * p
                            nwh[t] += whs * p
                            no[t] += os_ * p
                            nor[t] += ors * p
                    for t in range(nS):
                        w[t] = nw[t]; wr[t] = nwr[t]; wh[t] = nwh[t]
                        o[t] = no[t]; orr[t] = nor[t]
                    g = g * gamma
                for t in range(nS):
                    W_[s0, j] += w[t]
                    WR_[s0, j] += wr[t]
                    WH_[s0, j] += wh[t]
                    WP_[s0, j, t] = w[t]
                    OR_[s0, j] += orr[t]
                    OP_[s0, j, t] = o[t]
    return W, WR, WH, WP, OR, OP


def deterministic_search(const double[:, :, ::1] P, const double[:, ::1] R,
                         const double[::1] v_old, double gamma, int k,
                         bint constrained, double tol):
    cdef Py_ssize_t nS = R.shape[0], nA = R.shape[1]
    cdef Py_ssize_t n_pol = nA ** nS
    cdef Py_ssize_t idx, s, t, it, rem, best_idx = -1
    cdef double obj, best_obj = -INFINITY, acc
    cdef bint ok
    cdef Py_ssize_t[::1] acts = np.zeros(nS, dtype=np.intp)
    cdef double[::1] f = np.empty(nS), nf = np.empty(nS)
    with nogil:
        for idx in range(n_pol):
            rem = idx
            for s in range(nS - 1, -1, -1):
                acts[s] = rem % nA
                rem = rem // nA
            for s in range(nS):
                f[s] = v_old[s]
            for it in range(k):
                for s in range(nS):
                    acc = 0.0
                    for t in range(nS):
                        acc += P[s, acts[s], t] * f[t]
                    nf[s] = R[s, acts[s]] + gamma * acc
                for s in range(nS):
                    f[s] = nf[s]
            ok = True
            obj = 0.0
            for s in range(nS):
                obj += f[s]
                if constrained and f[s] < v_old[s] - tol:
                    ok = False
            if ok and obj > best_obj + tol:
                best_obj = obj
                best_idx = idx
    if best_idx < 0:
        return None, -np.inf
    out = np.zeros(nS, dtype=np.int64)
    rem = best_idx
    for s in range(nS - 1, -1, -1):
        out[s] = rem % nA
        rem = rem // nA
    return out, float(best_obj)
