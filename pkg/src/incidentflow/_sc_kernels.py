"""Compiled kernels for synthetic-control fitting.

The inner problem ``min_w |sqrt(v) * (w @ A - a)|`` over the probability
simplex is the minimum-norm point of the convex hull of the shifted, scaled
donor rows, solved exactly with Wolfe's active-set algorithm. The outer
search over ``v`` is a Nelder-Mead loop in log space kept inside the same
compiled code so a placebo run costs no interpreter round-trips.
"""

import numpy as np
from numba import njit

_EPS = 1e-12


@njit(cache=True, nogil=True, inline="always")
def _dot(x, y):
    s = 0.0
    for i in range(x.shape[0]):
        s += x[i] * y[i]
    return s


@njit(cache=True, nogil=True)
def _affine_min(P, S, m, alpha, U, R, ok, u):
    # barycentric coordinates of the min-norm point of aff(P[S[:m]]): least
    # squares min |P0 + D^T beta| by modified Gram-Schmidt on the rows of
    # D = P[S[1:m]] - P0; dependent rows get a zero coefficient
    if m == 1:
        alpha[0] = 1.0
        return
    d = P.shape[1]
    p0 = P[S[0]]
    k = m - 1
    for i in range(k):
        R[i, :] = 0.0
    for i in range(k):
        pi = P[S[i + 1]]
        base = 0.0
        for c in range(d):
            u[c] = pi[c] - p0[c]
            base += u[c] * u[c]
        base = np.sqrt(base)
        for _pass in range(2):
            for j in range(i):
                if ok[j]:
                    cj = _dot(U[j], u)
                    R[j, i] += cj
                    for c in range(d):
                        u[c] -= cj * U[j, c]
        nrm = np.sqrt(_dot(u, u))
        if nrm > 1e-10 * max(base, 1e-300):
            for c in range(d):
                U[i, c] = u[c] / nrm
            R[i, i] = nrm
            ok[i] = True
        else:
            U[i, :] = 0.0
            ok[i] = False
    total = 0.0
    for i in range(k - 1, -1, -1):
        b = 0.0
        if ok[i]:
            b = -_dot(U[i], p0)
            for j in range(i + 1, k):
                b -= R[i, j] * alpha[j + 1]
            b /= R[i, i]
        alpha[i + 1] = b
        total += b
    alpha[0] = 1.0 - total


@njit(cache=True, nogil=True)
def min_norm_weights(P, max_iter, tol):
    """Simplex weights of the minimum-norm point of ``conv(P)``.

    Returns ``(weights, squared_norm, iterations)``.
    """
    n, d = P.shape
    cap = d + 2
    S = np.empty(cap, np.int64)
    lam = np.zeros(cap)
    alpha = np.zeros(cap)
    U = np.empty((cap, d))
    R = np.zeros((cap, cap))
    ok = np.zeros(cap, np.bool_)
    u = np.empty(d)
    x = np.empty(d)
    j0 = 0
    best0 = np.inf
    scale = 1e-300
    for i in range(n):
        nn = _dot(P[i], P[i])
        if nn < best0:
            best0 = nn
            j0 = i
        if nn > scale:
            scale = nn
    S[0] = j0
    lam[0] = 1.0
    m = 1
    x[:] = P[j0]
    it = 0
    while it < max_iter:
        it += 1
        xx = _dot(x, x)
        best = np.inf
        j = -1
        for i in range(n):
            val = _dot(P[i], x)
            if val < best:
                best = val
                j = i
        if xx - best <= tol * scale:
            break
        present = False
        for k in range(m):
            if S[k] == j:
                present = True
        if present or m == cap:
            break
        S[m] = j
        lam[m] = 0.0
        m += 1
        for _minor in range(cap + 1):
            _affine_min(P, S, m, alpha, U, R, ok, u)
            amin = np.inf
            for k in range(m):
                if alpha[k] < amin:
                    amin = alpha[k]
            if amin > _EPS:
                for k in range(m):
                    lam[k] = alpha[k]
                break
            theta = 1.0
            for k in range(m):
                if alpha[k] <= _EPS and lam[k] - alpha[k] > 0.0:
                    t = lam[k] / (lam[k] - alpha[k])
                    if t < theta:
                        theta = t
            for k in range(m):
                lam[k] = theta * alpha[k] + (1.0 - theta) * lam[k]
            # drop vanished coordinates, at least the smallest one
            kmin = 0
            for k in range(1, m):
                if lam[k] < lam[kmin]:
                    kmin = k
            keep = 0
            for k in range(m):
                if k != kmin and lam[k] > _EPS:
                    S[keep] = S[k]
                    lam[keep] = lam[k]
                    keep += 1
            m = keep
            total = 0.0
            for k in range(m):
                total += lam[k]
            for k in range(m):
                lam[k] /= total
            if m == 1:
                break
        x[:] = 0.0
        for k in range(m):
            pk = P[S[k]]
            for c in range(d):
                x[c] += lam[k] * pk[c]
        if _dot(x, x) >= xx:
            break
    w = np.zeros(n)
    for k in range(m):
        w[S[k]] += max(lam[k], 0.0)
    w /= w.sum()
    q = 0.0
    for c in range(d):
        r = 0.0
        for i in range(n):
            r += w[i] * P[i, c]
        q += r * r
    return w, q, it


@njit(cache=True, nogil=True)
def _v_from_logits(z, d):
    # v = d * softmax([0, z]) so that sum(v) == d; logits more than 30 below
    # the largest are floored there so every v stays strictly positive
    full = np.zeros(d)
    full[1:] = z
    full -= full.max()
    e = np.exp(np.maximum(full, -30.0))
    return d * e / e.sum()


@njit(cache=True, nogil=True)
def _outer(z, A, a, X, X0, max_iter, tol):
    d = A.shape[1]
    v = _v_from_logits(z, d)
    n = A.shape[0]
    P = np.empty((n, d))
    for c in range(d):
        sv = np.sqrt(v[c])
        for i in range(n):
            P[i, c] = (A[i, c] - a[c]) * sv
    w, q, _ = min_norm_weights(P, max_iter, tol)
    err = 0.0
    for t in range(X.shape[0]):
        r = -X0[t]
        for i in range(n):
            r += X[t, i] * w[i]
        err += r * r
    return np.sqrt(err), w, q


@njit(cache=True, nogil=True)
def _nelder_mead(z0, A, a, X, X0, max_iter, tol, step, maxfev, xatol, fatol):
    k = z0.shape[0]
    sim = np.empty((k + 1, k))
    fs = np.empty(k + 1)
    sim[0] = z0
    for i in range(k):
        sim[i + 1] = z0
        sim[i + 1, i] += step
    for i in range(k + 1):
        fs[i] = _outer(sim[i], A, a, X, X0, max_iter, tol)[0]
    nfev = k + 1
    while nfev < maxfev:
        order = np.argsort(fs, kind="mergesort")
        sim = sim[order]
        fs = fs[order]
        spread = 0.0
        for i in range(1, k + 1):
            for j in range(k):
                spread = max(spread, abs(sim[i, j] - sim[0, j]))
        if spread <= xatol and (fs[k] - fs[0]) <= fatol:
            break
        centroid = sim[:k].sum(axis=0) / k
        xr = centroid + (centroid - sim[k])
        fr = _outer(xr, A, a, X, X0, max_iter, tol)[0]
        nfev += 1
        if fr < fs[0]:
            xe = centroid + 2.0 * (centroid - sim[k])
            fe = _outer(xe, A, a, X, X0, max_iter, tol)[0]
            nfev += 1
            if fe < fr:
                sim[k] = xe
                fs[k] = fe
            else:
                sim[k] = xr
                fs[k] = fr
        elif fr < fs[k - 1]:
            sim[k] = xr
            fs[k] = fr
        else:
            if fr < fs[k]:
                xc = centroid + 0.5 * (xr - centroid)
                fc = _outer(xc, A, a, X, X0, max_iter, tol)[0]
                nfev += 1
                accept = fc <= fr
            else:
                xc = centroid + 0.5 * (sim[k] - centroid)
                fc = _outer(xc, A, a, X, X0, max_iter, tol)[0]
                nfev += 1
                accept = fc < fs[k]
            if accept:
                sim[k] = xc
                fs[k] = fc
            else:
                for i in range(1, k + 1):
                    sim[i] = sim[0] + 0.5 * (sim[i] - sim[0])
                    fs[i] = _outer(sim[i], A, a, X, X0, max_iter, tol)[0]
                    nfev += 1
    best = int(np.argmin(fs))
    return sim[best].copy(), fs[best]


@njit(cache=True, nogil=True)
def optimize_logits(starts, A, a, X, X0, max_iter, tol, step, maxfev, xatol, fatol):
    """Best ``z`` over Nelder-Mead runs from each row of ``starts``.

    Each start is evaluated before its run, so the result is never worse
    than any starting point. Ties keep the earliest start.
    """
    best_z = starts[0].copy()
    best_f = _outer(best_z, A, a, X, X0, max_iter, tol)[0]
    for s in range(starts.shape[0]):
        f0 = _outer(starts[s], A, a, X, X0, max_iter, tol)[0]
        if f0 < best_f:
            best_f = f0
            best_z = starts[s].copy()
        if starts.shape[1] == 0:
            continue
        z, f = _nelder_mead(starts[s], A, a, X, X0, max_iter, tol, step, maxfev, xatol, fatol)
        if f < best_f:
            best_f = f
            best_z = z
    return best_z, best_f
