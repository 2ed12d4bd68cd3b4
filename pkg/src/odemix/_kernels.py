"""Numba kernels for the hot numerical paths.

Everything here has a pure-numpy twin in :mod:`odemix.dynamics`; these kernels
only change speed, not semantics.  All kernels are single-threaded and use
strict (non-fastmath) floating point so results are deterministic.

Shared conventions: ``breaks`` is the sorted unique-knot vector (length S+1),
piecewise coefficients are ascending in (x - breaks[s]); ``gcoefs`` holds the
per-curve coefficients of g itself with shape (C, S, 4), and ``phicoefT`` the
basis coefficients with shape (S, n_basis, ncoef).  Points outside
[breaks[0], breaks[-1]] evaluate to zero.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _gval(breaks, gcoefs, c, x):
    S = breaks.shape[0] - 1
    if x < breaks[0] or x > breaks[S]:
        return 0.0
    s = S - 1
    for j in range(S):
        if x < breaks[j + 1]:
            s = j
            break
    dx = x - breaks[s]
    return ((gcoefs[c, s, 3] * dx + gcoefs[c, s, 2]) * dx + gcoefs[c, s, 1]) * dx + gcoefs[c, s, 0]


@njit(cache=True)
def k_rk4(breaks, gcoefs, a, eth, G, step, bound):
    """Classical RK4 for X' = e^theta g(X), all curves in one sweep.

    Returns (X, bad_curve, bad_step); bad_curve is -1 unless |X| exceeded
    ``bound``, in which case integration stopped at bad_step.
    """
    C = a.shape[0]
    X = np.empty((C, G + 1))
    for c in range(C):
        X[c, 0] = a[c]
    h2 = 0.5 * step
    h6 = step / 6.0
    for k in range(G):
        for c in range(C):
            x = X[c, k]
            e = eth[c]
            k1 = e * _gval(breaks, gcoefs, c, x)
            k2 = e * _gval(breaks, gcoefs, c, x + h2 * k1)
            k3 = e * _gval(breaks, gcoefs, c, x + h2 * k2)
            k4 = e * _gval(breaks, gcoefs, c, x + step * k3)
            xn = x + h6 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            X[c, k + 1] = xn
            if not (np.abs(xn) <= bound):
                return X, c, k + 1
    return X, -1, -1


@njit(cache=True)
def k_design(breaks, coefT, pts):
    """Evaluate all basis functions at ``pts`` -> (npts, n_basis)."""
    n = pts.shape[0]
    S = breaks.shape[0] - 1
    nb = coefT.shape[1]
    ncoef = coefT.shape[2]
    out = np.zeros((n, nb))
    for i in range(n):
        x = pts[i]
        if x < breaks[0] or x > breaks[S]:
            continue
        s = S - 1
        for j in range(S):
            if x < breaks[j + 1]:
                s = j
                break
        dx = x - breaks[s]
        for m in range(nb):
            v = coefT[s, m, ncoef - 1]
            for q in range(ncoef - 2, -1, -1):
                v = v * dx + coefT[s, m, q]
            out[i, m] = v
    return out


@njit(cache=True)
def k_percurve(breaks, coefs, pts):
    """Evaluate per-curve piecewise polynomials at (C, K) points."""
    C, K = pts.shape
    S = breaks.shape[0] - 1
    ncoef = coefs.shape[2]
    out = np.zeros((C, K))
    for c in range(C):
        for i in range(K):
            x = pts[c, i]
            if x < breaks[0] or x > breaks[S]:
                continue
            s = S - 1
            for j in range(S):
                if x < breaks[j + 1]:
                    s = j
                    break
            dx = x - breaks[s]
            v = coefs[c, s, ncoef - 1]
            for q in range(ncoef - 2, -1, -1):
                v = v * dx + coefs[c, s, q]
            out[c, i] = v
    return out


@njit(cache=True)
def _phi_over_g2(breaks, phicoefT, gcoefs, c, x, out):
    S = breaks.shape[0] - 1
    nb = phicoefT.shape[1]
    if x < breaks[0] or x > breaks[S]:
        for m in range(nb):
            out[m] = 0.0
        return
    s = S - 1
    for j in range(S):
        if x < breaks[j + 1]:
            s = j
            break
    dx = x - breaks[s]
    g = ((gcoefs[c, s, 3] * dx + gcoefs[c, s, 2]) * dx + gcoefs[c, s, 1]) * dx + gcoefs[c, s, 0]
    inv = 1.0 / (g * g)
    for m in range(nb):
        v = phicoefT[s, m, 3]
        for q in range(2, -1, -1):
            v = v * dx + phicoefT[s, m, q]
        out[m] = v * inv


@njit(cache=True)
def k_simpson_cells(breaks, phicoefT, gcoefs, x, rtol, atol):
    """Per-cell integrals of phi(x)/g(x)^2 along each path (x-space Simpson).

    For every grid cell the two-panel Simpson value with Richardson correction
    is returned, together with a flag marking cells whose error estimate
    exceeds atol + rtol * max(|cell|, 1); callers refine those recursively.
    """
    C, Gp1 = x.shape
    G = Gp1 - 1
    nb = phicoefT.shape[1]
    cells = np.empty((C, G, nb))
    bad = np.zeros((C, G), dtype=np.uint8)
    f0 = np.empty(nb)
    f1 = np.empty(nb)
    fm = np.empty(nb)
    fq1 = np.empty(nb)
    fq3 = np.empty(nb)
    for c in range(C):
        _phi_over_g2(breaks, phicoefT, gcoefs, c, x[c, 0], f1)
        for k in range(G):
            for m in range(nb):
                f0[m] = f1[m]
            xa = x[c, k]
            xb = x[c, k + 1]
            xmid = 0.5 * (xa + xb)
            w = xb - xa
            _phi_over_g2(breaks, phicoefT, gcoefs, c, xmid, fm)
            _phi_over_g2(breaks, phicoefT, gcoefs, c, 0.5 * (xa + xmid), fq1)
            _phi_over_g2(breaks, phicoefT, gcoefs, c, 0.5 * (xmid + xb), fq3)
            _phi_over_g2(breaks, phicoefT, gcoefs, c, xb, f1)
            maxerr = 0.0
            maxval = 0.0
            for m in range(nb):
                s1 = (f0[m] + 4.0 * fm[m] + f1[m]) * w / 6.0
                s2 = (f0[m] + 4.0 * fq1[m] + fm[m]) * w / 12.0 + (
                    fm[m] + 4.0 * fq3[m] + f1[m]
                ) * w / 12.0
                err = (s2 - s1) / 15.0
                v = s2 + err
                cells[c, k, m] = v
                if np.abs(err) > maxerr:
                    maxerr = np.abs(err)
                if np.abs(v) > maxval:
                    maxval = np.abs(v)
            if maxerr > atol + rtol * max(maxval, 1.0):
                bad[c, k] = 1
    return cells, bad


@njit(cache=True)
def k_variational(breaks, phicoefT0, phicoefT1, gcoefs, x, xm, eth, step):
    """One-sweep RK4 integration of all variational equations.

    Returns (sens_a, sens_theta, sens_beta, c_nodes) where c(t) is the common
    linearization coefficient e^theta * g'(X(t)).
    """
    C, Gp1 = x.shape
    G = Gp1 - 1
    nb = phicoefT0.shape[1]
    S = breaks.shape[0] - 1
    sens_a = np.empty((C, Gp1))
    sens_th = np.empty((C, Gp1))
    sens_b = np.empty((C, Gp1, nb))
    c_nodes = np.empty((C, Gp1))
    h2 = 0.5 * step
    h6 = step / 6.0
    phi0 = np.empty(nb)
    phi1 = np.empty(nb)
    phim = np.empty(nb)

    for c in range(C):
        e = eth[c]
        sens_a[c, 0] = 1.0
        sens_th[c, 0] = 0.0
        for m in range(nb):
            sens_b[c, 0, m] = 0.0
        # node quantities at k = 0
        g0 = _gval(breaks, gcoefs, c, x[c, 0])
        c0 = e * _poly1(breaks, gcoefs, c, x[c, 0])
        c_nodes[c, 0] = c0
        _phi_at(breaks, phicoefT0, x[c, 0], phi0)
        for k in range(G):
            xb = x[c, k + 1]
            g1 = _gval(breaks, gcoefs, c, xb)
            c1 = e * _poly1(breaks, gcoefs, c, xb)
            c_nodes[c, k + 1] = c1
            _phi_at(breaks, phicoefT0, xb, phi1)
            xmided = xm[c, k]
            gm = _gval(breaks, gcoefs, c, xmided)
            cm = e * _poly1(breaks, gcoefs, c, xmided)
            _phi_at(breaks, phicoefT0, xmided, phim)
            # propagator shared by all sensitivities
            A1 = c0
            A2 = cm * (1.0 + h2 * A1)
            A3 = cm * (1.0 + h2 * A2)
            A4 = c1 * (1.0 + step * A3)
            A = 1.0 + h6 * (A1 + 2.0 * A2 + 2.0 * A3 + A4)
            # theta forcing d = e^theta g(X)
            d0 = e * g0
            dm = e * gm
            d1 = e * g1
            b1 = d0
            b2 = dm + cm * h2 * b1
            b3 = dm + cm * h2 * b2
            b4 = d1 + c1 * step * b3
            bth = h6 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
            sens_a[c, k + 1] = A * sens_a[c, k]
            sens_th[c, k + 1] = A * sens_th[c, k] + bth
            for m in range(nb):
                d0m = e * phi0[m]
                dmm = e * phim[m]
                d1m = e * phi1[m]
                b1m = d0m
                b2m = dmm + cm * h2 * b1m
                b3m = dmm + cm * h2 * b2m
                b4m = d1m + c1 * step * b3m
                sens_b[c, k + 1, m] = A * sens_b[c, k, m] + h6 * (
                    b1m + 2.0 * b2m + 2.0 * b3m + b4m
                )
            g0 = g1
            c0 = c1
            for m in range(nb):
                phi0[m] = phi1[m]
    return sens_a, sens_th, sens_b, c_nodes


@njit(cache=True)
def _poly1(breaks, gcoefs, c, x):
    """Derivative g'(x) from the cubic coefficients of g."""
    S = breaks.shape[0] - 1
    if x < breaks[0] or x > breaks[S]:
        return 0.0
    s = S - 1
    for j in range(S):
        if x < breaks[j + 1]:
            s = j
            break
    dx = x - breaks[s]
    return (3.0 * gcoefs[c, s, 3] * dx + 2.0 * gcoefs[c, s, 2]) * dx + gcoefs[c, s, 1]


@njit(cache=True)
def _phi_at(breaks, phicoefT, x, out):
    S = breaks.shape[0] - 1
    nb = phicoefT.shape[1]
    if x < breaks[0] or x > breaks[S]:
        for m in range(nb):
            out[m] = 0.0
        return
    s = S - 1
    for j in range(S):
        if x < breaks[j + 1]:
            s = j
            break
    dx = x - breaks[s]
    for m in range(nb):
        v = phicoefT[s, m, 3]
        for q in range(2, -1, -1):
            v = v * dx + phicoefT[s, m, q]
        out[m] = v
