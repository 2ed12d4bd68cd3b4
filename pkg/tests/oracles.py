"""Independent reference implementations used only by the tests.

These deliberately avoid the package's evaluation paths: the B-spline oracle
is the textbook Cox-de Boor recursion, integrals are brute-force Riemann or
trapezoid sums, and objective/information-matrix oracles are plain Python
loops over (subject, curve, measurement).
"""

import numpy as np


def cox_de_boor(t, j, k, x, right_closed_end=None):
    """Value of the normalized B-spline B_{j,k} on knot vector t at scalar x.

    Intervals are half-open [t_i, t_{i+1}) except that x equal to the largest
    knot is assigned to the last nonempty interval.
    """
    if right_closed_end is None:
        right_closed_end = t[-1]
    if k == 0:
        if t[j] <= x < t[j + 1]:
            return 1.0
        if x == right_closed_end and t[j] < t[j + 1] and t[j + 1] == right_closed_end:
            return 1.0
        return 0.0
    out = 0.0
    d1 = t[j + k] - t[j]
    if d1 > 0:
        out += (x - t[j]) / d1 * cox_de_boor(t, j, k - 1, x, right_closed_end)
    d2 = t[j + k + 1] - t[j + 1]
    if d2 > 0:
        out += (t[j + k + 1] - x) / d2 * cox_de_boor(t, j + 1, k - 1, x, right_closed_end)
    return out


def cox_de_boor_deriv(t, j, k, x, order=1, right_closed_end=None):
    """Derivative of B_{j,k} via the standard recursion on lower degrees."""
    if right_closed_end is None:
        right_closed_end = t[-1]
    if order == 0:
        return cox_de_boor(t, j, k, x, right_closed_end)
    out = 0.0
    d1 = t[j + k] - t[j]
    if d1 > 0:
        out += k / d1 * cox_de_boor_deriv(t, j, k - 1, x, order - 1, right_closed_end)
    d2 = t[j + k + 1] - t[j + 1]
    if d2 > 0:
        out -= k / d2 * cox_de_boor_deriv(t, j + 1, k - 1, x, order - 1, right_closed_end)
    return out


def basis_matrix_oracle(basis, xs, deriv=0):
    """Full design matrix from the recursion, honoring drop_leading."""
    t = basis.knot_vector
    k = basis.degree
    n = basis.n_full
    out = np.zeros((len(xs), n))
    for r, x in enumerate(np.asarray(xs, dtype=float)):
        if x < basis.lo or x > basis.hi:
            continue
        for j in range(n):
            out[r, j] = cox_de_boor_deriv(t, j, k, x, order=deriv)
    return out[:, basis.drop_leading :]


def brute_loss(ds, state, g, pen, B, h, a_known=False):
    """Plain-Python re-summation of the penalized objective."""
    from odemix.dynamics import eval_at_times, solve_trajectory

    sse = 0.0
    k = 0
    for i, s in enumerate(ds.subjects):
        for c in s.curves:
            sol = solve_trajectory(g, state.a[k], state.theta[i], h)
            pred = eval_at_times(sol, g, state.theta[i], c.times)
            for yj, pj in zip(c.values, pred):
                sse += (yj - pj) ** 2
            k += 1
    pen_a = 0.0
    if not a_known and pen.lambda1 > 0:
        for av in state.a:
            pen_a += pen.lambda1 * (av - state.alpha) ** 2
    pen_th = sum(pen.lambda2 * th**2 for th in state.theta)
    pen_b = float(state.beta @ (B.B @ state.beta))
    return sse + pen_a + pen_th + pen_b


def brute_loss_grouped(ds, state, g, pen, B, h):
    """Same objective via the per-measurement shares ell_ilj, plus beta'B beta."""
    from odemix.dynamics import eval_at_times, solve_trajectory

    m_subject = {}
    k = 0
    for i, s in enumerate(ds.subjects):
        m_subject[i] = sum(c.m for c in s.curves)
    total = 0.0
    k = 0
    for i, s in enumerate(ds.subjects):
        for c in s.curves:
            sol = solve_trajectory(g, state.a[k], state.theta[i], h)
            pred = eval_at_times(sol, g, state.theta[i], c.times)
            for yj, pj in zip(c.values, pred):
                ell = (yj - pj) ** 2
                ell += pen.lambda1 * (state.a[k] - state.alpha) ** 2 / c.m
                ell += pen.lambda2 * state.theta[i] ** 2 / m_subject[i]
                total += ell
            k += 1
    total += float(state.beta @ (B.B @ state.beta))
    return total


def brute_info_matrices(ds, blocks, lambda2, Bmat):
    """Loop-based A_n, C_n, D_n, W_n from the same per-point sensitivities."""
    M = blocks.J_beta.shape[1]
    n = ds.n
    An = np.zeros((M, M))
    Cn = np.zeros((n, M))
    Dn = np.zeros(n)
    row = 0
    for i, s in enumerate(ds.subjects):
        for c in s.curves:
            for _ in range(c.m):
                jb = blocks.J_beta[row]
                jt = blocks.J_theta[row]
                An += np.outer(jb, jb)
                Cn[i] += jt * jb
                Dn[i] += jt * jt
                row += 1
    core = An + Bmat - Cn.T @ np.diag(1.0 / (Dn + lambda2)) @ Cn
    Wn = np.linalg.inv(core)
    return An, Cn, Dn, Wn


def riemann_region_ise(g_hat_fn, g_true_fn, lo, hi, npts=1_000_000):
    """Midpoint-Riemann integral of the squared difference."""
    xs = np.linspace(lo, hi, npts + 1)
    mids = 0.5 * (xs[:-1] + xs[1:])
    d = np.asarray(g_hat_fn(mids)) - np.asarray(g_true_fn(mids))
    return float(np.sum(d * d) * (hi - lo) / npts)


def trapezoid_gram_oracle(basis, A, lam, npanels=100_000):
    """Brute-force trapezoid version of the flatness penalty matrix."""
    lo = max(A, basis.lo)
    hi = min(2 * A, basis.hi)
    if hi <= lo:
        return np.zeros((basis.M, basis.M))
    xs = np.linspace(lo, hi, npanels + 1)
    D = basis.eval(xs, deriv=1)
    w = np.full(len(xs), (hi - lo) / npanels)
    w[0] *= 0.5
    w[-1] *= 0.5
    return lam * np.einsum("x,xi,xj->ij", w, D, D)
