"""Forward integration of X' = e^theta * g(X) and trajectory sensitivities.

All heavy lifting is vectorized across curves: a batch of curves sharing one
time grid is advanced by classical RK4 in a single sweep, and sensitivities
are computed either from the closed forms

    dX/da     = g(X(t)) / g(X(0))
    dX/dtheta = e^theta * t * g(X(t))
    dX/db_r   = g(X(t)) * int_{X(0)}^{X(t)} phi_r(x) / g(x)^2 dx

or by RK4 integration of the variational equations when g comes too close to
zero along the path for the closed forms to be safe.  Numba kernels carry the
inner loops when available; the numpy fallbacks implement the same update in
the same order (set ODEMIX_NO_NUMBA=1 to force them).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

if os.environ.get("ODEMIX_NO_NUMBA"):
    _K = None
else:
    try:
        from . import _kernels as _K
    except ImportError:  # pragma: no cover - numba not installed
        _K = None


class TrajectoryDiverged(RuntimeError):
    pass


class ClosedFormUnavailable(RuntimeError):
    """Raised when the gradient floor or monotonicity precondition fails."""


_N_SOLVE_CALLS = 0


def solve_call_count():
    """Number of RK4 trajectory solves performed so far (diagnostic)."""
    return _N_SOLVE_CALLS


@dataclass
class GradientFunction:
    """Shared gradient function g(x) = sum_k beta_k phi_k(x)."""

    basis: object
    beta: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if self.beta.shape != (self.basis.M,):
            raise ValueError(
                f"beta has shape {self.beta.shape}, basis has M={self.basis.M}"
            )
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("beta must be finite")

    def value(self, x):
        return self.basis.eval(x, deriv=0) @ self.beta

    def deriv(self, x, order=1):
        return self.basis.eval(x, deriv=order) @ self.beta

    def __call__(self, x):
        return self.value(x)


def _grid_steps(h):
    if not (h > 0):
        raise ValueError("grid spacing h must be positive")
    r = 1.0 / h
    G = int(round(r))
    if G < 1 or abs(r - G) > 8 * np.spacing(max(G, 1)):
        raise ValueError("1/h must be an integer (within a few ulp)")
    return G


def _hermite(y0, y1, d0, d1, step, u):
    um1 = 1.0 - u
    h00 = (1.0 + 2.0 * u) * um1 * um1
    h10 = u * um1 * um1
    h01 = u * u * (3.0 - 2.0 * u)
    h11 = u * u * (u - 1.0)
    return h00 * y0 + (step * h10) * d0 + h01 * y1 + (step * h11) * d1


def _g_coef_tensors(basis, beta2d, C):
    """Per-curve piecewise coefficients of g and g' ((C,S,4) and (C,S,3))."""
    full = np.zeros((beta2d.shape[0], basis.n_full))
    full[:, basis.drop_leading :] = beta2d
    g = np.einsum("sqm,cm->csq", basis._coef[0], full)
    gd = np.einsum("sqm,cm->csq", basis._coef[1], full)
    if g.shape[0] == 1 and C > 1:
        g = np.repeat(g, C, axis=0)
        gd = np.repeat(gd, C, axis=0)
    return np.ascontiguousarray(g), np.ascontiguousarray(gd)


def _percurve_poly(breaks, coefs, pts):
    """Numpy twin of the per-curve piecewise-polynomial kernel."""
    C, K = pts.shape
    flat = pts.ravel()
    idx = np.searchsorted(breaks, flat, side="right") - 1
    np.clip(idx, 0, len(breaks) - 2, out=idx)
    dx = flat - breaks[idx]
    ci = np.repeat(np.arange(C), K)
    Kc = coefs[ci, idx]
    out = Kc[:, -1]
    for q in range(Kc.shape[1] - 2, -1, -1):
        out = out * dx + Kc[:, q]
    inside = (flat >= breaks[0]) & (flat <= breaks[-1])
    return np.where(inside, out, 0.0).reshape(C, K)


def _percurve(basis, coefs, pts):
    if _K is not None:
        return _K.k_percurve(basis._breaks, coefs, np.ascontiguousarray(pts))
    return _percurve_poly(basis._breaks, coefs, pts)


def _design_full(basis, pts, deriv):
    """(npts, n_full) design matrix including dropped leading functions."""
    if _K is not None:
        return _K.k_design(basis._breaks, basis._coefT[deriv], np.ascontiguousarray(pts))
    return basis._eval_full(pts, deriv)


class BatchSolution:
    """Trajectories (and optionally sensitivities) for a batch of curves.

    Attributes of shape (C, G+1): ``x``, ``gx``, ``sens_a``, ``sens_theta``;
    ``sens_beta`` has shape (C, G+1, M).  All curves share ``grid``.
    """

    def __init__(self, basis, beta2d, a, theta, grid, x, gcoefs, gdercoefs):
        self.basis = basis
        self.beta2d = beta2d
        self.a = a
        self.theta = theta
        self.e_theta = np.exp(theta)
        self.grid = grid
        self.step = grid[1] - grid[0]
        self.x = x
        self._gcoefs = gcoefs
        self._gdercoefs = gdercoefs
        self.gx = _percurve(basis, gcoefs, x)
        self.left_support = np.any((x < basis.lo) | (x > basis.hi), axis=1)
        self.sens_a = None
        self.sens_theta = None
        self.sens_beta = None
        self.sens_method = None
        self._c_nodes = None
        self._phi_nodes = None

    @property
    def n_curves(self):
        return self.x.shape[0]

    # -- interpolation ---------------------------------------------------

    def _locate(self, times):
        t = np.asarray(times, dtype=float)
        if t.size and (t.min() < 0.0 or t.max() > 1.0):
            raise ValueError("evaluation times must lie in [0, 1]")
        G = len(self.grid) - 1
        s = t * G
        k = np.minimum(s.astype(int), G - 1)
        u = s - k
        # snap so that times equal to grid nodes return stored values exactly
        hi = (u > 1.0 - 1e-9) & (k < G - 1)
        k = np.where(hi, k + 1, k)
        u = np.where(hi, 0.0, u)
        u = np.where(u < 1e-9, 0.0, u)
        u = np.where(u > 1.0 - 1e-9, 1.0, u)
        return k, u

    def values_at(self, curve_idx, times):
        """Cubic Hermite interpolation of X at arbitrary times.

        ``curve_idx`` maps each time to its curve; node derivatives are the
        exact e^theta * g(X) values, giving O(h^4) accuracy.
        """
        curve_idx = np.asarray(curve_idx)
        k, u = self._locate(times)
        d = self.e_theta[curve_idx]
        y0 = self.x[curve_idx, k]
        y1 = self.x[curve_idx, k + 1]
        d0 = d * self.gx[curve_idx, k]
        d1 = d * self.gx[curve_idx, k + 1]
        return _hermite(y0, y1, d0, d1, self.step, u)

    def sens_at(self, curve_idx, times):
        """Hermite-interpolated sensitivities at arbitrary times.

        Returns (J_a, J_theta, J_beta) with shapes (npts,), (npts,), (npts, M).
        Node derivatives come from the variational right-hand sides.
        """
        if self.sens_a is None:
            raise RuntimeError("sensitivities not computed")
        curve_idx = np.asarray(curve_idx)
        k, u = self._locate(times)
        c = self._c_nodes
        eth = self.e_theta[curve_idx]
        c0 = c[curve_idx, k]
        c1 = c[curve_idx, k + 1]

        y0 = self.sens_a[curve_idx, k]
        y1 = self.sens_a[curve_idx, k + 1]
        J_a = _hermite(y0, y1, c0 * y0, c1 * y1, self.step, u)

        y0 = self.sens_theta[curve_idx, k]
        y1 = self.sens_theta[curve_idx, k + 1]
        J_th = _hermite(
            y0,
            y1,
            c0 * y0 + eth * self.gx[curve_idx, k],
            c1 * y1 + eth * self.gx[curve_idx, k + 1],
            self.step,
            u,
        )

        phi = self._phi_nodes
        y0 = self.sens_beta[curve_idx, k, :]
        y1 = self.sens_beta[curve_idx, k + 1, :]
        d0 = c0[:, None] * y0 + eth[:, None] * phi[curve_idx, k, :]
        d1 = c1[:, None] * y1 + eth[:, None] * phi[curve_idx, k + 1, :]
        J_b = _hermite(y0, y1, d0, d1, self.step, u[:, None])
        return J_a, J_th, J_b

    # -- sensitivities ----------------------------------------------------

    def compute_sensitivities(self, gradient_floor=1e-10, prefer_closed=True):
        """Fill sens_a/sens_theta/sens_beta for every curve.

        Closed forms are used per curve when |g| stays above ``gradient_floor``
        along the path; remaining curves fall back to variational RK4.
        Returns the number of curves that needed the fallback.
        """
        C, Gp1 = self.x.shape
        M = self.basis.M
        drop = self.basis.drop_leading
        self.sens_a = np.empty((C, Gp1))
        self.sens_theta = np.empty((C, Gp1))
        self.sens_beta = np.empty((C, Gp1, M))
        phi_full = _design_full(self.basis, self.x.ravel(), 0).reshape(C, Gp1, -1)
        self._phi_nodes = phi_full[:, :, drop:]
        self._c_nodes = self.e_theta[:, None] * _percurve(self.basis, self._gdercoefs, self.x)

        eligible = np.zeros(C, dtype=bool)
        if prefer_closed:
            xm = 0.5 * (self.x[:, :-1] + self.x[:, 1:])
            g_mid = _percurve(self.basis, self._gcoefs, xm)
            gmin = np.minimum(np.abs(self.gx).min(axis=1), np.abs(g_mid).min(axis=1))
            eligible = gmin > gradient_floor
            idx = np.flatnonzero(eligible)
            if idx.size:
                self._closed_form(idx)
        rest = np.flatnonzero(~eligible)
        if rest.size:
            self._variational(rest)
        self.sens_method = np.where(eligible, "closed_form", "variational")
        return int(rest.size)

    def _closed_form(self, idx, rtol=1e-10, atol=5e-13):
        gx = self.gx[idx]
        eth = self.e_theta[idx]
        self.sens_a[idx] = gx / gx[:, :1]
        self.sens_theta[idx] = eth[:, None] * self.grid[None, :] * gx
        x = np.ascontiguousarray(self.x[idx])
        gco = np.ascontiguousarray(self._gcoefs[idx])
        if _K is not None:
            cells, bad = _K.k_simpson_cells(
                self.basis._breaks, self.basis._coefT[0], gco, x, rtol, atol
            )
            bad = bad.astype(bool)
        else:
            cells, bad = _simpson_cells_numpy(self.basis, gco, x, rtol, atol)
        if np.any(bad):
            for c, k in zip(*np.nonzero(bad)):
                cells[c, k] = _adaptive_cell(
                    lambda p, cc=c: _phi_over_g2_np(self.basis, gco, cc, p),
                    x[c, k],
                    x[c, k + 1],
                    rtol,
                    atol,
                    30,
                )
        I = np.zeros((x.shape[0], x.shape[1], cells.shape[2]))
        np.cumsum(cells, axis=1, out=I[:, 1:])
        drop = self.basis.drop_leading
        self.sens_beta[idx] = gx[:, :, None] * I[:, :, drop:]

    def _variational(self, idx):
        x = np.ascontiguousarray(self.x[idx])
        h = self.step
        eth_v = self.e_theta[idx]
        d_nodes = eth_v[:, None] * self.gx[idx]
        xm = _hermite(x[:, :-1], x[:, 1:], d_nodes[:, :-1], d_nodes[:, 1:], h, 0.5)
        gco = np.ascontiguousarray(self._gcoefs[idx])
        gder = np.ascontiguousarray(self._gdercoefs[idx])
        drop = self.basis.drop_leading
        if _K is not None:
            sa, st, sb, cn = _K.k_variational(
                self.basis._breaks,
                self.basis._coefT[0],
                self.basis._coefT[1],
                gco,
                x,
                np.ascontiguousarray(xm),
                eth_v,
                h,
            )
        else:
            sa, st, sb, cn = _variational_numpy(self.basis, gco, gder, x, xm, eth_v, h)
        self.sens_a[idx] = sa
        self.sens_theta[idx] = st
        self.sens_beta[idx] = sb[:, :, drop:]
        self._c_nodes[idx] = cn


def _phi_over_g2_np(basis, gcoefs, c, pts):
    pts = np.atleast_1d(np.asarray(pts, dtype=float))
    phi = basis._eval_full(pts, 0)
    g = _percurve_poly(basis._breaks, gcoefs[c : c + 1], pts[None, :])[0]
    return phi / (g * g)[:, None]


def _simpson_cells_numpy(basis, gcoefs, x, rtol, atol):
    """Numpy twin of the fused Simpson kernel (per-cell integrals + flags)."""
    C, Gp1 = x.shape

    def f_at(pts):
        flat = pts.ravel()
        phi = basis._eval_full(flat, 0)
        g = _percurve_poly(basis._breaks, gcoefs, pts)
        return (phi / (g.ravel() ** 2)[:, None]).reshape(pts.shape + (basis.n_full,))

    f_nodes = f_at(x)
    xm = 0.5 * (x[:, :-1] + x[:, 1:])
    fm = f_at(xm)
    fq1 = f_at(0.5 * (x[:, :-1] + xm))
    fq3 = f_at(0.5 * (xm + x[:, 1:]))
    dX = np.diff(x, axis=1)[..., None]
    f0, f1 = f_nodes[:, :-1], f_nodes[:, 1:]
    S1 = (f0 + 4.0 * fm + f1) * dX / 6.0
    S2 = (f0 + 4.0 * fq1 + fm) * dX / 12.0 + (fm + 4.0 * fq3 + f1) * dX / 12.0
    err = (S2 - S1) / 15.0
    cells = S2 + err
    bad = np.abs(err).max(axis=2) > (
        atol + rtol * np.maximum(np.abs(cells).max(axis=2), 1.0)
    )
    return cells, bad


def _adaptive_cell(f, xa, xb, rtol, atol, depth):
    pts = np.array(
        [xa, 0.75 * xa + 0.25 * xb, 0.5 * (xa + xb), 0.25 * xa + 0.75 * xb, xb]
    )
    v = f(pts)
    w = xb - xa
    S1 = (v[0] + 4.0 * v[2] + v[4]) * w / 6.0
    S2 = (v[0] + 4.0 * v[1] + v[2]) * w / 12.0 + (v[2] + 4.0 * v[3] + v[4]) * w / 12.0
    err = np.abs(S2 - S1).max() / 15.0
    if depth <= 0 or err <= atol + rtol * max(np.abs(S2).max(), 1.0):
        return S2 + (S2 - S1) / 15.0
    mid = 0.5 * (xa + xb)
    return _adaptive_cell(f, xa, mid, rtol, atol, depth - 1) + _adaptive_cell(
        f, mid, xb, rtol, atol, depth - 1
    )


def _variational_numpy(basis, gcoefs, gdercoefs, x, xm, eth, h):
    """Numpy twin of the fused variational kernel."""
    h2 = 0.5 * h
    ethc = eth[:, None]
    gx = _percurve_poly(basis._breaks, gcoefs, x)
    gm = _percurve_poly(basis._breaks, gcoefs, xm)
    cn = ethc * _percurve_poly(basis._breaks, gdercoefs, x)
    cm = ethc * _percurve_poly(basis._breaks, gdercoefs, xm)
    phin = basis._eval_full(x, 0)
    phim = basis._eval_full(xm, 0)
    c0, c1 = cn[:, :-1], cn[:, 1:]
    A1 = c0
    A2 = cm * (1.0 + h2 * A1)
    A3 = cm * (1.0 + h2 * A2)
    A4 = c1 * (1.0 + h * A3)
    A = 1.0 + (h / 6.0) * (A1 + 2.0 * A2 + 2.0 * A3 + A4)
    P = np.cumprod(A, axis=1)

    def propagate(d0, dm, d1, s0):
        if d0.ndim == 3:
            cmx, c1x, Px = cm[..., None], c1[..., None], P[..., None]
        else:
            cmx, c1x, Px = cm, c1, P
        b1 = d0
        b2 = dm + (cmx * h2) * b1
        b3 = dm + (cmx * h2) * b2
        b4 = d1 + (c1x * h) * b3
        b = (h / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
        out = np.empty(d0.shape[:1] + (x.shape[1],) + d0.shape[2:])
        out[:, 0] = s0
        out[:, 1:] = Px * (s0 + np.cumsum(b / Px, axis=1))
        return out

    sa = np.empty_like(x)
    sa[:, 0] = 1.0
    sa[:, 1:] = P
    d_th = ethc * gx
    st = propagate(d_th[:, :-1], ethc * gm, d_th[:, 1:], 0.0)
    d_b = ethc[..., None] * phin
    dm_b = ethc[..., None] * phim
    sb = propagate(d_b[:, :-1], dm_b, d_b[:, 1:], 0.0)
    return sa, st, sb, cn


def _rk4_numpy(basis, gcoefs, a, eth, G, step, bound):
    X = np.empty((len(a), G + 1))
    X[:, 0] = a
    xk = a.copy()
    h2 = 0.5 * step
    h6 = step / 6.0
    breaks = basis._breaks

    def val(pts):
        return _percurve_poly(breaks, gcoefs, pts[:, None])[:, 0]

    for k in range(G):
        k1 = eth * val(xk)
        k2 = eth * val(xk + h2 * k1)
        k3 = eth * val(xk + h2 * k2)
        k4 = eth * val(xk + step * k3)
        xk = xk + h6 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        X[:, k + 1] = xk
        if not np.all(np.abs(xk) <= bound):
            return X, int(np.argmax(~(np.abs(xk) <= bound))), k + 1
    return X, -1, -1


def solve_batch(basis, beta, a, theta, h, blowup_bound=1e6, labels=None):
    """RK4-integrate X' = e^theta g(X) for a batch of curves on one grid.

    ``beta`` is (M,) shared or (C, M) per curve; ``a`` and ``theta`` are (C,).
    """
    global _N_SOLVE_CALLS
    _N_SOLVE_CALLS += 1
    a = np.atleast_1d(np.asarray(a, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    C = len(a)
    if len(theta) != C:
        raise ValueError("a and theta must have matching lengths")
    beta = np.asarray(beta, dtype=float)
    beta2d = beta[None, :] if beta.ndim == 1 else beta
    if beta2d.shape[1] != basis.M or beta2d.shape[0] not in (1, C):
        raise ValueError("beta must be (M,) or (C, M)")
    G = _grid_steps(h)
    grid = np.linspace(0.0, 1.0, G + 1)
    step = grid[1] - grid[0]
    gcoefs, gdercoefs = _g_coef_tensors(basis, beta2d, C)
    eth = np.exp(theta)
    if _K is not None:
        X, bad, bad_k = _K.k_rk4(basis._breaks, gcoefs, a, eth, G, step, blowup_bound)
    else:
        X, bad, bad_k = _rk4_numpy(basis, gcoefs, a, eth, G, step, blowup_bound)
    if bad >= 0:
        name = labels[bad] if labels is not None else f"curve {bad}"
        raise TrajectoryDiverged(
            f"trajectory diverged for {name} at t={grid[bad_k]:.6g} "
            f"(|X| > {blowup_bound:g})"
        )
    return BatchSolution(basis, beta2d, a, theta, grid, X, gcoefs, gdercoefs)


# -- spec-level single-curve API ------------------------------------------


@dataclass
class CurveSolution:
    """Gridded trajectory of one curve plus (optionally) its sensitivities."""

    grid: np.ndarray
    x: np.ndarray
    sens_a: np.ndarray = None
    sens_theta: np.ndarray = None
    sens_beta: np.ndarray = None
    method: str = None
    left_support: bool = False
    _batch: BatchSolution = field(default=None, repr=False)


def solve_trajectory(g, a, theta, h, blowup_bound=1e6):
    """Solve one curve; returns the trajectory only (no sensitivities)."""
    batch = solve_batch(g.basis, g.beta, [a], [theta], h, blowup_bound=blowup_bound)
    return CurveSolution(
        grid=batch.grid,
        x=batch.x[0],
        left_support=bool(batch.left_support[0]),
        _batch=batch,
    )


def eval_at_times(sol, g, theta, times):
    """Cubic Hermite interpolation of the solved trajectory at arbitrary times."""
    times = np.asarray(times, dtype=float)
    batch = sol._batch
    if batch is None:
        batch = _rewrap(sol, g, theta)
    return batch.values_at(np.zeros(times.shape, dtype=int), times)


def _rewrap(sol, g, theta):
    beta2d = g.beta[None, :]
    gcoefs, gdercoefs = _g_coef_tensors(g.basis, beta2d, 1)
    return BatchSolution(
        g.basis,
        beta2d,
        np.array([sol.x[0]]),
        np.array([float(theta)]),
        sol.grid,
        sol.x[None, :],
        gcoefs,
        gdercoefs,
    )


def _fill_from_batch(sol, batch):
    sol.sens_a = batch.sens_a[0]
    sol.sens_theta = batch.sens_theta[0]
    sol.sens_beta = batch.sens_beta[0]
    sol.method = str(batch.sens_method[0])
    sol._batch = batch
    return sol


def sensitivities_closed_form(sol, g, a, theta, gradient_floor=1e-10):
    """Closed-form sensitivities; raises ClosedFormUnavailable near g = 0."""
    batch = sol._batch if sol._batch is not None else _rewrap(sol, g, theta)
    fallback = batch.compute_sensitivities(
        gradient_floor=gradient_floor, prefer_closed=True
    )
    if fallback:
        raise ClosedFormUnavailable(
            f"|g| fell below the floor {gradient_floor:g} along the trajectory"
        )
    return _fill_from_batch(sol, batch)


def sensitivities_variational(sol, g, a, theta):
    """Sensitivities by RK4 integration of the variational equations."""
    batch = sol._batch if sol._batch is not None else _rewrap(sol, g, theta)
    batch.compute_sensitivities(prefer_closed=False)
    return _fill_from_batch(sol, batch)
