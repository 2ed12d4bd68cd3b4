"""Two-stage baseline: per-curve smoothing, then regression of X' on X.

Stage one estimates each trajectory by local linear smoothing and its
derivative by local quadratic smoothing (Epanechnikov kernel), with
leave-one-out CV bandwidths per curve and per target.  Stage two pools the
smoothed (value, derivative) pairs across curves and estimates g either by a
least-squares basis regression or by local quadratic smoothing over x.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


class TwoStageError(ValueError):
    pass


def _epanechnikov(u):
    return np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0)


def default_bandwidth_grid(span, n=15, rel_lo=0.05, rel_hi=1.0):
    """Geometric grid of n bandwidths spanning [rel_lo, rel_hi] * span."""
    span = float(span)
    if span <= 0:
        span = 1.0
    return span * np.geomspace(rel_lo, rel_hi, n)


@dataclass
class TwoStageOptions:
    bandwidth_grid: np.ndarray = None  # None -> per-curve default grid
    stage2: str = "local_quadratic"  # or "basis"
    stage2_bandwidth_grid: np.ndarray = None
    kernel: str = "epanechnikov"

    def __post_init__(self):
        if self.stage2 not in ("local_quadratic", "basis"):
            raise TwoStageError("stage2 must be 'local_quadratic' or 'basis'")
        if self.kernel != "epanechnikov":
            raise TwoStageError("only the Epanechnikov kernel is implemented")
        for g in (self.bandwidth_grid, self.stage2_bandwidth_grid):
            if g is not None:
                g = np.asarray(g, dtype=float)
                if g.size == 0 or np.any(g <= 0):
                    raise TwoStageError("bandwidth grids must be nonempty and positive")


def _local_poly_fit(t, y, t0, bw, degree, omit=None):
    """Weighted polynomial fit centered at t0; returns coefficients or None."""
    d = t - t0
    w = _epanechnikov(d / bw)
    if omit is not None:
        w = w.copy()
        w[omit] = 0.0
    active = w > 0
    if np.count_nonzero(active) < degree + 1:
        return None
    sw = np.sqrt(w[active])
    X = np.vander(d[active], degree + 1, increasing=True) * sw[:, None]
    b = y[active] * sw
    coef, _, rank, _ = np.linalg.lstsq(X, b, rcond=None)
    if rank < degree + 1:
        return None
    return coef


def _loo_cv_error(t, y, bw, degree):
    """Leave-one-out prediction error of the local fit's value component."""
    err = 0.0
    for j in range(len(t)):
        coef = _local_poly_fit(t, y, t[j], bw, degree, omit=j)
        if coef is None:
            return np.inf
        err += (y[j] - coef[0]) ** 2
    return err


def _select_bandwidth(t, y, grid, degree):
    errs = np.asarray([_loo_cv_error(t, y, bw, degree) for bw in grid])
    if np.all(np.isinf(errs)):
        return None, errs
    return float(grid[int(np.argmin(errs))]), errs


def presmooth_curve(times, values, bw_grid=None, eval_times=None):
    """Local linear value and local quadratic derivative estimates.

    Bandwidths are chosen per target by leave-one-out CV over ``bw_grid``;
    fits that are singular at some evaluation point widen the bandwidth
    (recorded in the returned info dict).  Curves with fewer than 3 points
    are rejected (local quadratic needs 3).
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if len(t) < 3:
        raise TwoStageError("presmoothing needs at least 3 measurements per curve")
    if eval_times is None:
        eval_times = t
    eval_times = np.asarray(eval_times, dtype=float)
    if bw_grid is None:
        bw_grid = default_bandwidth_grid(t[-1] - t[0])
    bw_grid = np.asarray(bw_grid, dtype=float)

    info = {"widened": 0}
    out = {}
    for key, degree in (("value", 1), ("deriv", 2)):
        bw, errs = _select_bandwidth(t, y, bw_grid, degree)
        if bw is None:
            # even the largest grid bandwidth is singular somewhere: widen it
            bw = float(bw_grid[-1])
            while _loo_cv_error(t, y, bw, degree) == np.inf and bw < 1e6:
                bw *= 1.5
                info["widened"] += 1
        est = np.empty(len(eval_times))
        for k, t0 in enumerate(eval_times):
            b = bw
            coef = _local_poly_fit(t, y, t0, b, degree)
            while coef is None and b < 1e6:
                b *= 1.5
                info["widened"] += 1
                coef = _local_poly_fit(t, y, t0, b, degree)
            if coef is None:
                raise TwoStageError("local fit singular at every bandwidth")
            est[k] = coef[0] if key == "value" else coef[1]
        out[key] = est
        info[f"bw_{key}"] = bw
    return out["value"], out["deriv"], info


def presmooth_dataset(ds, opts=None):
    """Stage one over all curves; returns pooled (x_hat, xprime_hat) pairs.

    Curves with fewer than 3 points are skipped with a warning (counted in
    the info dict).
    """
    opts = opts or TwoStageOptions()
    xs = []
    dxs = []
    skipped = 0
    widened = 0
    for i, l, c in ds.curves:
        if c.m < 3:
            skipped += 1
            continue
        grid = opts.bandwidth_grid
        if grid is None:
            grid = default_bandwidth_grid(c.times[-1] - c.times[0])
        xh, dxh, info = presmooth_curve(c.times, c.values, grid)
        widened += info["widened"]
        xs.append(xh)
        dxs.append(dxh)
    if skipped:
        warnings.warn(f"two-stage: skipped {skipped} curve(s) with fewer than 3 points")
    if not xs:
        raise TwoStageError("no curve has enough measurements for presmoothing")
    return (
        np.concatenate(xs),
        np.concatenate(dxs),
        {"skipped": skipped, "widened": widened},
    )


def stage2_fit(x_pool, xprime_pool, opts=None, basis=None, eval_grid=None):
    """Estimate g from pooled pairs on ``eval_grid``.

    ``basis`` mode solves the least-squares basis regression (requires at
    least M pooled points and full rank); ``local_quadratic`` smooths the
    derivative over x with a CV bandwidth.
    """
    opts = opts or TwoStageOptions()
    x = np.asarray(x_pool, dtype=float)
    y = np.asarray(xprime_pool, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise TwoStageError("pooled pairs must be equal-length vectors")
    if eval_grid is None:
        eval_grid = np.linspace(x.min(), x.max(), 201)
    eval_grid = np.asarray(eval_grid, dtype=float)

    if opts.stage2 == "basis":
        if basis is None:
            raise TwoStageError("basis regression requires a basis")
        if len(x) < basis.M:
            raise TwoStageError(f"need at least M={basis.M} pooled points")
        X = basis.eval(x, deriv=0)
        coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
        if rank < basis.M:
            raise TwoStageError("rank-deficient basis regression design")
        return basis.eval(eval_grid, deriv=0) @ coef, {"coef": coef}

    if len(x) < 3:
        raise TwoStageError("local quadratic stage two needs at least 3 pooled points")
    grid = opts.stage2_bandwidth_grid
    if grid is None:
        grid = default_bandwidth_grid(x.max() - x.min())
    bw, errs = _select_bandwidth(x, y, np.asarray(grid, dtype=float), 2)
    widened = 0
    if bw is None:
        bw = float(np.asarray(grid, dtype=float)[-1])
        while _loo_cv_error(x, y, bw, 2) == np.inf and bw < 1e6:
            bw *= 1.5
            widened += 1
    g_hat = np.empty(len(eval_grid))
    for k, x0 in enumerate(eval_grid):
        b = bw
        coef = _local_poly_fit(x, y, x0, b, 2)
        while coef is None and b < 1e12:
            b *= 1.5
            widened += 1
            coef = _local_poly_fit(x, y, x0, b, 2)
        if coef is None:
            raise TwoStageError("stage-two local fit singular at every bandwidth")
        g_hat[k] = coef[0]
    return g_hat, {"bw": bw, "widened": widened}


def two_stage_estimate(ds, opts=None, basis=None, eval_grid=None):
    """Full two-stage pipeline: presmooth every curve, then fit g."""
    opts = opts or TwoStageOptions()
    x_pool, dx_pool, info1 = presmooth_dataset(ds, opts)
    g_hat, info2 = stage2_fit(x_pool, dx_pool, opts, basis=basis, eval_grid=eval_grid)
    info = dict(info1)
    info.update(info2)
    return g_hat, info


def region_ise(g_hat_fn, g_true_fn, regions, points_per_unit=2000):
    """Trapezoid-rule integral of (g_hat - g_true)^2 over each region."""
    out = []
    for lo, hi in regions:
        lo, hi = float(lo), float(hi)
        if not hi > lo:
            raise TwoStageError(f"empty region [{lo}, {hi}]")
        npts = max(int(round((hi - lo) * points_per_unit)) + 1, 2)
        xs = np.linspace(lo, hi, npts)
        d = np.asarray(g_hat_fn(xs), dtype=float) - np.asarray(g_true_fn(xs), dtype=float)
        out.append(float(np.trapezoid(d * d, xs)))
    return out
