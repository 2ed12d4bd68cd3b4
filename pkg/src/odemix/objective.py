"""Penalized hierarchical loss, residuals, and adaptive variance estimators.

The objective is

    sum_{i,l,j} [Y_ilj - X_il(t_ilj)]^2
      + lambda1 * sum_{i,l} (a_il - alpha)^2
      + lambda2 * sum_i theta_i^2
      + beta^T B beta

with lambda1 = sigma_eps^2/sigma_a^2 and lambda2 = sigma_eps^2/sigma_theta^2
re-estimated from current residuals in adaptive mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import solve_batch


class DegenerateVarianceError(RuntimeError):
    """Adaptive variance update refused (a denominator is not positive)."""


@dataclass
class LossBreakdown:
    sse: float
    pen_a: float
    pen_theta: float
    pen_beta: float
    total: float

    def as_dict(self):
        return {
            "sse": self.sse,
            "pen_a": self.pen_a,
            "pen_theta": self.pen_theta,
            "pen_beta": self.pen_beta,
            "total": self.total,
        }


@dataclass
class VarianceEstimates:
    sigma_eps2: float
    sigma_a2: float
    sigma_theta2: float
    lambda1: float
    lambda2: float

    def as_dict(self):
        return {
            "sigma_eps2": self.sigma_eps2,
            "sigma_a2": self.sigma_a2,
            "sigma_theta2": self.sigma_theta2,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
        }


def solve_state(ds, state, basis, h, blowup_bound=1e6):
    """Solve every curve of the dataset at the given parameters (one batch)."""
    theta_per_curve = state.theta[ds.subject_of_curve]
    labels = [f"curve {c.id} (subject {ds.subjects[i].id})" for i, _, c in ds.curves]
    return solve_batch(
        basis, state.beta, state.a, theta_per_curve, h,
        blowup_bound=blowup_bound, labels=labels,
    )


def residuals_concat(ds, state, g, h, blowup_bound=1e6, solution=None):
    """Concatenated residuals in (i, l, j) order, plus the batch solution."""
    sol = solution if solution is not None else solve_state(ds, state, g.basis, h, blowup_bound)
    fitted = sol.values_at(ds.curve_index_concat, ds.times_concat)
    return ds.values_concat - fitted, sol


def residuals(ds, state, g, h, blowup_bound=1e6):
    """Ragged residuals eps_ilj = Y_ilj - X_il(t_ilj), one array per curve."""
    eps, _ = residuals_concat(ds, state, g, h, blowup_bound)
    return [eps[sl] for sl in ds.curve_slices]


def loss_from_parts(eps_concat, state, pen, B, a_known=False):
    sse = float(eps_concat @ eps_concat)
    if a_known or pen.lambda1 == 0.0:
        pen_a = 0.0
    else:
        d = state.a - state.alpha
        pen_a = float(pen.lambda1 * (d @ d))
    pen_theta = float(pen.lambda2 * (state.theta @ state.theta))
    pen_beta = float(state.beta @ (B.B @ state.beta)) if B is not None else 0.0
    total = sse + pen_a + pen_theta + pen_beta
    return LossBreakdown(sse, pen_a, pen_theta, pen_beta, total)


def loss(ds, state, g, pen, B, h=5e-4, blowup_bound=1e6):
    """Evaluate the penalized objective; pen_a is 0 when pen.a_known."""
    eps, _ = residuals_concat(ds, state, g, h, blowup_bound)
    return loss_from_parts(eps, state, pen, B, a_known=pen.a_known)


def update_variances(ds, state, resids, M):
    """The displayed moment estimators and the implied (lambda1, lambda2).

    ``resids`` may be the ragged per-curve list or the concatenated vector.
    Raises DegenerateVarianceError when any denominator is not positive.
    """
    if isinstance(resids, (list, tuple)):
        eps = np.concatenate([np.asarray(r, dtype=float) for r in resids])
    else:
        eps = np.asarray(resids, dtype=float)
    n, N, m = ds.n, ds.N_total, ds.m_total
    dof = m - N - n - M
    if dof <= 0:
        raise DegenerateVarianceError(
            f"residual-variance denominator {m}-{N}-{n}-{M} = {dof} <= 0"
        )
    if N < 2 or n < 2:
        raise DegenerateVarianceError("need at least 2 curves and 2 subjects")
    sigma_eps2 = float(eps @ eps) / dof
    d = state.a - np.mean(state.a)
    sigma_a2 = float(d @ d) / (N - 1)
    sigma_theta2 = float(state.theta @ state.theta) / (n - 1)
    if sigma_a2 <= 0.0:
        raise DegenerateVarianceError("sigma_a^2 estimate is zero; lambda1 undefined")
    if sigma_theta2 <= 0.0:
        raise DegenerateVarianceError("sigma_theta^2 estimate is zero; lambda2 undefined")
    return VarianceEstimates(
        sigma_eps2=sigma_eps2,
        sigma_a2=sigma_a2,
        sigma_theta2=sigma_theta2,
        lambda1=sigma_eps2 / sigma_a2,
        lambda2=sigma_eps2 / sigma_theta2,
    )
