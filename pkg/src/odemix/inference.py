"""Asymptotic variance of the basis coefficients and pointwise SE of g-hat.

W_n = (A_n + B - C_n^T (D_n + lambda2 I)^{-1} C_n)^{-1} built from the same
sensitivity evaluations as the Jacobian blocks; V(beta-hat) = sigma_eps^2 W_n
and SE(g-hat(x)) = sqrt(phi(x)^T V phi(x)).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .basis import PenaltyMatrix


class InferenceError(RuntimeError):
    pass


@dataclass
class InfoMatrices:
    An: np.ndarray  # (M, M)
    Cn: np.ndarray  # (n, M)
    Dn: np.ndarray  # (n,) diagonal entries
    Wn: np.ndarray  # (M, M)
    V_beta: np.ndarray = None  # sigma_eps^2 * Wn, filled when sigma is known

    def with_sigma(self, sigma_eps2):
        self.V_beta = float(sigma_eps2) * self.Wn
        return self


def info_matrices_from_blocks(blocks, ds, lambda2, B=None):
    """Assemble A_n, C_n, D_n from existing Jacobian blocks and invert for W_n."""
    J = blocks.J_beta
    M = J.shape[1]
    Bm = B.B if B is not None else np.zeros((M, M))
    An = J.T @ J
    n = ds.n
    Cn = np.empty((n, M))
    Dn = np.empty(n)
    for i, sl in enumerate(blocks.subject_slices):
        Jt = blocks.J_theta[sl]
        Cn[i] = Jt @ J[sl]
        Dn[i] = float(Jt @ Jt)
    core = An + Bm - Cn.T @ (Cn / (Dn + lambda2)[:, None])
    core = 0.5 * (core + core.T)
    try:
        Wn = np.linalg.solve(core, np.eye(M))
    except np.linalg.LinAlgError as exc:
        cond = float(np.linalg.cond(core))
        raise InferenceError(
            f"A_n + B - Schur term not invertible (condition estimate {cond:.3e})"
        ) from exc
    cond = float(np.linalg.cond(core))
    if not np.all(np.isfinite(Wn)) or cond > 1e14:
        raise InferenceError(
            f"A_n + B - Schur term numerically singular (condition estimate {cond:.3e})"
        )
    Wn = 0.5 * (Wn + Wn.T)
    return InfoMatrices(An=An, Cn=Cn, Dn=Dn, Wn=Wn)


def info_matrices(ds, state, g, h, lambda2, B=None, a_known=True):
    """Sensitivity-based information matrices at the fitted state."""
    from .optimizer import assemble_jacobians

    blocks = assemble_jacobians(ds, state, g, h, a_known=a_known)
    return info_matrices_from_blocks(blocks, ds, lambda2, B)


def se_g(infos, sigma_eps2, basis, xs):
    """Pointwise standard error of g-hat on a grid.

    Negative quadratic forms (numerical) are clamped to zero with a warning;
    points outside the basis support get SE 0.
    """
    xs = np.asarray(xs, dtype=float)
    phi = basis.eval(xs, deriv=0)
    V = float(sigma_eps2) * infos.Wn
    q = np.einsum("xi,ij,xj->x", phi, V, phi)
    if np.any(q < 0):
        if q.min() < -1e-10 * max(np.abs(q).max(), 1.0):
            warnings.warn("negative variance quadratic form clamped to zero")
        q = np.clip(q, 0.0, None)
    return np.sqrt(q)
