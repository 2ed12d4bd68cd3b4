"""Cubic B-spline bases: construction, evaluation, and quadratic penalty matrices.

A basis is defined by a full (nondecreasing) knot vector plus an optional
count of leading basis functions to omit.  Two constructions are provided:

* ``SplineBasis.clamped`` -- repeated boundary knots at ``lo``/``hi`` with the
  given interior knots.  Dropping the two leading functions zeroes the value
  and first derivative of any spline in the span at ``lo``.
* ``SplineBasis.uniform`` -- equally spaced knots, each the center of one
  basis function (the knot vector is the given grid extended by two spacings
  on each side), so M knots yield M basis functions.

Evaluation outside the support hull returns zeros for all derivative orders.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline, PPoly


class BasisError(ValueError):
    pass


def _as_knots(v):
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1:
        raise BasisError("knot vector must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise BasisError("knots must be finite")
    return arr


class SplineBasis:
    """B-spline basis over a fixed knot vector.

    Parameters
    ----------
    knot_vector : array
        Full nondecreasing knot vector of length ``M_full + degree + 1``.
    degree : int
        Polynomial degree (default cubic).
    drop_leading : int
        Number of leading basis functions omitted (0, 1 or 2).
    construction : str
        Tag recording how the knot vector was built ("clamped", "uniform"
        or "explicit"); affects serialization only.
    """

    def __init__(self, knot_vector, degree=3, drop_leading=0, construction="explicit"):
        t = _as_knots(knot_vector)
        if degree < 1:
            raise BasisError("degree must be >= 1")
        if np.any(np.diff(t) < 0):
            raise BasisError("knot vector must be nondecreasing")
        n_full = len(t) - degree - 1
        if n_full < 1:
            raise BasisError("knot vector too short for the requested degree")
        if drop_leading not in (0, 1, 2):
            raise BasisError("drop_leading must be 0, 1 or 2")
        if n_full - drop_leading < 1:
            raise BasisError("drop_leading leaves no basis functions")
        self.degree = int(degree)
        self.knot_vector = t
        self.drop_leading = int(drop_leading)
        self.construction = construction
        self.n_full = n_full
        self.lo = float(t[0])
        self.hi = float(t[-1])
        if not self.lo < self.hi:
            raise BasisError("empty knot span")
        self._build_pieces()

    # -- constructors ---------------------------------------------------

    @classmethod
    def clamped(cls, interior_knots, lo, hi, degree=3, drop_leading=0):
        """Clamped basis: boundary knots repeated degree+1 times."""
        interior = _as_knots(interior_knots) if len(np.atleast_1d(interior_knots)) else np.empty(0)
        lo, hi = float(lo), float(hi)
        if not lo < hi:
            raise BasisError("require lo < hi")
        if interior.size:
            if np.any(np.diff(interior) <= 0):
                raise BasisError("interior knots must be strictly increasing")
            if interior[0] <= lo or interior[-1] >= hi:
                raise BasisError("interior knots must lie strictly inside (lo, hi)")
        t = np.r_[[lo] * (degree + 1), interior, [hi] * (degree + 1)]
        return cls(t, degree=degree, drop_leading=drop_leading, construction="clamped")

    @classmethod
    def uniform(cls, knots, degree=3, drop_leading=0):
        """Cardinal basis: M equally spaced knots, one basis function per knot."""
        knots = _as_knots(knots)
        if len(knots) < 2:
            raise BasisError("uniform construction needs at least 2 knots")
        if degree % 2 == 0:
            raise BasisError("uniform construction requires odd degree")
        deltas = np.diff(knots)
        delta = deltas[0]
        if delta <= 0 or np.any(np.abs(deltas - delta) > 1e-9 * max(abs(delta), 1.0)):
            raise BasisError("uniform construction requires equally spaced knots")
        pad = (degree + 1) // 2
        left = knots[0] - delta * np.arange(pad, 0, -1)
        right = knots[-1] + delta * np.arange(1, pad + 1)
        t = np.r_[left, knots, right]
        return cls(t, degree=degree, drop_leading=drop_leading, construction="uniform")

    # -- derived views ---------------------------------------------------

    @property
    def M(self):
        return self.n_full - self.drop_leading

    @property
    def boundary(self):
        return (self.lo, self.hi)

    @property
    def interior_knots(self):
        t = self.knot_vector
        return t[(t > self.lo) & (t < self.hi)]

    def _build_pieces(self):
        """Extract exact piecewise-polynomial coefficients for each basis function.

        Coefficients are stored ascending in (x - u_s) per unique span so that
        vectorized evaluation is a searchsorted plus a Horner pass; derivative
        tensors are obtained by differentiating the polynomials.
        """
        t, p = self.knot_vector, self.degree
        u = np.unique(t)
        self._breaks = u
        S = len(u) - 1
        n = self.n_full
        C0 = np.zeros((S, p + 1, n))
        for j in range(n):
            local = t[j : j + p + 2]
            if local[0] == local[-1]:
                continue
            b = BSpline.basis_element(local, extrapolate=False)
            pp = PPoly.from_spline((b.t, b.c, b.k))
            for s in range(S):
                us, ue = u[s], u[s + 1]
                if ue <= local[0] or us >= local[-1]:
                    continue
                i = np.searchsorted(pp.x, us, side="right") - 1
                i = min(max(i, 0), pp.c.shape[1] - 1)
                C0[s, :, j] = pp.c[::-1, i]
        self._coef = [C0]
        for d in range(1, 3):
            prev = self._coef[-1]
            q = prev.shape[1] - 1
            der = prev[:, 1:, :] * np.arange(1, q + 1)[None, :, None]
            self._coef.append(der)
        # (S, n_full, ncoef) contiguous copies for the numba kernels; the value
        # tensor is padded to 4 coefficients so cubic-specific kernels apply
        self._coefT = [np.ascontiguousarray(np.swapaxes(c, 1, 2)) for c in self._coef]

    # -- evaluation -------------------------------------------------------

    def eval(self, x, deriv=0):
        """Evaluate all M basis functions (or a derivative) at ``x``.

        Returns an array of shape ``x.shape + (M,)``; zero outside [lo, hi].
        """
        out = self._eval_full(x, deriv)
        if self.drop_leading:
            out = out[..., self.drop_leading :]
        return out

    def _eval_full(self, x, deriv=0):
        """Like :meth:`eval` but keeps the dropped leading functions."""
        if deriv not in (0, 1, 2):
            raise BasisError("deriv must be 0, 1 or 2")
        if deriv > self.degree:
            raise BasisError("derivative order exceeds the spline degree")
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise BasisError("evaluation points must be finite")
        shape = x.shape
        xf = np.ascontiguousarray(x.ravel())
        u = self._breaks
        idx = np.searchsorted(u, xf, side="right") - 1
        np.clip(idx, 0, len(u) - 2, out=idx)
        dx = xf - u[idx]
        C = self._coef[deriv][idx]  # (npts, ncoef, n_full)
        out = C[:, -1, :]
        for q in range(C.shape[1] - 2, -1, -1):
            out = out * dx[:, None] + C[:, q, :]
        inside = (xf >= self.lo) & (xf <= self.hi)
        out = np.where(inside[:, None], out, 0.0)
        return out.reshape(shape + (self.n_full,))

    def __eq__(self, other):
        return (
            isinstance(other, SplineBasis)
            and self.degree == other.degree
            and self.drop_leading == other.drop_leading
            and len(self.knot_vector) == len(other.knot_vector)
            and np.array_equal(self.knot_vector, other.knot_vector)
        )

    def __repr__(self):
        return (
            f"SplineBasis(degree={self.degree}, M={self.M}, "
            f"construction={self.construction!r}, span=[{self.lo:g}, {self.hi:g}])"
        )

    # -- serialization ----------------------------------------------------

    def to_json_dict(self):
        if self.construction == "clamped":
            return {
                "degree": self.degree,
                "interior_knots": [float(v) for v in self.interior_knots],
                "lo": self.lo,
                "hi": self.hi,
                "drop_leading": self.drop_leading,
            }
        if self.construction == "uniform":
            pad = (self.degree + 1) // 2
            main = self.knot_vector[pad:-pad]
            return {
                "kind": "uniform",
                "degree": self.degree,
                "knots": [float(v) for v in main],
                "drop_leading": self.drop_leading,
            }
        return {
            "kind": "explicit",
            "degree": self.degree,
            "knot_vector": [float(v) for v in self.knot_vector],
            "drop_leading": self.drop_leading,
        }

    @classmethod
    def from_json_dict(cls, d):
        kind = d.get("kind", "clamped")
        degree = int(d.get("degree", 3))
        drop = int(d.get("drop_leading", 0))
        if kind == "clamped":
            return cls.clamped(
                np.asarray(d.get("interior_knots", []), dtype=float),
                d["lo"],
                d["hi"],
                degree=degree,
                drop_leading=drop,
            )
        if kind == "uniform":
            return cls.uniform(np.asarray(d["knots"], dtype=float), degree=degree, drop_leading=drop)
        if kind == "explicit":
            return cls(np.asarray(d["knot_vector"], dtype=float), degree=degree, drop_leading=drop)
        raise BasisError(f"unknown basis kind {kind!r}")

    def to_json(self):
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json(cls, s):
        return cls.from_json_dict(json.loads(s))


def eval_basis(basis, x, deriv_order=0):
    """Functional alias for :meth:`SplineBasis.eval`."""
    return basis.eval(x, deriv=deriv_order)


@dataclass
class PenaltyMatrix:
    """Quadratic penalty beta^T B beta with the flatness-constraint metadata."""

    B: np.ndarray
    lambda_R: float = 0.0
    A: float = 1.0

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=float)
        if self.B.ndim != 2 or self.B.shape[0] != self.B.shape[1]:
            raise BasisError("penalty matrix must be square")
        if not np.allclose(self.B, self.B.T, atol=1e-10):
            raise BasisError("penalty matrix must be symmetric")
        w = np.linalg.eigvalsh(0.5 * (self.B + self.B.T))
        if w.min(initial=0.0) < -1e-10:
            raise BasisError("penalty matrix must be positive semidefinite")

    @classmethod
    def none(cls, M):
        return cls(np.zeros((M, M)), lambda_R=0.0, A=1.0)


# Gauss-Legendre nodes/weights on [-1, 1]; fixed rule, exact for degree <= 2q-1.
def _gauss_legendre(q):
    nodes, weights = np.polynomial.legendre.leggauss(q)
    return nodes, weights


def build_flatness_penalty(basis, A, lambda_R, quad_points=4):
    """Assemble B = lambda_R * int_A^{2A} phi'(x) phi'(x)^T dx.

    Gauss-Legendre with ``quad_points`` nodes per knot span intersected with
    [A, 2A]; exact for the piecewise-quartic integrand of cubic splines.
    """
    if A <= 0:
        raise BasisError("flatness onset A must be positive")
    if lambda_R < 0:
        raise BasisError("lambda_R must be nonnegative")
    if quad_points < 2:
        raise BasisError("need at least 2 quadrature points per span")
    M = basis.M
    if lambda_R == 0.0:
        return PenaltyMatrix(np.zeros((M, M)), lambda_R=0.0, A=float(A))
    lo = max(float(A), basis.lo)
    hi = min(2.0 * float(A), basis.hi)
    B = np.zeros((M, M))
    if lo < hi:
        cuts = basis._breaks
        pts = np.r_[lo, cuts[(cuts > lo) & (cuts < hi)], hi]
        nodes, weights = _gauss_legendre(quad_points)
        for a, b in zip(pts[:-1], pts[1:]):
            half = 0.5 * (b - a)
            xs = 0.5 * (a + b) + half * nodes
            dphi = basis.eval(xs, deriv=1)  # (q, M)
            B += half * np.einsum("q,qi,qj->ij", weights, dphi, dphi)
        B *= lambda_R
        B = 0.5 * (B + B.T)
    return PenaltyMatrix(B, lambda_R=float(lambda_R), A=float(A))
