import json

import numpy as np
import pytest

from odemix.basis import (
    BasisError,
    PenaltyMatrix,
    SplineBasis,
    build_flatness_penalty,
    eval_basis,
)
from oracles import basis_matrix_oracle, trapezoid_gram_oracle


class TestConstruction:
    def test_clamped_dimension(self):
        b = SplineBasis.clamped([0.35, 0.6, 0.85, 1.1], 0.0, 1.5)
        assert b.M == 4 + 3 + 1
        assert b.boundary == (0.0, 1.5)

    def test_uniform_dimension_matches_knot_count(self):
        b = SplineBasis.uniform([0.35, 0.6, 0.85, 1.1])
        assert b.M == 4
        assert b.lo == pytest.approx(-0.15)
        assert b.hi == pytest.approx(1.6)

    def test_drop_leading_reduces_dimension(self):
        b = SplineBasis.clamped([1.0, 2.0], 0.0, 3.0, drop_leading=2)
        assert b.M == (2 + 4) - 2

    def test_interior_knots_must_be_inside(self):
        with pytest.raises(BasisError):
            SplineBasis.clamped([0.0, 0.5], 0.0, 1.0)

    def test_interior_knots_must_increase(self):
        with pytest.raises(BasisError):
            SplineBasis.clamped([0.6, 0.4], 0.0, 1.0)

    def test_uniform_requires_equal_spacing(self):
        with pytest.raises(BasisError):
            SplineBasis.uniform([0.0, 0.5, 1.5])

    def test_bad_drop_leading(self):
        with pytest.raises(BasisError):
            SplineBasis.clamped([0.5], 0.0, 1.0, drop_leading=3)


class TestEvaluation:
    def test_partition_of_unity_clamped(self):
        b = SplineBasis.clamped([0.35, 0.6, 0.85, 1.1], 0.0, 1.5)
        rng = np.random.default_rng(0)
        xs = rng.uniform(0.0, 1.5, 1000)
        sums = b.eval(xs).sum(axis=1)
        assert np.abs(sums - 1.0).max() < 1e-12

    def test_nonnegative_inside(self):
        b = SplineBasis.clamped([0.35, 0.6, 0.85, 1.1], 0.0, 1.5)
        xs = np.linspace(0.0, 1.5, 257)
        assert b.eval(xs).min() >= -1e-14

    def test_zero_outside_support(self):
        b = SplineBasis.clamped([0.5], 0.0, 1.0)
        assert np.all(b.eval(np.array([-0.2, 1.3])) == 0.0)
        assert np.all(b.eval(np.array([-0.2, 1.3]), deriv=1) == 0.0)

    def test_matches_de_boor_oracle_at_half(self):
        # fixed values computed by the Cox-de Boor recursion oracle
        b = SplineBasis.clamped([0.35, 0.6, 0.85, 1.1], 0.0, 1.5)
        got = b.eval(0.5)
        want = basis_matrix_oracle(b, [0.5])[0]
        assert np.abs(got - want).max() < 1e-12

    @pytest.mark.parametrize("deriv", [0, 1, 2])
    def test_matches_de_boor_oracle_grid(self, deriv):
        b = SplineBasis.uniform([0.35, 0.6, 0.85, 1.1])
        xs = np.linspace(-0.3, 1.7, 41)
        got = b.eval(xs, deriv=deriv)
        want = basis_matrix_oracle(b, xs, deriv=deriv)
        assert np.abs(got - want).max() < 1e-11

    def test_drop_leading_zeroes_value_and_slope_at_lo(self):
        b = SplineBasis.clamped([0.75, 1.5, 2.25], 0.0, 3.0, drop_leading=2)
        beta = np.ones(b.M)
        assert b.eval(0.0) @ beta == 0.0
        assert b.eval(0.0, deriv=1) @ beta == 0.0
        # second derivative is not constrained
        assert abs(b.eval(0.0, deriv=2) @ beta) > 0.0

    def test_derivative_consistency_finite_difference(self):
        b = SplineBasis.uniform([0.35, 0.6, 0.85, 1.1])
        xs = np.array([0.2, 0.5, 0.7, 0.95, 1.25])  # away from knots
        e = 1e-6
        fd = (b.eval(xs + e) - b.eval(xs - e)) / (2 * e)
        d1 = b.eval(xs, deriv=1)
        denom = np.maximum(np.abs(d1), 1.0)
        assert (np.abs(fd - d1) / denom).max() < 1e-6

    def test_local_support(self):
        b = SplineBasis.clamped([0.25, 0.5, 0.75], 0.0, 1.0)
        t = b.knot_vector
        xs = np.linspace(0.0, 1.0, 501)
        vals = b.eval(xs)
        for j in range(b.M):
            lo, hi = t[j], t[j + b.degree + 1]
            outside = (xs < lo - 1e-12) | (xs > hi + 1e-12)
            assert np.all(vals[outside, j] == 0.0)

    def test_rejects_nonfinite_x(self):
        b = SplineBasis.clamped([0.5], 0.0, 1.0)
        with pytest.raises(BasisError):
            b.eval(np.array([0.1, np.nan]))

    def test_rejects_deriv_above_degree(self):
        b = SplineBasis.clamped([0.5], 0.0, 1.0)
        with pytest.raises(BasisError):
            b.eval(0.3, deriv=3)

    def test_eval_basis_alias(self):
        b = SplineBasis.clamped([0.5], 0.0, 1.0)
        assert np.array_equal(eval_basis(b, 0.3, 1), b.eval(0.3, deriv=1))


class TestPenalty:
    def test_zero_lambda_gives_zero_matrix(self):
        b = SplineBasis.uniform([0.35, 0.6, 0.85, 1.1])
        P = build_flatness_penalty(b, A=0.6, lambda_R=0.0)
        assert np.all(P.B == 0.0)

    def test_gram_matrix_psd_on_random_vectors(self):
        b = SplineBasis.clamped([0.5, 1.0, 1.5], 0.0, 2.0)
        P = build_flatness_penalty(b, A=0.7, lambda_R=3.0)
        assert np.allclose(P.B, P.B.T)
        rng = np.random.default_rng(1)
        for _ in range(10):
            v = rng.standard_normal(b.M)
            assert v @ P.B @ v >= -1e-12

    def test_matches_trapezoid_oracle(self):
        # single knot span fully inside (A, 2A)
        b = SplineBasis.clamped([0.5, 1.0, 1.5], 0.0, 2.0)
        A = 0.55
        P = build_flatness_penalty(b, A=A, lambda_R=2.0)
        want = trapezoid_gram_oracle(b, A, 2.0)
        scale = np.abs(want).max()
        assert np.abs(P.B - want).max() / scale < 1e-8

    def test_quadratic_form_equals_integral_of_squared_derivative(self):
        b = SplineBasis.uniform([0.35, 0.6, 0.85, 1.1])
        A = 0.5
        lam = 7.0
        P = build_flatness_penalty(b, A=A, lambda_R=lam)
        rng = np.random.default_rng(3)
        v = rng.standard_normal(b.M)
        xs = np.linspace(max(A, b.lo), min(2 * A, b.hi), 200_001)
        dsq = (b.eval(xs, deriv=1) @ v) ** 2
        want = lam * np.trapezoid(dsq, xs)
        assert v @ P.B @ v == pytest.approx(want, rel=1e-7)

    def test_requires_positive_A(self):
        b = SplineBasis.uniform([0.35, 0.6, 0.85, 1.1])
        with pytest.raises(BasisError):
            build_flatness_penalty(b, A=0.0, lambda_R=1.0)

    def test_penalty_matrix_validates_symmetry_and_psd(self):
        with pytest.raises(BasisError):
            PenaltyMatrix(np.array([[0.0, 1.0], [0.0, 0.0]]))
        with pytest.raises(BasisError):
            PenaltyMatrix(np.array([[-1.0, 0.0], [0.0, 1.0]]))


class TestSerialization:
    def test_clamped_roundtrip_uses_spec_keys(self):
        b = SplineBasis.clamped([0.4, 0.8], 0.1, 1.2, drop_leading=1)
        d = b.to_json_dict()
        assert set(d) == {"degree", "interior_knots", "lo", "hi", "drop_leading"}
        b2 = SplineBasis.from_json(json.dumps(d))
        assert b2 == b

    def test_uniform_roundtrip(self):
        b = SplineBasis.uniform([0.35, 0.6, 0.85, 1.1])
        b2 = SplineBasis.from_json(b.to_json())
        assert b2 == b
        assert b2.M == 4
