"""Approximate leave-one-curve-out CV, its exact refit oracle, model ranking,
and the stepwise-regression knot-candidate heuristic.

The approximate score corrects the full-data estimates for each dropped curve
by one Newton step computed from byproducts of the fit:

    theta_i^(-il) ~= theta_i - (D_ii + lambda2)^{-1} * J_theta,il' eps_il
    beta^(-il)    ~= beta    - (A_n + B)^{-1}        * J_beta,il'  eps_il

then re-estimates the dropped curve's initial condition by the scalar ridge
problem min_a sum_j [Y - X(t_j; a, theta~, beta~)]^2 + lambda1 (a - alpha)^2
and sums the prediction losses.  No trajectories are re-solved beyond that
scalar minimization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import PenaltyMatrix, build_flatness_penalty
from .data import DataError, ParameterState
from .dynamics import solve_batch
from .optimizer import FitOptions, default_init, fit


@dataclass
class CVReport:
    score: float
    per_curve: list  # (subject_id, curve_id, contribution)
    model_desc: dict
    n_correction_failures: int = 0
    notes: list = field(default_factory=list)

    def to_json_dict(self):
        return {
            "score": float(self.score),
            "per_curve": [
                {"subject_id": s, "curve_id": c, "contribution": float(v)}
                for s, c, v in self.per_curve
            ],
            "model_desc": self.model_desc,
            "n_correction_failures": int(self.n_correction_failures),
            "notes": list(self.notes),
        }


def _model_desc(basis, B, pen):
    return {
        "basis": basis.to_json_dict(),
        "A": None if B is None else B.A,
        "lambda_R": None if B is None else B.lambda_R,
        "lambda1": pen.lambda1,
        "lambda2": pen.lambda2,
    }


def _ridge_a_newton(ds, basis, betas, thetas, a0, lambda1, alpha_hat, h,
                    a_fixed=False, max_iter=10, tol=1e-8, grid_points=41):
    """Batched minimization of the per-curve initial-condition ridge problem.

    Each curve has its own (beta, theta).  The scalar problems can be
    multimodal, so a coarse sweep over a shared grid of starting values picks
    the basin before the damped Gauss-Newton iteration refines it.  Returns
    (a, per-curve prediction SSE).
    """
    C = len(a0)
    ci = ds.curve_index_concat
    t = ds.times_concat
    y = ds.values_concat

    def evaluate(a_vec):
        sol = solve_batch(basis, betas, a_vec, thetas, h)
        eps = y - sol.values_at(ci, t)
        sse = np.zeros(C)
        np.add.at(sse, ci, eps * eps)
        obj = sse + lambda1 * (a_vec - alpha_hat) ** 2
        return sol, eps, sse, obj

    a = a0.copy()
    sol, eps, sse, obj = evaluate(a)
    if a_fixed:
        return a, sse
    vmin, vmax = float(y.min()), float(y.max())
    span = max(vmax - vmin, 1e-6)
    for v in np.linspace(vmin - 0.75 * span, vmax + 0.25 * span, grid_points):
        sol_v, eps_v, sse_v, obj_v = evaluate(np.full(C, v))
        better = obj_v < obj
        if np.any(better):
            a = np.where(better, v, a)
            sse = np.where(better, sse_v, sse)
            obj = np.where(better, obj_v, obj)
    sol, eps, sse, obj = evaluate(a)
    for _ in range(max_iter):
        sol.compute_sensitivities()
        J_a, _, _ = sol.sens_at(ci, t)
        num = np.zeros(C)
        den = np.zeros(C)
        np.add.at(num, ci, J_a * eps)
        np.add.at(den, ci, J_a * J_a)
        num += lambda1 * (alpha_hat - a)
        den += lambda1
        delta = np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 0.0)
        if np.abs(delta).max(initial=0.0) < tol:
            break
        step = np.ones(C)
        for _halve in range(12):
            trial = a + step * delta
            sol_t, eps_t, sse_t, obj_t = evaluate(trial)
            worse = obj_t > obj
            if not np.any(worse):
                break
            step[worse] *= 0.5
        improved = obj_t <= obj
        if np.all(improved):
            a, sol, eps, sse, obj = trial, sol_t, eps_t, sse_t, obj_t
        elif np.any(improved):
            a = np.where(improved, trial, a)
            sol, eps, sse, obj = evaluate(a)
        else:
            break
    return a, sse


def approx_cv(ds, fit_result, g=None, pen=None, B=None, h=None):
    """Approximate leave-one-curve-out CV score from fit byproducts."""
    state = fit_result.state
    basis = fit_result.basis
    pen = pen if pen is not None else fit_result.pen_effective
    B = B if B is not None else PenaltyMatrix.none(basis.M)
    h = h if h is not None else fit_result.grid_h
    blocks = fit_result.blocks
    if blocks is None:
        raise ValueError("fit result carries no Jacobian blocks")
    notes = []
    n_fail = 0
    M = basis.M
    C = ds.N_total

    if C == 1:
        sse = float(blocks.eps @ blocks.eps)
        i, l, c = ds.curves[0]
        notes.append(
            "single curve: leave-one-curve-out is degenerate; returning the in-sample prediction loss"
        )
        return CVReport(
            score=sse,
            per_curve=[(ds.subjects[i].id, c.id, sse)],
            model_desc=_model_desc(basis, B, pen),
            notes=notes,
        )

    J = blocks.J_beta
    An = J.T @ J
    H_beta = An + B.B
    Dn = np.asarray([float(blocks.J_theta_i(i) @ blocks.J_theta_i(i)) for i in range(ds.n)])

    # per-curve gradients of the prediction loss at the full-data optimum
    grads_beta = np.empty((C, M))
    grads_theta = np.empty(C)
    for c, sl in enumerate(ds.curve_slices):
        grads_beta[c] = J[sl].T @ blocks.eps[sl]
        grads_theta[c] = float(blocks.J_theta[sl] @ blocks.eps[sl])

    try:
        corr_beta = np.linalg.solve(H_beta, grads_beta.T).T
    except np.linalg.LinAlgError:
        corr_beta = np.zeros((C, M))
        n_fail += C
        notes.append("beta-correction Hessian singular; corrections degraded to zero")
    betas_t = state.beta[None, :] - corr_beta

    den_theta = Dn[ds.subject_of_curve] + pen.lambda2
    good = den_theta > 0.0
    if not np.all(good):
        n_fail += int(np.count_nonzero(~good))
        notes.append("theta-correction denominator zero for some curves; degraded to zero")
    corr_theta = np.where(good, grads_theta / np.where(good, den_theta, 1.0), 0.0)
    thetas_t = state.theta[ds.subject_of_curve] - corr_theta

    a_fixed = fit_result.a_known
    a_t, sse = _ridge_a_newton(
        ds, basis, betas_t, thetas_t, state.a.copy(),
        pen.lambda1 if not a_fixed else 0.0,
        state.alpha, h, a_fixed=a_fixed,
    )
    per_curve = []
    for c, (i, l, curve) in enumerate(ds.curves):
        per_curve.append((ds.subjects[i].id, curve.id, float(sse[c])))
    score = float(sum(v for _, _, v in per_curve))
    return CVReport(
        score=score,
        per_curve=per_curve,
        model_desc=_model_desc(basis, B, pen),
        n_correction_failures=n_fail,
        notes=notes,
    )


def exact_cv(ds, basis, B=None, pen=None, opts=None, init=None, size_limit=500):
    """Exact leave-one-curve-out CV by full refits (small instances only)."""
    if ds.m_total > size_limit:
        raise ValueError(
            f"exact CV guarded to m_total <= {size_limit} (dataset has {ds.m_total})"
        )
    opts = opts or FitOptions()
    B = B if B is not None else PenaltyMatrix.none(basis.M)
    notes = []
    n_skipped = 0
    per_curve = []
    a_known = opts.a_known if opts.a_known is not None else (pen.a_known if pen else False)
    for c, (i, l, curve) in enumerate(ds.curves):
        reduced = ds.drop_curve(c)
        red_init = None
        if init is not None:
            keep = [k for k in range(ds.N_total) if k != c]
            subj_kept = sorted({ds.subject_of_curve[k] for k in keep})
            red_init = ParameterState(
                beta=init.beta.copy(),
                theta=init.theta[subj_kept].copy(),
                a=init.a[keep].copy(),
                alpha=float(np.mean(init.a[keep])),
            )
        res = fit(reduced, basis, B, pen, opts, init=red_init)
        if not res.converged:
            n_skipped += 1
            notes.append(
                f"drop of curve {curve.id} (subject {ds.subjects[i].id}): refit did not converge; skipped"
            )
            continue
        # theta for the held-out curve's subject in the reduced fit
        sid = ds.subjects[i].id
        red_sids = [s.id for s in reduced.subjects]
        if sid in red_sids:
            theta_i = float(res.state.theta[red_sids.index(sid)])
        else:
            theta_i = 0.0
            notes.append(f"subject {sid} emptied by the drop; theta=0 used for prediction")
        one = _SingleCurveView(curve)
        if a_known:
            a0 = np.array([init.a[c]]) if init is not None else np.array([curve.values[0]])
        else:
            a0 = np.array([curve.values[0]])
        a_hat, sse = _ridge_a_newton(
            one, basis,
            res.state.beta[None, :], np.array([theta_i]), a0,
            (pen.lambda1 if pen else 0.0) if not a_known else 0.0,
            res.state.alpha, opts.grid_h, a_fixed=a_known,
        )
        per_curve.append((ds.subjects[i].id, curve.id, float(sse[0])))
    if not per_curve:
        raise RuntimeError("no leave-one-curve-out refit converged")
    if n_skipped:
        notes.append(f"score computed over {len(per_curve)} of {ds.N_total} drops")
    score = float(sum(v for _, _, v in per_curve))
    return CVReport(
        score=score,
        per_curve=per_curve,
        model_desc=_model_desc(basis, B, pen if pen else _nopen()),
        n_correction_failures=n_skipped,
        notes=notes,
    )


def _nopen():
    from .data import PenaltySettings

    return PenaltySettings(lambda1=0.0, lambda2=0.0)


class _SingleCurveView:
    """Minimal dataset-like view of one curve for the ridge minimization."""

    def __init__(self, curve):
        self.curve_index_concat = np.zeros(curve.m, dtype=int)
        self.times_concat = curve.times
        self.values_concat = curve.values


@dataclass
class ModelCandidate:
    basis: object
    A: float = None
    lambda_R: float = 0.0
    label: str = None

    def penalty(self):
        if self.lambda_R and self.lambda_R > 0.0:
            return build_flatness_penalty(self.basis, self.A, self.lambda_R)
        return PenaltyMatrix.none(self.basis.M)

    def describe(self):
        lbl = self.label or f"M={self.basis.M}"
        return {"label": lbl, "M": self.basis.M, "A": self.A, "lambda_R": self.lambda_R}


@dataclass
class CandidateResult:
    candidate: ModelCandidate
    report: CVReport
    fit_result: object
    converged: bool
    rank: int = None

    @property
    def score(self):
        return self.report.score


def select_model(ds, candidates, pen, opts=None, a_true=None):
    """Fit and score every candidate; rank ascending by approximate CV.

    Non-convergent candidates keep their score but rank after all convergent
    ones ("No convergence").  ``a_true`` supplies known initial conditions
    when the options demand a_known.
    """
    if not candidates:
        raise ValueError("need at least one candidate")
    opts = opts or FitOptions()
    a_known = opts.a_known if opts.a_known is not None else pen.a_known
    results = []
    for cand in candidates:
        B = cand.penalty()
        init = None
        if a_known:
            if a_true is None:
                raise ValueError("a_known selection requires a_true")
            init = ParameterState(
                beta=np.ones(cand.basis.M),
                theta=np.zeros(ds.n),
                a=np.asarray(a_true, dtype=float),
                alpha=float(np.mean(a_true)),
            )
        res = fit(ds, cand.basis, B, pen, opts, init=init)
        report = approx_cv(ds, res, pen=res.pen_effective, B=B)
        report.model_desc.update(cand.describe())
        if not res.converged:
            report.notes.append("No convergence")
        results.append(CandidateResult(cand, report, res, res.converged))
    if all(not r.converged for r in results):
        raise RuntimeError("no candidate converged")
    order = sorted(
        range(len(results)),
        key=lambda k: (not results[k].converged, results[k].score, k),
    )
    for rank, k in enumerate(order, start=1):
        results[k].rank = rank
    return [results[k] for k in order]


# -- stepwise-regression knot heuristic -------------------------------------


@dataclass
class StepwiseResult:
    selected_terms: list  # e.g. ["x^2", "knot:3.0"]
    selected_knots: np.ndarray
    coef: np.ndarray
    criterion: str
    criterion_value: float
    n_points: int

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for term, b in zip(self.selected_terms, self.coef):
            out += b * _term_column(term, x)
        return out


def _term_column(term, x):
    if term == "x^2":
        return x**2
    if term == "x^3":
        return x**3
    k = float(term.split(":", 1)[1])
    return np.clip(x - k, 0.0, None) ** 3


def _criterion_value(rss, n, p, criterion):
    rss = max(rss, 1e-300)
    pen = 2.0 if criterion == "AIC" else np.log(n)
    return n * np.log(rss / n) + pen * p


def stepwise_knot_candidates(ds, theta0, candidate_knots, criterion="AIC"):
    """Forward stepwise regression of re-scaled empirical derivatives.

    Divided differences (Y_{j+1}-Y_j)/(t_{j+1}-t_j), rescaled by e^{-theta0_i},
    are regressed on {x^2, x^3, (x - x_k)_+^3} evaluated at the midpoint
    values (Y_{j+1}+Y_j)/2; terms enter greedily while the criterion improves.
    """
    if criterion not in ("AIC", "BIC"):
        raise ValueError("criterion must be AIC or BIC")
    theta0 = np.asarray(theta0, dtype=float)
    xs = []
    ys = []
    for i, l, c in ds.curves:
        if c.m < 2:
            raise DataError(f"curve {c.id}: stepwise needs at least 2 measurements per curve")
        dv = np.diff(c.values) / np.diff(c.times)
        xs.append((c.values[1:] + c.values[:-1]) / 2.0)
        ys.append(np.exp(-theta0[i]) * dv)
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    n = len(x)
    terms = ["x^2", "x^3"] + [f"knot:{float(k)!r}" for k in np.asarray(candidate_knots, dtype=float)]
    if len(np.unique(x)) < 1:
        raise DataError("no distinct abscissas")

    selected = []
    best_val = _criterion_value(float(y @ y), n, 0, criterion)
    coef = np.zeros(0)
    while True:
        best_term = None
        best_new = best_val
        best_coef = None
        for term in terms:
            if term in selected:
                continue
            cols = [_term_column(t, x) for t in selected + [term]]
            X = np.column_stack(cols)
            if len(np.unique(x)) < X.shape[1]:
                continue
            sol, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
            if rank < X.shape[1]:
                continue
            r = y - X @ sol
            val = _criterion_value(float(r @ r), n, X.shape[1], criterion)
            if val < best_new - 1e-10:
                best_new = val
                best_term = term
                best_coef = sol
        if best_term is None:
            break
        selected.append(best_term)
        best_val = best_new
        coef = best_coef
    if not selected and len(np.unique(x)) < 1:
        raise DataError("fewer distinct abscissas than parameters")
    knots = np.asarray(
        [float(t.split(":", 1)[1]) for t in selected if t.startswith("knot:")]
    )
    return StepwiseResult(
        selected_terms=selected,
        selected_knots=knots,
        coef=np.asarray(coef, dtype=float),
        criterion=criterion,
        criterion_value=float(best_val),
        n_points=n,
    )
