"""Block Levenberg-Marquardt updates with Newton-Raphson polish.

One LM sweep linearizes the trajectories once and then updates beta, theta
and a in turn, each block solving its damped normal equations against the
residuals refreshed after the previous accepted block.  A step that would
increase the objective is retried with inflated damping (beta) or halved
(theta, a) and skipped if it cannot decrease, so the recorded loss trace is
nonincreasing in nonadaptive mode.  theta is re-centered to mean zero inside
its accepted step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .basis import PenaltyMatrix
from .data import ParameterState, PenaltySettings
from .dynamics import GradientFunction, TrajectoryDiverged
from .objective import (
    DegenerateVarianceError,
    LossBreakdown,
    loss_from_parts,
    solve_state,
    update_variances,
)


class SingularUpdateError(RuntimeError):
    pass


@dataclass
class FitOptions:
    """Optimizer controls; None fields inherit from PenaltySettings."""

    max_lm_iters: int = 200
    max_nr_iters: int = 5
    tol_rel_obj: float = 1e-8
    tol_param: float = 1e-6
    lambda3_0: float = None
    adaptive_lm: bool = None
    adaptive_nr: bool = None
    a_known: bool = None
    grid_h: float = 5e-4
    blowup_bound: float = 1e6
    gradient_floor: float = 1e-10
    deterministic: bool = True  # fit is deterministic regardless; kept for config files

    def __post_init__(self):
        if self.tol_rel_obj <= 0 or self.tol_param <= 0:
            raise ValueError("tolerances must be positive")

    def to_flat_dict(self):
        out = {}
        for k, v in asdict(self).items():
            out[k] = "" if v is None else v
        return out

    @classmethod
    def from_flat_dict(cls, d):
        kwargs = {}
        fields = {f: t for f, t in cls.__annotations__.items()}
        for k, v in d.items():
            if k not in fields:
                raise ValueError(f"unknown option {k!r}")
            if v == "" or v is None:
                kwargs[k] = None
            elif k in ("max_lm_iters", "max_nr_iters"):
                kwargs[k] = int(v)
            elif k in ("adaptive_lm", "adaptive_nr", "a_known", "deterministic"):
                kwargs[k] = str(v).lower() in ("1", "true", "yes", "on")
            else:
                kwargs[k] = float(v)
        return cls(**kwargs)


@dataclass
class JacobianBlocks:
    """Stacked sensitivity columns at measurement times, (i, l, j) row order."""

    J_beta: np.ndarray  # (m_total, M)
    J_theta: np.ndarray  # (m_total,)
    J_a: np.ndarray  # (m_total,) or None when a is known
    eps: np.ndarray  # (m_total,)
    curve_slices: list
    subject_slices: list
    solution: object = field(default=None, repr=False)
    n_variational: int = 0

    def J_theta_i(self, i):
        return self.J_theta[self.subject_slices[i]]

    def J_a_il(self, c):
        return self.J_a[self.curve_slices[c]]

    def eps_subject(self, i):
        return self.eps[self.subject_slices[i]]

    def eps_curve(self, c):
        return self.eps[self.curve_slices[c]]


@dataclass
class FitResult:
    state: ParameterState
    variances: object
    loss_trace: list
    converged: bool
    n_lm: int
    n_nr: int
    Wn: np.ndarray
    diagnostics: list
    basis: object = None
    pen_effective: PenaltySettings = None
    blocks: JacobianBlocks = field(default=None, repr=False)
    a_known: bool = False
    grid_h: float = 5e-4

    @property
    def g(self):
        return GradientFunction(self.basis, self.state.beta)

    def to_json_dict(self):
        out = {
            "beta": [float(v) for v in self.state.beta],
            "theta": [float(v) for v in self.state.theta],
            "a": [float(v) for v in self.state.a],
            "alpha": float(self.state.alpha),
            "converged": bool(self.converged),
            "n_lm": int(self.n_lm),
            "n_nr": int(self.n_nr),
            "a_known": bool(self.a_known),
            "grid_h": float(self.grid_h),
            "variances": self.variances.as_dict() if self.variances else None,
            "lambda1": self.pen_effective.lambda1 if self.pen_effective else None,
            "lambda2": self.pen_effective.lambda2 if self.pen_effective else None,
            "loss_trace": [lb.as_dict() for lb in self.loss_trace],
            "diagnostics": list(self.diagnostics),
            "basis": self.basis.to_json_dict() if self.basis is not None else None,
            "Wn": None if self.Wn is None else [[float(v) for v in row] for row in self.Wn],
        }
        return out


def assemble_jacobians(ds, state, g, h, a_known=False, blowup_bound=1e6, gradient_floor=1e-10):
    """Sensitivities interpolated to the measurement times, plus residuals."""
    sol = solve_state(ds, state, g.basis, h, blowup_bound)
    n_var = sol.compute_sensitivities(gradient_floor=gradient_floor, prefer_closed=True)
    ci = ds.curve_index_concat
    t = ds.times_concat
    J_a, J_th, J_b = sol.sens_at(ci, t)
    eps = ds.values_concat - sol.values_at(ci, t)
    return JacobianBlocks(
        J_beta=J_b,
        J_theta=J_th,
        J_a=None if a_known else J_a,
        eps=eps,
        curve_slices=ds.curve_slices,
        subject_slices=ds.subject_slices,
        solution=sol,
        n_variational=n_var,
    )


def lm_step_beta(blocks, B, lambda3_j, beta_star):
    """Solve [J'J + lambda3 diag(J'J) + B](beta - beta*) = J'eps - B beta*."""
    if lambda3_j < 0:
        raise ValueError("lambda3 must be nonnegative")
    J = blocks.J_beta
    JtJ = J.T @ J
    A = JtJ + lambda3_j * np.diag(np.diag(JtJ)) + B.B
    rhs = J.T @ blocks.eps - B.B @ beta_star
    delta, _, rank, _ = np.linalg.lstsq(A, rhs, rcond=None)
    if rank < A.shape[0] or not np.all(np.isfinite(delta)):
        raise SingularUpdateError(
            f"beta normal equations singular (rank {rank} < {A.shape[0]}) even with damping"
        )
    return beta_star + delta


def lm_step_theta(blocks, lambda2, theta_star):
    """Per-subject scalar ridge solves followed by re-centering to mean zero."""
    if lambda2 < 0:
        raise ValueError("lambda2 must be nonnegative")
    theta_new = np.empty_like(theta_star)
    for i in range(len(theta_star)):
        Ji = blocks.J_theta_i(i)
        den = float(Ji @ Ji) + lambda2
        if den <= 0.0:
            raise SingularUpdateError(f"theta update degenerate for subject index {i}")
        num = float(Ji @ blocks.eps_subject(i)) - lambda2 * theta_star[i]
        theta_new[i] = theta_star[i] + num / den
    return theta_new - theta_new.mean()


def lm_step_a(blocks, lambda1, state):
    """Per-curve scalar ridge solves toward the running mean alpha*."""
    if lambda1 < 0:
        raise ValueError("lambda1 must be nonnegative")
    if blocks.J_a is None:
        raise SingularUpdateError("a update requested but initial conditions are known")
    a_star = state.a
    alpha_star = float(np.mean(a_star))
    a_new = np.empty_like(a_star)
    for c in range(len(a_star)):
        Jc = blocks.J_a_il(c)
        den = float(Jc @ Jc) + lambda1
        if den <= 0.0:
            raise SingularUpdateError(f"a update degenerate for curve index {c}")
        num = float(Jc @ blocks.eps_curve(c)) + lambda1 * (alpha_star - a_star[c])
        a_new[c] = a_star[c] + num / den
    return a_new, float(np.mean(a_new))


def _resolve(pen, opts):
    lam3 = opts.lambda3_0 if opts.lambda3_0 is not None else pen.lambda3_0
    ad_lm = opts.adaptive_lm if opts.adaptive_lm is not None else pen.adaptive
    ad_nr = opts.adaptive_nr if opts.adaptive_nr is not None else pen.adaptive
    a_known = opts.a_known if opts.a_known is not None else pen.a_known
    return lam3, ad_lm, ad_nr, a_known


def default_init(ds, M):
    """a_il <- first measurement, theta <- 0, beta <- ones."""
    a0 = np.asarray([c.values[0] for _, _, c in ds.curves], dtype=float)
    return ParameterState(
        beta=np.ones(M),
        theta=np.zeros(ds.n),
        a=a0,
        alpha=float(np.mean(a0)),
    )


class _Objective:
    """Shared objective evaluation with working (possibly adaptive) penalties."""

    def __init__(self, ds, basis, B, pen, opts, a_known):
        self.ds = ds
        self.basis = basis
        self.B = B
        self.a_known = a_known
        self.h = opts.grid_h
        self.bound = opts.blowup_bound
        self.lambda1 = pen.lambda1
        self.lambda2 = pen.lambda2

    def pen_now(self):
        return PenaltySettings(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            a_known=self.a_known,
        )

    def evaluate(self, state):
        sol = solve_state(self.ds, state, self.basis, self.h, self.bound)
        fitted = sol.values_at(self.ds.curve_index_concat, self.ds.times_concat)
        eps = self.ds.values_concat - fitted
        lb = loss_from_parts(eps, state, self.pen_now(), self.B, a_known=self.a_known)
        return lb, eps


def _newton_delta(ds, blocks, state, obj):
    """Gauss-Newton step on the joint objective over (beta, theta[, a])."""
    m_tot, M = blocks.J_beta.shape
    n = ds.n
    with_a = blocks.J_a is not None
    P = M + n + (ds.N_total if with_a else 0)
    J = np.zeros((m_tot, P))
    J[:, :M] = blocks.J_beta
    for i, sl in enumerate(blocks.subject_slices):
        J[sl, M + i] = blocks.J_theta[sl]
    if with_a:
        for c, sl in enumerate(blocks.curve_slices):
            J[sl, M + n + c] = blocks.J_a[sl]
    H = J.T @ J
    idx = np.arange(M, M + n)
    H[idx, idx] += obj.lambda2
    H[:M, :M] += obj.B.B
    rhs = J.T @ blocks.eps
    rhs[:M] -= obj.B.B @ state.beta
    rhs[M : M + n] -= obj.lambda2 * state.theta
    if with_a:
        idx_a = np.arange(M + n, P)
        H[idx_a, idx_a] += obj.lambda1
        rhs[M + n :] -= obj.lambda1 * (state.a - float(np.mean(state.a)))
    try:
        delta = np.linalg.solve(H, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularUpdateError(f"Newton system singular: {exc}") from exc
    if not np.all(np.isfinite(delta)):
        raise SingularUpdateError("Newton step not finite")
    return delta


def _apply_joint(state, delta, t, ds, with_a):
    M = len(state.beta)
    n = len(state.theta)
    new = state.copy()
    new.beta = state.beta + t * delta[:M]
    new.theta = state.theta + t * delta[M : M + n]
    new.theta = new.theta - new.theta.mean()
    if with_a:
        new.a = state.a + t * delta[M + n :]
        new.alpha = float(np.mean(new.a))
    return new


def _max_change(s_old, s_new):
    out = max(
        np.abs(s_new.beta - s_old.beta).max(initial=0.0),
        np.abs(s_new.theta - s_old.theta).max(initial=0.0),
    )
    return max(out, np.abs(s_new.a - s_old.a).max(initial=0.0))


def newton_polish(ds, state, g, pen, B, opts=None):
    """Run the Newton-Raphson phase alone; returns the polished state."""
    opts = opts or FitOptions()
    _, _, ad_nr, a_known = _resolve(pen, opts)
    obj = _Objective(ds, g.basis, B, pen, opts, a_known)
    new_state, _, _, _, _ = _newton_phase(ds, state, obj, opts, ad_nr, pen)
    return new_state


def _newton_phase(ds, state, obj, opts, adaptive, pen):
    diagnostics = []
    trace = []
    lb, eps = obj.evaluate(state)
    n_steps = 0
    converged = False
    basisg = GradientFunction(obj.basis, state.beta)
    for k in range(opts.max_nr_iters):
        if adaptive:
            try:
                var = update_variances(ds, state, eps, obj.basis.M)
                obj.lambda1, obj.lambda2 = var.lambda1, var.lambda2
                lb, _ = obj.evaluate(state)  # objective changed with the weights
            except DegenerateVarianceError as exc:
                diagnostics.append(f"adaptive NR update refused: {exc}")
        basisg = GradientFunction(obj.basis, state.beta)
        blocks = assemble_jacobians(
            ds, state, basisg, obj.h,
            a_known=obj.a_known, blowup_bound=obj.bound,
            gradient_floor=opts.gradient_floor,
        )
        try:
            delta = _newton_delta(ds, blocks, state, obj)
        except SingularUpdateError as exc:
            diagnostics.append(f"NR step {k + 1}: {exc}; falling back to one LM sweep")
            state, lb, eps, sw_diag = _lm_sweep(
                ds, state, obj, opts, lambda3_j=1.0, pen=pen, adaptive=False,
                prev=(lb, eps), blocks=blocks,
            )
            diagnostics.extend(sw_diag)
            trace.append(lb)
            n_steps += 1
            continue
        t = 1.0
        accepted = None
        while t >= 2.0**-20:
            trial = _apply_joint(state, delta, t, ds, blocks.J_a is not None)
            try:
                lb_t, eps_t = obj.evaluate(trial)
            except TrajectoryDiverged:
                t *= 0.5
                continue
            if lb_t.total <= lb.total:
                accepted = (trial, lb_t, eps_t)
                break
            t *= 0.5
        n_steps += 1
        if accepted is None:
            diagnostics.append(f"NR step {k + 1}: no decreasing step; stopping")
            converged = True
            break
        prev_total = lb.total
        change = _max_change(state, accepted[0])
        state, lb, eps = accepted
        trace.append(lb)
        rel = abs(prev_total - lb.total) / max(abs(prev_total), 1e-300)
        if rel < opts.tol_rel_obj or change < opts.tol_param:
            converged = True
            break
    return state, (trace, n_steps, converged), lb, eps, diagnostics


def _lm_sweep(ds, state, obj, opts, lambda3_j, pen, adaptive, prev=None, blocks=None):
    """One beta -> theta -> a sweep with per-block acceptance checks."""
    diagnostics = []
    if prev is None:
        lb, eps = obj.evaluate(state)
    else:
        lb, eps = prev
    basisg = GradientFunction(obj.basis, state.beta)
    if blocks is None:
        blocks = assemble_jacobians(
            ds, state, basisg, obj.h,
            a_known=obj.a_known, blowup_bound=obj.bound,
            gradient_floor=opts.gradient_floor,
        )
    if blocks.n_variational:
        diagnostics.append(
            f"{blocks.n_variational} curve(s) used the variational sensitivity fallback"
        )
    if blocks.solution is not None and bool(np.any(blocks.solution.left_support)):
        diagnostics.append("some trajectories left the basis support (frozen where g=0)")

    # beta block: retry with inflated damping if the objective would increase
    lam3 = lambda3_j
    last_step = 0.0
    for attempt in range(9):
        try:
            beta_new = lm_step_beta(blocks, obj.B, lam3, state.beta)
        except SingularUpdateError as exc:
            diagnostics.append(f"beta step aborted: {exc}")
            beta_new = None
            break
        last_step = float(np.abs(beta_new - state.beta).max(initial=0.0))
        trial = state.copy()
        trial.beta = beta_new
        try:
            lb_t, eps_t = obj.evaluate(trial)
        except TrajectoryDiverged as exc:
            diagnostics.append(f"beta step diverged ({exc}); inflating damping")
            lam3 = max(lam3, 1e-6) * 10.0
            continue
        if lb_t.total <= lb.total:
            state, lb, eps = trial, lb_t, eps_t
            blocks.eps = eps
            break
        lam3 = max(lam3, 1e-6) * 10.0
    else:
        if last_step > opts.tol_param:
            diagnostics.append("beta step rejected after damping retries")

    # theta block (re-centering included in the accepted step)
    theta_prop = None
    try:
        theta_prop = lm_step_theta(blocks, obj.lambda2, state.theta)
    except SingularUpdateError as exc:
        diagnostics.append(f"theta step aborted: {exc}")
    if theta_prop is not None:
        dtheta = theta_prop - state.theta
        t = 1.0
        for attempt in range(9):
            trial = state.copy()
            trial.theta = state.theta + t * dtheta
            trial.theta = trial.theta - trial.theta.mean()
            try:
                lb_t, eps_t = obj.evaluate(trial)
            except TrajectoryDiverged:
                t *= 0.5
                continue
            if lb_t.total <= lb.total:
                state, lb, eps = trial, lb_t, eps_t
                blocks.eps = eps
                break
            t *= 0.5
        else:
            if np.abs(dtheta).max(initial=0.0) > opts.tol_param:
                diagnostics.append("theta step rejected after halving retries")

    # a block
    if not obj.a_known:
        try:
            a_prop, _ = lm_step_a(blocks, obj.lambda1, state)
        except SingularUpdateError as exc:
            diagnostics.append(f"a step aborted: {exc}")
            a_prop = None
        if a_prop is not None:
            da = a_prop - state.a
            t = 1.0
            for attempt in range(9):
                trial = state.copy()
                trial.a = state.a + t * da
                trial.alpha = float(np.mean(trial.a))
                try:
                    lb_t, eps_t = obj.evaluate(trial)
                except TrajectoryDiverged:
                    t *= 0.5
                    continue
                if lb_t.total <= lb.total:
                    state, lb, eps = trial, lb_t, eps_t
                    blocks.eps = eps
                    break
                t *= 0.5
            else:
                if np.abs(da).max(initial=0.0) > opts.tol_param:
                    diagnostics.append("a step rejected after halving retries")
    return state, lb, eps, diagnostics


def fit(ds, basis, B=None, pen=None, opts=None, init=None):
    """Full estimation: LM sweeps with lambda3_j = lambda3_0/j, then NR polish.

    Non-convergence is reported in the result, not raised.
    """
    opts = opts or FitOptions()
    pen = pen or PenaltySettings(lambda1=0.0, lambda2=0.0)
    B = B if B is not None else PenaltyMatrix.none(basis.M)
    if B.B.shape != (basis.M, basis.M):
        raise ValueError("penalty matrix size does not match the basis dimension")
    lam3_0, ad_lm, ad_nr, a_known = _resolve(pen, opts)
    if init is None:
        if a_known:
            raise ValueError("a_known requires an init supplying the known initial conditions")
        state = default_init(ds, basis.M)
    else:
        state = init.copy()
        if len(state.beta) != basis.M:
            raise ValueError("init.beta length does not match the basis")
    if len(state.a) != ds.N_total or len(state.theta) != ds.n:
        raise ValueError("init dimensions do not match the dataset")

    obj = _Objective(ds, basis, B, pen, opts, a_known)
    diagnostics = []
    try:
        lb, eps = obj.evaluate(state)
    except TrajectoryDiverged as exc:
        raise TrajectoryDiverged(f"initial state diverges: {exc}") from exc
    trace = [lb]
    lm_converged = False
    n_lm = 0
    for j in range(1, opts.max_lm_iters + 1):
        if ad_lm and j > 1:
            try:
                var = update_variances(ds, state, eps, basis.M)
                obj.lambda1, obj.lambda2 = var.lambda1, var.lambda2
                lb, eps = obj.evaluate(state)
            except DegenerateVarianceError as exc:
                msg = f"adaptive LM update refused: {exc}"
                if msg not in diagnostics:
                    diagnostics.append(msg)
        prev_state = state
        prev_total = lb.total
        state, lb, eps, sw_diag = _lm_sweep(
            ds, state, obj, opts, lambda3_j=lam3_0 / j, pen=pen, adaptive=ad_lm,
            prev=(lb, eps),
        )
        for msg in sw_diag:
            if msg not in diagnostics:
                diagnostics.append(msg)
        trace.append(lb)
        n_lm = j
        rel = abs(prev_total - lb.total) / max(abs(prev_total), 1e-300)
        if rel < opts.tol_rel_obj and _max_change(prev_state, state) < opts.tol_param:
            lm_converged = True
            break

    state, (nr_trace, n_nr, nr_converged), lb, eps, nr_diag = _newton_phase(
        ds, state, obj, opts, ad_nr, pen
    )
    trace.extend(nr_trace)
    for msg in nr_diag:
        if msg not in diagnostics:
            diagnostics.append(msg)

    g_final = GradientFunction(basis, state.beta)
    blocks = assemble_jacobians(
        ds, state, g_final, obj.h,
        a_known=a_known, blowup_bound=obj.bound, gradient_floor=opts.gradient_floor,
    )
    blocks.eps = eps
    variances = None
    try:
        variances = update_variances(ds, state, eps, basis.M)
    except DegenerateVarianceError as exc:
        diagnostics.append(f"variance estimates unavailable: {exc}")

    Wn = None
    from .inference import InferenceError, info_matrices_from_blocks

    try:
        infos = info_matrices_from_blocks(blocks, ds, obj.lambda2, B)
        Wn = infos.Wn
    except InferenceError as exc:
        diagnostics.append(f"Wn unavailable: {exc}")

    pen_eff = PenaltySettings(
        lambda1=obj.lambda1,
        lambda2=obj.lambda2,
        lambda3_0=lam3_0,
        adaptive=pen.adaptive,
        a_known=a_known,
    )
    return FitResult(
        state=state,
        variances=variances,
        loss_trace=trace,
        converged=bool(lm_converged or nr_converged),
        n_lm=n_lm,
        n_nr=n_nr,
        Wn=Wn,
        diagnostics=diagnostics,
        basis=basis,
        pen_effective=pen_eff,
        blocks=blocks,
        a_known=a_known,
        grid_h=opts.grid_h,
    )
