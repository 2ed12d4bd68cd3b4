"""Command-line front end: simulate / fit / select / two-stage / compare.

Every command is a pure function of (input files, flags, seed): repeated runs
produce byte-identical outputs at any --threads setting.  Each output
directory receives exactly one manifest.json recording the command, resolved
configuration, input digests, tool version and seed; wall time is recorded
only when --timing is passed so that default runs stay byte-identical.

Exit codes: 0 success/converged, 1 bad input, 2 model error, 3 fit did not
converge (results are still written).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .basis import BasisError, PenaltyMatrix, SplineBasis, build_flatness_penalty
from .data import DataError, ParameterState, PenaltySettings, load_dataset, save_dataset
from .dynamics import GradientFunction, TrajectoryDiverged
from .inference import InferenceError, InfoMatrices, se_g
from .objective import DegenerateVarianceError
from .optimizer import FitOptions, SingularUpdateError, fit
from .selection import ModelCandidate, approx_cv, select_model
from .simulate import GroundTruth, SimDesign, default_design, generate
from .twostage import TwoStageError, TwoStageOptions, region_ise, two_stage_estimate

EXIT_OK = 0
EXIT_BAD_INPUT = 1
EXIT_MODEL_ERROR = 2
EXIT_NO_CONVERGENCE = 3

DEFAULT_REGIONS = ((-0.5, 0.2), (0.2, 1.0), (1.0, 1.5))


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _fmt(x):
    return repr(float(x))


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(out_dir, command, args, inputs, seed=None, wall=None):
    config = {}
    for k, v in sorted(vars(args).items()):
        if k in ("func", "timing"):
            continue
        if isinstance(v, (list, tuple)):
            v = list(v)
        config[k] = v
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "config": config,
        "input_digests": {os.path.basename(p): _sha256(p) for p in inputs},
        "wall_time_s": wall,
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)


def _outdir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _parse_floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise CliError(f"cannot parse float list {text!r}", EXIT_BAD_INPUT) from exc


def _value_range(ds):
    v = ds.values_concat
    return float(v.min()), float(v.max())


def _build_basis(args, ds):
    drop = args.drop_leading
    if args.knots:
        knots = np.asarray(_parse_floats(args.knots))
        if args.basis == "uniform":
            return SplineBasis.uniform(knots, drop_leading=drop)
        vmin, vmax = _value_range(ds)
        margin = 0.25 * (vmax - vmin)
        lo = args.lo if args.lo is not None else min(vmin - margin, float(knots.min()) - margin)
        hi = args.hi if args.hi is not None else max(vmax + margin, float(knots.max()) + margin)
        return SplineBasis.clamped(knots, lo, hi, drop_leading=drop)
    if args.M:
        if args.basis == "uniform":
            vmin, vmax = _value_range(ds)
            if args.M == 1:
                raise CliError("--M must be at least 2", EXIT_BAD_INPUT)
            knots = np.linspace(vmin, vmax, args.M)
            return SplineBasis.uniform(knots, drop_leading=drop)
        vmin, vmax = _value_range(ds)
        margin = 0.25 * (vmax - vmin)
        lo = args.lo if args.lo is not None else vmin - margin
        hi = args.hi if args.hi is not None else vmax + margin
        n_int = args.M - 4 + drop
        if n_int < 0:
            raise CliError(
                f"--M {args.M} too small for a clamped cubic basis (needs M >= {4 - drop})",
                EXIT_BAD_INPUT,
            )
        interior = np.linspace(lo, hi, n_int + 2)[1:-1]
        return SplineBasis.clamped(interior, lo, hi, drop_leading=drop)
    raise CliError("one of --knots or --M is required", EXIT_BAD_INPUT)


def _load_truth(args, data_path):
    path = args.truth
    if path is None:
        cand = os.path.join(os.path.dirname(os.path.abspath(data_path)), "truth.json")
        path = cand if os.path.exists(cand) else None
    if path is None:
        return None, None
    if not os.path.exists(path):
        raise CliError(f"truth sidecar not found: {path}", EXIT_BAD_INPUT)
    with open(path, encoding="utf-8") as fh:
        truth = GroundTruth.from_json_dict(json.load(fh))
    return truth, path


def _penalties(args):
    return PenaltySettings(
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        lambda3_0=args.lambda3,
        a_known=args.a_known,
    )


def _fit_options(args):
    return FitOptions(
        max_lm_iters=args.max_lm_iters,
        max_nr_iters=args.max_nr_iters,
        tol_rel_obj=args.tol_rel_obj,
        tol_param=args.tol_param,
        lambda3_0=args.lambda3,
        adaptive_lm=args.adaptive_lm,
        adaptive_nr=args.adaptive_nr,
        a_known=args.a_known,
        grid_h=args.grid_h,
    )


def _ghat_grid(args, basis):
    if args.ghat_grid:
        parts = args.ghat_grid.split(":")
        if len(parts) != 3:
            raise CliError("--ghat-grid must be lo:hi:n", EXIT_BAD_INPUT)
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    else:
        lo, hi, n = basis.lo, basis.hi, 201
    return np.linspace(lo, hi, n)


def _write_ghat_csv(path, xs, ghat, se):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "g_hat", "se", "lo95", "hi95"])
        for k in range(len(xs)):
            if se is None or not np.isfinite(se[k]):
                w.writerow([_fmt(xs[k]), _fmt(ghat[k]), "nan", "nan", "nan"])
            else:
                w.writerow(
                    [
                        _fmt(xs[k]),
                        _fmt(ghat[k]),
                        _fmt(se[k]),
                        _fmt(ghat[k] - 2.0 * se[k]),
                        _fmt(ghat[k] + 2.0 * se[k]),
                    ]
                )


# -- simulate ---------------------------------------------------------------


def cmd_simulate(args):
    t0 = time.perf_counter()
    out = _outdir(args)
    design = default_design(args.regime)
    if args.n is not None:
        design.n = args.n
    if args.N is not None:
        design.N = args.N
    if args.m_low is not None:
        design.m_low = args.m_low
    if args.m_high is not None:
        design.m_high = args.m_high
    for name in ("sigma_eps", "sigma_theta", "sigma_a", "alpha"):
        v = getattr(args, name)
        if v is not None:
            setattr(design, name, v)
    if args.grid_h is not None:
        design.h = args.grid_h
    ds, truth = generate(design, args.seed)
    save_dataset(ds, os.path.join(out, "data.csv"))
    _write_json(os.path.join(out, "truth.json"), truth.to_json_dict())
    wall = time.perf_counter() - t0 if args.timing else None
    _write_manifest(out, "simulate", args, [], seed=args.seed, wall=wall)
    print(f"wrote {ds.n} subjects, {ds.N_total} curves, {ds.m_total} measurements to {out}")
    return EXIT_OK


# -- fit ---------------------------------------------------------------------


def _init_from_truth(ds, basis, truth):
    a = np.asarray(truth.a, dtype=float)
    if len(a) != ds.N_total:
        raise CliError("truth sidecar does not match the dataset (curve count)", EXIT_BAD_INPUT)
    return ParameterState(
        beta=np.ones(basis.M),
        theta=np.zeros(ds.n),
        a=a,
        alpha=float(np.mean(a)),
    )


def cmd_fit(args):
    t0 = time.perf_counter()
    out = _outdir(args)
    ds = load_dataset(args.data)
    basis = _build_basis(args, ds)
    pen = _penalties(args)
    opts = _fit_options(args)
    if args.lambdaR > 0.0:
        if args.A is None:
            raise CliError("--lambdaR needs --A", EXIT_BAD_INPUT)
        B = build_flatness_penalty(basis, args.A, args.lambdaR)
    else:
        B = PenaltyMatrix.none(basis.M)
    init = None
    inputs = [args.data]
    if args.a_known:
        truth, tpath = _load_truth(args, args.data)
        if truth is None:
            raise CliError("--a-known requires a truth sidecar (--truth)", EXIT_BAD_INPUT)
        inputs.append(tpath)
        init = _init_from_truth(ds, basis, truth)
    res = fit(ds, basis, B, pen, opts, init=init)
    doc = res.to_json_dict()
    _write_json(os.path.join(out, "fit.json"), doc)
    xs = _ghat_grid(args, basis)
    ghat = GradientFunction(basis, res.state.beta).value(xs)
    se = None
    if res.Wn is not None and res.variances is not None:
        infos = InfoMatrices(An=None, Cn=None, Dn=None, Wn=res.Wn)
        se = se_g(infos, res.variances.sigma_eps2, basis, xs)
    _write_ghat_csv(os.path.join(out, "ghat.csv"), xs, ghat, se)
    wall = time.perf_counter() - t0 if args.timing else None
    _write_manifest(out, "fit", args, inputs, seed=None, wall=wall)
    print(
        f"fit: converged={res.converged} n_lm={res.n_lm} n_nr={res.n_nr} "
        f"total_loss={res.loss_trace[-1].total:.6g}"
    )
    return EXIT_OK if res.converged else EXIT_NO_CONVERGENCE


# -- select -------------------------------------------------------------------


def _candidate_from_spec(spec, ds, index):
    label = spec.get("label", f"cand{index + 1}")
    drop = int(spec.get("drop_leading", 0))
    kind = spec.get("basis", "uniform")
    if "knots" in spec:
        knots = np.asarray(spec["knots"], dtype=float)
        if kind == "uniform":
            basis = SplineBasis.uniform(knots, drop_leading=drop)
        else:
            vmin, vmax = _value_range(ds)
            margin = 0.25 * (vmax - vmin)
            lo = spec.get("lo", min(vmin - margin, float(knots.min()) - margin))
            hi = spec.get("hi", max(vmax + margin, float(knots.max()) + margin))
            basis = SplineBasis.clamped(knots, lo, hi, drop_leading=drop)
    elif "M" in spec:
        vmin, vmax = _value_range(ds)
        M = int(spec["M"])
        if kind == "uniform":
            basis = SplineBasis.uniform(np.linspace(vmin, vmax, M), drop_leading=drop)
        else:
            margin = 0.25 * (vmax - vmin)
            lo = spec.get("lo", vmin - margin)
            hi = spec.get("hi", vmax + margin)
            interior = np.linspace(lo, hi, M - 4 + drop + 2)[1:-1]
            basis = SplineBasis.clamped(interior, lo, hi, drop_leading=drop)
    else:
        raise CliError(f"candidate {label}: needs 'knots' or 'M'", EXIT_BAD_INPUT)
    return ModelCandidate(
        basis=basis,
        A=spec.get("A"),
        lambda_R=float(spec.get("lambda_R", 0.0)),
        label=label,
    )


def _select_one(payload):
    (ds, cand, pen, opts, a_true) = payload
    res = select_model(ds, [cand], pen, opts, a_true=a_true)
    return res[0]


def cmd_select(args):
    t0 = time.perf_counter()
    out = _outdir(args)
    ds = load_dataset(args.data)
    with open(args.candidates_file, encoding="utf-8") as fh:
        specs = json.load(fh)
    if not isinstance(specs, list) or not specs:
        raise CliError("candidates file must be a nonempty JSON list", EXIT_BAD_INPUT)
    candidates = [_candidate_from_spec(s, ds, i) for i, s in enumerate(specs)]
    pen = _penalties(args)
    opts = _fit_options(args)
    inputs = [args.data, args.candidates_file]
    a_true = None
    if args.a_known:
        truth, tpath = _load_truth(args, args.data)
        if truth is None:
            raise CliError("--a-known requires a truth sidecar (--truth)", EXIT_BAD_INPUT)
        inputs.append(tpath)
        a_true = truth.a

    if args.threads > 1 and len(candidates) > 1:
        payloads = [(ds, c, pen, opts, a_true) for c in candidates]
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.threads) as ex:
            singles = list(ex.map(_select_one, payloads))
    else:
        singles = [_select_one((ds, c, pen, opts, a_true)) for c in candidates]
    if all(not r.converged for r in singles):
        raise CliError("no candidate converged", EXIT_MODEL_ERROR)
    order = sorted(
        range(len(singles)),
        key=lambda k: (not singles[k].converged, singles[k].score, k),
    )
    ranked = [singles[k] for k in order]
    for rank, r in enumerate(ranked, start=1):
        r.rank = rank

    rows = []
    for r in ranked:
        d = r.candidate.describe()
        rows.append(
            {
                "rank": r.rank,
                "label": d["label"],
                "M": d["M"],
                "A": d["A"],
                "lambda_R": d["lambda_R"],
                "cv_score": r.score,
                "converged": r.converged,
            }
        )
    _write_json(
        os.path.join(out, "selection.json"),
        {"ranked": rows, "reports": [r.report.to_json_dict() for r in ranked]},
    )
    with open(os.path.join(out, "selection.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "label", "M", "A", "lambda_R", "cv_score", "converged"])
        for row in rows:
            w.writerow(
                [
                    row["rank"],
                    row["label"],
                    row["M"],
                    "" if row["A"] is None else _fmt(row["A"]),
                    _fmt(row["lambda_R"]),
                    _fmt(row["cv_score"]),
                    row["converged"],
                ]
            )
    _print_selection_table(ranked)
    wall = time.perf_counter() - t0 if args.timing else None
    _write_manifest(out, "select", args, inputs, seed=None, wall=wall)
    return EXIT_OK


def _print_selection_table(ranked):
    """Model x (A, lambda_R) grid of CV scores; '*' marks non-convergence."""
    combos = []
    labels = []
    for r in ranked:
        d = r.candidate.describe()
        combo = (d["A"], d["lambda_R"])
        if combo not in combos:
            combos.append(combo)
        if d["label"] not in labels:
            labels.append(d["label"])
    cell = {}
    for r in ranked:
        d = r.candidate.describe()
        mark = "" if r.converged else "*"
        cell[(d["label"], (d["A"], d["lambda_R"]))] = f"{r.score:.6g}{mark}"
    head = ["model"] + [
        ("-" if a is None else f"A={a:g}") + (f",lR={l:g}" if l else "") for a, l in combos
    ]
    widths = [max(len(h), 12) for h in head]
    print("  ".join(h.ljust(w) for h, w in zip(head, widths)))
    for lbl in labels:
        row = [lbl] + [cell.get((lbl, cmb), "") for cmb in combos]
        print("  ".join(str(v).ljust(w) for v, w in zip(row, widths)))
    if any(not r.converged for r in ranked):
        print("* no convergence")


# -- two-stage ----------------------------------------------------------------


def cmd_two_stage(args):
    t0 = time.perf_counter()
    out = _outdir(args)
    ds = load_dataset(args.data)
    opts = TwoStageOptions(stage2=args.stage2.replace("-", "_"))
    basis = None
    if opts.stage2 == "basis":
        basis = _build_basis(args, ds)
    truth, tpath = _load_truth(args, args.data)
    inputs = [args.data]
    if args.ghat_grid:
        parts = args.ghat_grid.split(":")
        if len(parts) != 3:
            raise CliError("--ghat-grid must be lo:hi:n", EXIT_BAD_INPUT)
        grid = np.linspace(float(parts[0]), float(parts[1]), int(parts[2]))
    else:
        vmin, vmax = _value_range(ds)
        grid = np.linspace(vmin, vmax, 201)
    g_hat, info = two_stage_estimate(ds, opts, basis=basis, eval_grid=grid)
    with open(os.path.join(out, "ghat_twostage.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "g_hat"])
        for k in range(len(grid)):
            w.writerow([_fmt(grid[k]), _fmt(g_hat[k])])
    if truth is not None:
        inputs.append(tpath)
        g_true = truth_gradient(truth)
        interp = _GridFn(grid, g_hat)
        ises = region_ise(interp, g_true.value, DEFAULT_REGIONS)
        _write_json(
            os.path.join(out, "ise.json"),
            {
                "regions": [[lo, hi] for lo, hi in DEFAULT_REGIONS],
                "ise": ises,
                "stage2": opts.stage2,
            },
        )
    wall = time.perf_counter() - t0 if args.timing else None
    _write_manifest(out, "two-stage", args, inputs, seed=None, wall=wall)
    print(f"two-stage ({opts.stage2}): wrote g-hat on {len(grid)} grid points")
    return EXIT_OK


def truth_gradient(truth):
    basis = SplineBasis.uniform(truth.knots)
    return GradientFunction(basis, truth.beta)


class _GridFn:
    """Linear interpolation of a gridded estimate, constant extrapolation."""

    def __init__(self, xs, ys):
        self.xs = np.asarray(xs, dtype=float)
        self.ys = np.asarray(ys, dtype=float)

    def __call__(self, x):
        return np.interp(np.asarray(x, dtype=float), self.xs, self.ys)


# -- compare ------------------------------------------------------------------


def _compare_one(payload):
    (path, args_M, pen, opts, stage2, eval_lo, eval_hi) = payload
    ds = load_dataset(path)
    truthp = os.path.join(os.path.dirname(os.path.abspath(path)), "truth.json")
    if not os.path.exists(truthp):
        raise CliError(f"compare requires a truth.json next to {path}", EXIT_BAD_INPUT)
    with open(truthp, encoding="utf-8") as fh:
        truth = GroundTruth.from_json_dict(json.load(fh))
    g_true = truth_gradient(truth)
    from .simulate import default_estimation_basis

    basis = default_estimation_basis(args_M)
    init = None
    if (opts.a_known if opts.a_known is not None else pen.a_known):
        init = ParameterState(
            beta=np.ones(basis.M),
            theta=np.zeros(ds.n),
            a=truth.a,
            alpha=float(np.mean(truth.a)),
        )
    res = fit(ds, basis, PenaltyMatrix.none(basis.M), pen, opts, init=init)
    g_fit = GradientFunction(basis, res.state.beta)
    ts_opts = TwoStageOptions(stage2=stage2)
    grid = np.linspace(eval_lo, eval_hi, 401)
    g2, _ = two_stage_estimate(ds, ts_opts, basis=None, eval_grid=grid)
    rows = []
    for lo, hi in DEFAULT_REGIONS:
        ise_h = region_ise(g_fit.value, g_true.value, [(lo, hi)])[0]
        ise_t = region_ise(_GridFn(grid, g2), g_true.value, [(lo, hi)])[0]
        rows.append(("hierarchical", lo, hi, ise_h, res.converged))
        rows.append(("two_stage", lo, hi, ise_t, True))
    return rows


def cmd_compare(args):
    t0 = time.perf_counter()
    out = _outdir(args)
    pen = _penalties(args)
    opts = _fit_options(args)
    payloads = [
        (p, args.M or 4, pen, opts, args.stage2.replace("-", "_"), -0.5, 1.5)
        for p in args.data
    ]
    if args.threads > 1 and len(payloads) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.threads) as ex:
            all_rows = list(ex.map(_compare_one, payloads))
    else:
        all_rows = [_compare_one(p) for p in payloads]

    per_path = os.path.join(out, "per_replicate_ise.csv")
    with open(per_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replicate", "method", "region_lo", "region_hi", "ise", "converged"])
        for rep, rows in enumerate(all_rows):
            for method, lo, hi, ise, conv in rows:
                w.writerow([rep, method, _fmt(lo), _fmt(hi), _fmt(ise), conv])

    summary = {}
    for rows in all_rows:
        for method, lo, hi, ise, _ in rows:
            summary.setdefault((method, lo, hi), []).append(ise)
    with open(os.path.join(out, "summary.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "region_lo", "region_hi", "mean_ise", "median_ise", "sd_ise"])
        for (method, lo, hi), vals in sorted(summary.items()):
            arr = np.asarray(vals)
            sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
            w.writerow(
                [method, _fmt(lo), _fmt(hi), _fmt(arr.mean()), _fmt(np.median(arr)), _fmt(sd)]
            )
    wall = time.perf_counter() - t0 if args.timing else None
    _write_manifest(out, "compare", args, list(args.data), seed=None, wall=wall)
    print(f"compared {len(all_rows)} replicate(s); summary in {out}/summary.csv")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _add_fit_flags(p):
    p.add_argument("--knots", help="comma-separated knot list")
    p.add_argument("--M", type=int, help="number of basis functions")
    p.add_argument("--basis", choices=("uniform", "clamped"), default="uniform")
    p.add_argument("--drop-leading", dest="drop_leading", type=int, default=0)
    p.add_argument("--lo", type=float, help="clamped-basis lower boundary")
    p.add_argument("--hi", type=float, help="clamped-basis upper boundary")
    p.add_argument("--lambda1", type=float, default=0.04)
    p.add_argument("--lambda2", type=float, default=0.01)
    p.add_argument("--lambda3", type=float, default=1.0)
    p.add_argument(
        "--adaptive-lm", dest="adaptive_lm", action=argparse.BooleanOptionalAction,
        default=False, help="re-estimate lambda1/lambda2 each LM sweep",
    )
    p.add_argument(
        "--adaptive-nr", dest="adaptive_nr", action=argparse.BooleanOptionalAction,
        default=True, help="re-estimate lambda1/lambda2 each NR step",
    )
    p.add_argument("--a-known", dest="a_known", action="store_true", default=False)
    p.add_argument("--truth", help="ground-truth sidecar (default: truth.json next to data)")
    p.add_argument("--A", type=float, help="flatness onset for the lambda_R penalty")
    p.add_argument("--lambdaR", type=float, default=0.0)
    p.add_argument("--grid-h", dest="grid_h", type=float, default=5e-4)
    p.add_argument("--max-lm-iters", dest="max_lm_iters", type=int, default=200)
    p.add_argument("--max-nr-iters", dest="max_nr_iters", type=int, default=5)
    p.add_argument("--tol-rel-obj", dest="tol_rel_obj", type=float, default=1e-8)
    p.add_argument("--tol-param", dest="tol_param", type=float, default=1e-6)
    p.add_argument("--ghat-grid", dest="ghat_grid", help="lo:hi:n grid for the g-hat CSV")


def _add_common(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--timing", action="store_true", help="record wall time in the manifest")
    p.add_argument("--config", help="flat key=value config file (flags override)")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="odemix",
        description="Semiparametric mixed-effects fitting of autonomous dynamical systems",
    )
    ap.add_argument("--version", action="version", version=f"odemix {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--regime", choices=("moderate", "sparse", "very_dense"), default="moderate")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, help="subjects")
    p.add_argument("--N", type=int, help="curves per subject")
    p.add_argument("--m-low", dest="m_low", type=int)
    p.add_argument("--m-high", dest="m_high", type=int)
    p.add_argument("--sigma-eps", dest="sigma_eps", type=float)
    p.add_argument("--sigma-theta", dest="sigma_theta", type=float)
    p.add_argument("--sigma-a", dest="sigma_a", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--grid-h", dest="grid_h", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the hierarchical model")
    p.add_argument("--data", required=True)
    _add_fit_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="rank candidate models by approximate CV")
    p.add_argument("--data", required=True)
    p.add_argument("--candidates-file", dest="candidates_file", required=True)
    _add_fit_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("two-stage", help="two-stage baseline estimate of g")
    p.add_argument("--data", required=True)
    p.add_argument("--stage2", choices=("local-quadratic", "basis"), default="local-quadratic")
    _add_fit_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_two_stage)

    p = sub.add_parser("compare", help="hierarchical vs two-stage region ISEs")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--stage2", choices=("local-quadratic", "basis"), default="local-quadratic")
    _add_fit_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_compare)
    return ap


def _apply_config(ap, argv):
    """Pre-read --config and install its key=value pairs as defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    if not os.path.exists(known.config):
        raise CliError(f"config file not found: {known.config}", EXIT_BAD_INPUT)
    defaults = {}
    with open(known.config, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError(f"bad config line: {line!r}", EXIT_BAD_INPUT)
            k, v = line.split("=", 1)
            k = k.strip().replace("-", "_")
            v = v.strip()
            if v.lower() in ("true", "false"):
                defaults[k] = v.lower() == "true"
            else:
                try:
                    defaults[k] = int(v)
                except ValueError:
                    try:
                        defaults[k] = float(v)
                    except ValueError:
                        defaults[k] = v
    for action in ap._subparsers._group_actions:
        for sp in action.choices.values():
            sp.set_defaults(**{k: v for k, v in defaults.items()})


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        _apply_config(ap, argv)
        args = ap.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DataError, BasisError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (
        TwoStageError,
        InferenceError,
        SingularUpdateError,
        TrajectoryDiverged,
        DegenerateVarianceError,
        ValueError,
        RuntimeError,
    ) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL_ERROR


if __name__ == "__main__":
    sys.exit(main())
