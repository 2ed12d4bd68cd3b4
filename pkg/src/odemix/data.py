"""Dataset container, validation, and the long-format file interface.

The canonical exchange format is a CSV with header
``subject_id,curve_id,time,value``; a JSON mirror of the nested structure is
accepted as well (sniffed by extension).  Raw times outside [0, 1] are
affinely mapped onto [0, 1] and the map is recorded on the dataset.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class Curve:
    id: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise DataError(f"curve {self.id}: times/values must be equal-length vectors")
        if len(self.times) < 1:
            raise DataError(f"curve {self.id}: needs at least one measurement")
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.values))):
            raise DataError(f"curve {self.id}: non-finite entries")
        if np.any(np.diff(self.times) <= 0):
            raise DataError(f"curve {self.id}: times must be strictly increasing")

    @property
    def m(self):
        return len(self.times)


@dataclass
class Subject:
    id: str
    curves: list

    def __post_init__(self):
        if not self.curves:
            raise DataError(f"subject {self.id}: needs at least one curve")


class Dataset:
    """Ragged collection of subjects -> curves -> (time, value) measurements."""

    def __init__(self, subjects, time_scale=1.0, time_offset=0.0):
        if not subjects:
            raise DataError("no measurements")
        self.subjects = list(subjects)
        self.time_scale = float(time_scale)
        self.time_offset = float(time_offset)
        for s in self.subjects:
            for c in s.curves:
                if c.times[0] < 0.0 or c.times[-1] > 1.0:
                    raise DataError(
                        f"curve {c.id}: times outside [0, 1]; load_dataset rescales raw times"
                    )
        self._index()

    def _index(self):
        self.curves = []  # (subject_index, curve_index_within_subject, Curve)
        subj_of = []
        for i, s in enumerate(self.subjects):
            for l, c in enumerate(s.curves):
                self.curves.append((i, l, c))
                subj_of.append(i)
        self.subject_of_curve = np.asarray(subj_of, dtype=int)
        self.m_per_curve = np.asarray([c.m for _, _, c in self.curves], dtype=int)
        self.times_concat = np.concatenate([c.times for _, _, c in self.curves])
        self.values_concat = np.concatenate([c.values for _, _, c in self.curves])
        ends = np.cumsum(self.m_per_curve)
        starts = ends - self.m_per_curve
        self.curve_slices = [slice(int(a), int(b)) for a, b in zip(starts, ends)]
        self.curve_index_concat = np.repeat(np.arange(self.n_curves), self.m_per_curve)
        # contiguous measurement-row ranges per subject (curves are in lex order)
        self.subject_slices = []
        for i in range(self.n):
            rows = [self.curve_slices[c] for c in range(self.n_curves) if subj_of[c] == i]
            self.subject_slices.append(slice(rows[0].start, rows[-1].stop))

    @property
    def n(self):
        return len(self.subjects)

    @property
    def n_curves(self):
        return len(self.curves)

    @property
    def N_total(self):
        return self.n_curves

    @property
    def N_per_subject(self):
        return np.asarray([len(s.curves) for s in self.subjects], dtype=int)

    @property
    def m_total(self):
        return int(self.m_per_curve.sum())

    def m_per_subject(self):
        out = np.zeros(self.n, dtype=int)
        np.add.at(out, self.subject_of_curve, self.m_per_curve)
        return out

    def drop_curve(self, curve_index, drop_empty_subject=True):
        """New Dataset without the given (flat-indexed) curve."""
        i0, l0, _ = self.curves[curve_index]
        subjects = []
        for i, s in enumerate(self.subjects):
            curves = [c for l, c in enumerate(s.curves) if not (i == i0 and l == l0)]
            if curves:
                subjects.append(Subject(s.id, curves))
            elif not drop_empty_subject:
                raise DataError(f"dropping curve empties subject {s.id}")
        return Dataset(subjects, self.time_scale, self.time_offset)

    def __eq__(self, other):
        if not isinstance(other, Dataset) or self.n != other.n:
            return False
        for sa, sb in zip(self.subjects, other.subjects):
            if sa.id != sb.id or len(sa.curves) != len(sb.curves):
                return False
            for ca, cb in zip(sa.curves, sb.curves):
                if ca.id != cb.id:
                    return False
                if not (np.array_equal(ca.times, cb.times) and np.array_equal(ca.values, cb.values)):
                    return False
        return True


@dataclass
class ParameterState:
    """All free parameters of the objective.

    ``a`` is stored flat in the dataset's lexicographic curve order.
    """

    beta: np.ndarray
    theta: np.ndarray
    a: np.ndarray
    alpha: float

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        self.alpha = float(self.alpha)

    def copy(self):
        return ParameterState(self.beta.copy(), self.theta.copy(), self.a.copy(), self.alpha)

    def a_ragged(self, ds):
        """``a`` regrouped per subject, matching the (i, l) structure."""
        out = []
        k = 0
        for s in ds.subjects:
            out.append(self.a[k : k + len(s.curves)])
            k += len(s.curves)
        return out


@dataclass
class PenaltySettings:
    """lambda1 = sigma_eps^2/sigma_a^2, lambda2 = sigma_eps^2/sigma_theta^2."""

    lambda1: float
    lambda2: float
    lambda3_0: float = 1.0
    adaptive: bool = False
    a_known: bool = False

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise DataError("penalty weights must be nonnegative")
        if self.lambda3_0 <= 0:
            raise DataError("lambda3_0 must be positive")


@dataclass
class ValidationReport:
    ok: bool
    problems: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


def validate_for_variance(ds, M):
    """Check the preconditions of the adaptive variance estimators.

    True iff every curve has more than 2 measurements and the residual-variance
    denominator m_total - N_total - n - M is positive.
    """
    problems = []
    for i, l, c in ds.curves:
        if c.m <= 2:
            problems.append(f"curve {c.id} of subject {ds.subjects[i].id} has m={c.m} <= 2")
    dof = ds.m_total - ds.N_total - ds.n - M
    if dof <= 0:
        problems.append(
            f"variance denominator m_total-N_total-n-M = "
            f"{ds.m_total}-{ds.N_total}-{ds.n}-{M} = {dof} <= 0"
        )
    return ValidationReport(not problems, problems)


# -- file interface --------------------------------------------------------


def _normalize_times(rows):
    """Affine map of raw times onto [0, 1] when they exceed that range."""
    tmin = min(r[2] for r in rows)
    tmax = max(r[2] for r in rows)
    if tmin >= 0.0 and tmax <= 1.0:
        return rows, 1.0, 0.0
    scale = tmax - tmin
    if scale <= 0:
        scale = 1.0
    return (
        [(s, c, (t - tmin) / scale, v) for s, c, t, v in rows],
        scale,
        tmin,
    )


def _dataset_from_rows(rows):
    if not rows:
        raise DataError("no measurements")
    rows, scale, offset = _normalize_times(rows)
    seen = set()
    for s, c, t, v in rows:
        key = (s, c, t)
        if key in seen:
            raise DataError(f"duplicate (subject, curve, time) triple {key}")
        seen.add(key)
    subjects = {}
    order = []
    for s, c, t, v in rows:
        if s not in subjects:
            subjects[s] = {}
            order.append(s)
        subjects[s].setdefault(c, []).append((t, v))
    out = []
    for s in order:
        curves = []
        for cid, pts in subjects[s].items():
            pts.sort(key=lambda p: p[0])  # stable sort by time
            times = np.asarray([p[0] for p in pts])
            values = np.asarray([p[1] for p in pts])
            curves.append(Curve(cid, times, values))
        out.append(Subject(s, curves))
    return Dataset(out, time_scale=scale, time_offset=offset)


def load_dataset(path):
    """Load a dataset from CSV (canonical) or its JSON mirror."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise DataError(f"no such file: {path}")
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        rows = []
        for s in doc.get("subjects", []):
            for c in s.get("curves", []):
                for t, v in zip(c["times"], c["values"]):
                    rows.append((str(s["id"]), str(c["id"]), float(t), float(v)))
        return _dataset_from_rows(rows)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError("no measurements")
        expected = ["subject_id", "curve_id", "time", "value"]
        if [h.strip() for h in header] != expected:
            raise DataError(f"expected header {','.join(expected)}, got {','.join(header)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if len(rec) != 4:
                raise DataError(f"line {lineno}: expected 4 fields, got {len(rec)}")
            try:
                t = float(rec[2])
                v = float(rec[3])
            except ValueError as exc:
                raise DataError(f"line {lineno}: non-numeric time/value") from exc
            rows.append((rec[0].strip(), rec[1].strip(), t, v))
    return _dataset_from_rows(rows)


def _fmt(x):
    return repr(float(x))


def save_dataset(ds, path):
    """Write the canonical CSV (or the JSON mirror when path ends in .json)."""
    path = os.fspath(path)
    if path.endswith(".json"):
        doc = {
            "subjects": [
                {
                    "id": s.id,
                    "curves": [
                        {
                            "id": c.id,
                            "times": [float(t) for t in c.times],
                            "values": [float(v) for v in c.values],
                        }
                        for c in s.curves
                    ],
                }
                for s in ds.subjects
            ]
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "curve_id", "time", "value"])
        for s in ds.subjects:
            for c in s.curves:
                for t, v in zip(c.times, c.values):
                    writer.writerow([s.id, c.id, _fmt(t), _fmt(v)])
