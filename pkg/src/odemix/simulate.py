"""Synthetic datasets matching the published simulation design.

True gradient function: 4 cubic B-spline basis functions with knots
(0.35, 0.6, 0.85, 1.1) and coefficients (0.1, 1.2, 1.6, 0.4).  Initial
conditions are scaled chi-square (moment-matched to alpha = 0.25,
sigma_a = 0.05), scale effects are N(0, sigma_theta^2), noise is
N(0, sigma_eps^2), measurement times are sorted Uniform[0, 1], and the
number of measurements per curve is a discrete uniform per regime.

Streams: numpy PCG64 seeded by SeedSequence(seed, spawn_key=(i, 0)) for
subject-level draws and spawn_key=(i, l) with l >= 1 per curve, so
generation is reproducible and independent per (subject, curve).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import SplineBasis
from .data import Curve, Dataset, Subject
from .dynamics import solve_batch

TRUE_BETA = (0.1, 1.2, 1.6, 0.4)
TRUE_KNOTS = (0.35, 0.6, 0.85, 1.1)

RNG_SCHEME = "numpy PCG64 via SeedSequence(seed, spawn_key=(subject, 0|curve))"

REGIMES = ("moderate", "sparse", "very_dense")


@dataclass
class SimDesign:
    n: int = 10
    N: int = 20
    regime: str = "moderate"
    beta_true: tuple = TRUE_BETA
    knots_true: tuple = TRUE_KNOTS
    sigma_theta: float = 0.1
    alpha: float = 0.25
    sigma_a: float = 0.05
    sigma_eps: float = 0.01
    a_dist: str = "chisq_scaled"
    m_low: int = 5
    m_high: int = 20
    h: float = 5e-4

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.a_dist not in ("chisq_scaled", "normal", "fixed"):
            raise ValueError(f"unknown a_dist {self.a_dist!r}")
        if self.m_low < 1 or self.m_high < self.m_low:
            raise ValueError("need 1 <= m_low <= m_high")

    @property
    def c_a(self):
        # moment matching: c_a * k_a = alpha, 2 c_a^2 k_a = sigma_a^2
        return self.sigma_a**2 / (2.0 * self.alpha)

    @property
    def k_a(self):
        return self.alpha / self.c_a

    def basis(self):
        return SplineBasis.uniform(np.asarray(self.knots_true, dtype=float))

    def gradient_truth(self):
        from .dynamics import GradientFunction

        return GradientFunction(self.basis(), np.asarray(self.beta_true, dtype=float))

    def to_json_dict(self):
        return {
            "n": self.n,
            "N": self.N,
            "regime": self.regime,
            "beta_true": [float(v) for v in self.beta_true],
            "knots_true": [float(v) for v in self.knots_true],
            "sigma_theta": self.sigma_theta,
            "alpha": self.alpha,
            "sigma_a": self.sigma_a,
            "sigma_eps": self.sigma_eps,
            "a_dist": self.a_dist,
            "m_low": self.m_low,
            "m_high": self.m_high,
            "h": self.h,
        }

    @classmethod
    def from_json_dict(cls, d):
        d = dict(d)
        d["beta_true"] = tuple(d.get("beta_true", TRUE_BETA))
        d["knots_true"] = tuple(d.get("knots_true", TRUE_KNOTS))
        return cls(**d)


def default_design(regime):
    """Published constants per sampling regime."""
    if regime == "moderate":
        return SimDesign(regime="moderate", m_low=5, m_high=20)
    if regime == "sparse":
        return SimDesign(regime="sparse", m_low=3, m_high=8)
    if regime == "very_dense":
        return SimDesign(
            regime="very_dense", N=1, sigma_theta=0.0, m_low=60, m_high=100
        )
    raise ValueError(f"unknown regime {regime!r}")


def default_estimation_basis(M):
    """The estimation family: M cubic B-splines with knots at 0.1 + j/M."""
    if M < 2:
        raise ValueError("need M >= 2")
    knots = 0.1 + np.arange(1, M + 1) / M
    return SplineBasis.uniform(knots)


@dataclass
class GroundTruth:
    beta: np.ndarray
    knots: np.ndarray
    theta: np.ndarray
    a: np.ndarray  # flat, lexicographic curve order
    seed: int
    design: SimDesign
    noiseless: list = field(default_factory=list)  # per curve, at its own times

    def to_json_dict(self):
        return {
            "beta": [float(v) for v in self.beta],
            "knots": [float(v) for v in self.knots],
            "theta": [float(v) for v in self.theta],
            "a": [float(v) for v in self.a],
            "seed": int(self.seed),
            "design": self.design.to_json_dict(),
            "noiseless": [[float(v) for v in arr] for arr in self.noiseless],
            "rng": RNG_SCHEME,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            beta=np.asarray(d["beta"], dtype=float),
            knots=np.asarray(d["knots"], dtype=float),
            theta=np.asarray(d["theta"], dtype=float),
            a=np.asarray(d["a"], dtype=float),
            seed=int(d["seed"]),
            design=SimDesign.from_json_dict(d["design"]),
            noiseless=[np.asarray(v, dtype=float) for v in d.get("noiseless", [])],
        )


def _draw_a(rng, design):
    if design.a_dist == "chisq_scaled":
        return design.c_a * rng.chisquare(design.k_a)
    if design.a_dist == "normal":
        return design.alpha + design.sigma_a * rng.standard_normal()
    return design.alpha


def generate(design, seed):
    """Generate one dataset plus its ground truth, deterministic given seed."""
    seed = int(seed)
    theta = np.empty(design.n)
    a_list = []
    times_list = []
    noise_list = []
    for i in range(design.n):
        srng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(i, 0))))
        theta[i] = design.sigma_theta * srng.standard_normal()
        for l in range(1, design.N + 1):
            crng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(i, l)))
            )
            m = int(crng.integers(design.m_low, design.m_high + 1))
            t = np.sort(crng.uniform(0.0, 1.0, m))
            if np.any(np.diff(t) == 0.0):
                raise RuntimeError("duplicate measurement times drawn (probability zero)")
            a_list.append(_draw_a(crng, design))
            times_list.append(t)
            noise_list.append(design.sigma_eps * crng.standard_normal(m))

    a = np.asarray(a_list)
    theta_per_curve = np.repeat(theta, design.N)
    basis = design.basis()
    beta = np.asarray(design.beta_true, dtype=float)
    sol = solve_batch(basis, beta, a, theta_per_curve, design.h)
    curve_idx = np.repeat(np.arange(len(a_list)), [len(t) for t in times_list])
    clean = sol.values_at(curve_idx, np.concatenate(times_list))

    subjects = []
    noiseless = []
    pos = 0
    k = 0
    for i in range(design.n):
        curves = []
        for l in range(1, design.N + 1):
            t = times_list[k]
            xs = clean[pos : pos + len(t)]
            ys = xs + noise_list[k]
            noiseless.append(xs.copy())
            curves.append(Curve(str(l), t, ys))
            pos += len(t)
            k += 1
        subjects.append(Subject(str(i + 1), curves))
    ds = Dataset(subjects)
    truth = GroundTruth(
        beta=beta,
        knots=np.asarray(design.knots_true, dtype=float),
        theta=theta,
        a=a,
        seed=seed,
        design=design,
        noiseless=noiseless,
    )
    return ds, truth
