"""Discriminator objective on finite distributions.

A :class:`ToyJointDistribution` places matched and unmatched conditional
masses on a finite support of (vertex, graph) embedding atoms. On it the
expected discriminator log-likelihood, its maximizer and its sensitivity
to conditional perturbations can be computed by direct summation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ToyJointDistribution:
    p_match: float
    rho_match: np.ndarray
    rho_unmatch: np.ndarray

    def __post_init__(self):
        rm = np.asarray(self.rho_match, dtype=np.float64)
        ru = np.asarray(self.rho_unmatch, dtype=np.float64)
        object.__setattr__(self, "rho_match", rm)
        object.__setattr__(self, "rho_unmatch", ru)
        if not 0.0 < self.p_match < 1.0:
            raise ValueError(f"p_match must lie in (0, 1), got {self.p_match}")
        if rm.shape != ru.shape or rm.ndim != 1 or rm.size == 0:
            raise ValueError("conditional vectors must be 1-D over the same non-empty support")
        for name, r in (("rho_match", rm), ("rho_unmatch", ru)):
            if np.any(r < 0) or abs(r.sum() - 1.0) > 1e-12:
                raise ValueError(f"{name} must be nonnegative and sum to 1")

    @property
    def marginal(self) -> np.ndarray:
        return self.p_match * self.rho_match + (1.0 - self.p_match) * self.rho_unmatch

    @classmethod
    def random(cls, rng: np.random.Generator, size: int, floor: float = 0.0) -> "ToyJointDistribution":
        """Dirichlet conditionals mixed with ``floor`` of the uniform distribution."""
        def draw():
            r = (1.0 - floor) * rng.dirichlet(np.ones(size)) + floor / size
            return r / r.sum()
        return cls(float(rng.uniform(0.05, 0.95)), draw(), draw())


def objective(dist: ToyJointDistribution, d: np.ndarray) -> float:
    """Expected log-likelihood of discriminator ``d`` (one value per atom); 0 * log 0 counts as 0."""
    d = np.asarray(d, dtype=np.float64)
    wm = dist.p_match * dist.rho_match
    wu = (1.0 - dist.p_match) * dist.rho_unmatch
    with np.errstate(divide="ignore"):
        tm = np.where(wm > 0, wm * np.log(np.where(wm > 0, d, 1.0)), 0.0)
        tu = np.where(wu > 0, wu * np.log(np.where(wu > 0, 1.0 - d, 1.0)), 0.0)
    return float(tm.sum() + tu.sum())


def optimal_discriminator(dist: ToyJointDistribution) -> tuple[np.ndarray, float]:
    """Maximizer of :func:`objective` and its value.

    Atoms with zero marginal mass carry no weight; they get NaN in the
    returned discriminator.
    """
    m = dist.marginal
    keep = m > 0
    if not keep.any():
        raise ValueError("distribution has no mass on its support")
    d = np.full(m.shape, np.nan)
    d[keep] = dist.p_match * dist.rho_match[keep] / m[keep]
    return d, objective(dist, np.where(keep, d, 0.5))


def _direction(rng: np.random.Generator, rho: np.ndarray) -> np.ndarray:
    """Unit direction ``phi`` with ``sum(sqrt(rho) * phi) = 0``, zero where ``rho`` is zero."""
    s = np.sqrt(rho)
    phi = rng.standard_normal(rho.shape) * (rho > 0)
    phi -= s * (phi @ s) / (s @ s)
    n = np.linalg.norm(phi)
    return phi / n if n > 0 else phi


def perturb(dist: ToyJointDistribution, eps: float, phi: np.ndarray, psi: np.ndarray) -> ToyJointDistribution:
    rm = dist.rho_match + eps * np.sqrt(dist.rho_match) * phi
    ru = dist.rho_unmatch + eps * np.sqrt(dist.rho_unmatch) * psi
    if rm.min() < 0 or ru.min() < 0:
        raise ValueError(f"perturbation eps={eps} makes a conditional mass negative")
    # renormalize away float drift only; the directions are already mass-preserving
    return ToyJointDistribution(dist.p_match, rm / rm.sum(), ru / ru.sum())


@dataclass(frozen=True)
class SensitivityFit:
    eps: tuple[float, ...]
    mean_abs_change: tuple[float, ...]
    exponent: float
    intercept: float


def perturbation_sensitivity(dist: ToyJointDistribution, eps_list=(1e-3, 3e-3, 1e-2), n_trials: int = 20,
                             seed: int = 0) -> SensitivityFit:
    """Log-log slope of ``|max L(perturbed) - max L|`` against ``eps``.

    Each trial draws one pair of directions and reuses it for every eps.
    """
    rng = np.random.default_rng(seed)
    _, base = optimal_discriminator(dist)
    changes = np.zeros((n_trials, len(eps_list)))
    for i in range(n_trials):
        phi, psi = _direction(rng, dist.rho_match), _direction(rng, dist.rho_unmatch)
        for j, eps in enumerate(eps_list):
            changes[i, j] = abs(optimal_discriminator(perturb(dist, eps, phi, psi))[1] - base)
    mean = changes.mean(axis=0)
    if np.any(mean <= 0):
        return SensitivityFit(tuple(eps_list), tuple(mean), float("nan"), float("nan"))
    slope, icpt = np.polyfit(np.log(eps_list), np.log(mean), 1)
    return SensitivityFit(tuple(eps_list), tuple(mean), float(slope), float(icpt))


def singular(rng: np.random.Generator, size: int) -> ToyJointDistribution:
    """Matched and unmatched conditionals on disjoint halves of the support."""
    split = int(rng.integers(1, size))
    atoms = rng.permutation(size)
    rm, ru = np.zeros(size), np.zeros(size)
    rm[atoms[:split]] = rng.dirichlet(np.ones(split))
    ru[atoms[split:]] = rng.dirichlet(np.ones(size - split))
    return ToyJointDistribution(float(rng.uniform(0.05, 0.95)), rm / rm.sum(), ru / ru.sum())


@dataclass(frozen=True)
class LossCheckReport:
    n_distributions: int
    max_optimal_value: float  # largest objective at the optimum; never positive
    max_abs_singular_value: float
    optimum_beats_random: bool  # over n_random discriminators per distribution
    exponents: tuple[float, ...]
    exponent_range: tuple[float, float] = (0.8, 1.2)

    @property
    def passed(self) -> bool:
        lo, hi = self.exponent_range
        return (self.max_optimal_value <= 1e-12 and self.max_abs_singular_value <= 1e-12
                and self.optimum_beats_random and all(lo <= e <= hi for e in self.exponents))

    def as_dict(self) -> dict:
        return {"n_distributions": self.n_distributions, "max_optimal_value": self.max_optimal_value,
                "max_abs_singular_value": self.max_abs_singular_value,
                "optimum_beats_random": self.optimum_beats_random,
                "exponent_min": min(self.exponents), "exponent_max": max(self.exponents),
                "passed": self.passed}


def run_checks(n: int = 100, max_support: int = 16, n_random: int = 100, n_sensitivity: int = 10,
               seed: int = 0) -> LossCheckReport:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4C4F53]))
    worst, worst_singular, beats = -np.inf, 0.0, True
    exponents = []
    for i in range(n):
        size = int(rng.integers(2, max_support + 1))
        dist = ToyJointDistribution.random(rng, size, floor=0.05)
        d, value = optimal_discriminator(dist)
        worst = max(worst, value)
        others = rng.uniform(1e-6, 1 - 1e-6, (n_random, size))
        beats &= all(objective(dist, o) <= value + 1e-12 for o in others)
        worst_singular = max(worst_singular, abs(optimal_discriminator(singular(rng, size))[1]))
        if i < n_sensitivity:
            exponents.append(perturbation_sensitivity(dist, seed=seed * 1000 + i).exponent)
    return LossCheckReport(n, float(worst), float(worst_singular), bool(beats), tuple(exponents))
