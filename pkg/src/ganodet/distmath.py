"""Exact checks of the adversarial-training derivation on finite supports.

Images are out of reach for exact verification, so everything here works
on finite probability vectors over abstract support points 0..k-1: the
optimal discriminator, KL/JSD, the value function at the optimum, the
distorted mixture a penalized discriminator makes the generator match,
and the closed-form optimal generator mass (which can go negative, hence
SignedMassFunction). Natural logarithm throughout; the "2 log 2"
constants below are in nats.

All functions are pure; inputs are immutable, safe for concurrent use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    AbsoluteContinuityViolationError,
    GammaOutOfRangeError,
    SupportMismatchError,
)

LN2 = math.log(2.0)
PROB_SUM_TOL = 1e-12


def _as_mass(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class DiscreteDistribution:
    """Probability vector over a finite support of size k."""

    mass: np.ndarray

    def __init__(self, mass):
        arr = _as_mass(mass)
        if arr.size == 0:
            raise ValueError("empty support")
        if np.any(arr < 0.0):
            raise ValueError("negative probability mass")
        if abs(arr.sum() - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"mass sums to {arr.sum()!r}, not 1")
        object.__setattr__(self, "mass", arr)

    @property
    def support_size(self) -> int:
        return self.mass.size


@dataclass(frozen=True)
class SignedMassFunction:
    """Mass vector that sums to one but may have negative entries."""

    mass: np.ndarray
    feasible: bool

    def __init__(self, mass):
        arr = _as_mass(mass)
        feasible = bool(np.all(arr >= 0.0)) and abs(arr.sum() - 1.0) <= PROB_SUM_TOL
        object.__setattr__(self, "mass", arr)
        object.__setattr__(self, "feasible", feasible)


def _check_support(p: DiscreteDistribution, q: DiscreteDistribution):
    if p.support_size != q.support_size:
        raise SupportMismatchError(
            f"support sizes differ: {p.support_size} vs {q.support_size}")


def _check_gamma(gamma: float):
    if not (0.0 < gamma <= 1.0):
        raise GammaOutOfRangeError(f"gamma must be in (0, 1], got {gamma}")


def kl_divergence(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """sum_i p_i ln(p_i / q_i); terms with p_i == 0 contribute nothing."""
    _check_support(p, q)
    support = p.mass > 0.0
    if np.any(q.mass[support] == 0.0):
        raise AbsoluteContinuityViolationError(
            "p has mass where q is zero; KL(p||q) is infinite")
    pm = p.mass[support]
    return float(np.sum(pm * np.log(pm / q.mass[support])))


def jsd(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """Jensen-Shannon divergence via the two KL halves against the midpoint."""
    _check_support(p, q)
    mid = DiscreteDistribution((p.mass + q.mass) / 2.0)
    return 0.5 * (kl_divergence(p, mid) + kl_divergence(q, mid))


def optimal_discriminator(p_d: DiscreteDistribution,
                          p_g: DiscreteDistribution) -> np.ndarray:
    """Pointwise maximizer p_d / (p_d + p_g); 0.5 where both masses vanish
    (any value is optimal there, 0.5 keeps the output in range and
    deterministic)."""
    _check_support(p_d, p_g)
    total = p_d.mass + p_g.mass
    return np.where(total > 0.0, p_d.mass / np.where(total > 0.0, total, 1.0), 0.5)


def value_at_optimum(p_d: DiscreteDistribution,
                     p_g: DiscreteDistribution) -> float:
    """Direct summation of the value function at the optimal discriminator.

    Equals 2 * jsd(p_d, p_g) - 2 ln 2; the identity suite holds the two
    routes against each other rather than trusting either.
    """
    _check_support(p_d, p_g)
    d_star = optimal_discriminator(p_d, p_g)
    total = 0.0
    for pd_i, pg_i, d_i in zip(p_d.mass, p_g.mass, d_star):
        if pd_i > 0.0:
            total += pd_i * math.log(d_i)
        if pg_i > 0.0:
            total += pg_i * math.log(1.0 - d_i)
    return total


def distorted_mixture(p_g: DiscreteDistribution, p_an: DiscreteDistribution,
                      gamma: float) -> DiscreteDistribution:
    """Convex combination gamma * p_g + (1 - gamma) * p_an: the distribution
    the generator effectively matches against once known-abnormal mass is
    penalized into the objective."""
    _check_gamma(gamma)
    _check_support(p_g, p_an)
    return DiscreteDistribution(gamma * p_g.mass + (1.0 - gamma) * p_an.mass)


def penalized_value_at_optimum(p_d: DiscreteDistribution,
                               p_g: DiscreteDistribution,
                               p_an: DiscreteDistribution,
                               gamma: float) -> float:
    """Mixture objective sum p_d ln D + p_N ln(1 - D) at its own optimum
    D = p_d / (p_d + p_N), with p_N the distorted mixture. Equals
    2 * jsd(p_d, p_N) - 2 ln 2 (checked independently by the suite)."""
    _check_gamma(gamma)
    _check_support(p_d, p_g)
    _check_support(p_g, p_an)
    p_n = distorted_mixture(p_g, p_an, gamma)
    d_star = optimal_discriminator(p_d, p_n)
    total = 0.0
    for pd_i, pn_i, d_i in zip(p_d.mass, p_n.mass, d_star):
        if pd_i > 0.0:
            total += pd_i * math.log(d_i)
        if pn_i > 0.0:
            total += pn_i * math.log(1.0 - d_i)
    return total


def optimal_generator_distribution(p_d: DiscreteDistribution,
                                   p_an: DiscreteDistribution,
                                   gamma: float) -> SignedMassFunction:
    """Closed-form generator target (1/gamma) p_d - ((1-gamma)/gamma) p_an.

    The formula guarantees unit sum but not nonnegativity; the result is
    returned as-is with an explicit feasibility flag because clamping or
    renormalizing would hide a real property of the closed form.
    """
    _check_gamma(gamma)
    _check_support(p_d, p_an)
    mass = p_d.mass / gamma - ((1.0 - gamma) / gamma) * p_an.mass
    return SignedMassFunction(mass)


def feasibility_condition(p_d: DiscreteDistribution, p_an: DiscreteDistribution,
                          gamma: float) -> bool:
    """The closed form is a true distribution iff p_d >= (1-gamma) * p_an
    pointwise."""
    _check_gamma(gamma)
    _check_support(p_d, p_an)
    return bool(np.all(p_d.mass >= (1.0 - gamma) * p_an.mass))


def grid_search_discriminator(a: float, b: float, resolution: float = 1e-3
                              ) -> float:
    """Brute-force maximizer of h(y) = a ln y + b ln(1 - y) over a grid in
    (0, 1): the independent route against the closed form a / (a + b)."""
    n = int(round(1.0 / resolution))
    ys = np.arange(1, n, dtype=np.float64) / n
    h = a * np.log(ys) + b * np.log1p(-ys)
    return float(ys[int(np.argmax(h))])


def random_distribution(rng: np.random.Generator, k: int) -> DiscreteDistribution:
    mass = rng.dirichlet(np.ones(k))
    return DiscreteDistribution(mass / mass.sum())


def run_identity_suite(instances: int = 1000, seed: int = 0,
                       support_size: int | None = None) -> dict:
    """Randomized exact-identity suite; the `oracle` CLI subcommand wraps it.

    Each check reports its max absolute error over all instances and a
    pass flag at the tolerance the check must meet.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    checks = []

    def sizes():
        if support_size is not None:
            return [support_size] * instances
        return [int(rng.integers(2, 17)) for _ in range(instances)]

    # closed-form optimal discriminator vs grid search on h(y)
    err = 0.0
    for k in sizes():
        p_d = random_distribution(rng, k)
        p_g = random_distribution(rng, k)
        closed = optimal_discriminator(p_d, p_g)
        for a, b, y in zip(p_d.mass, p_g.mass, closed):
            if a + b == 0.0:
                continue
            err = max(err, abs(y - grid_search_discriminator(a, b)))
    checks.append({"name": "optimal_discriminator_grid", "instances": instances,
                   "max_abs_error": err, "tolerance": 1e-3,
                   "pass": bool(err <= 1e-3 + 1e-12)})

    # value function at the optimum vs 2*JSD - 2 ln 2
    err = 0.0
    for k in sizes():
        p_d = random_distribution(rng, k)
        p_g = random_distribution(rng, k)
        lhs = value_at_optimum(p_d, p_g)
        rhs = 2.0 * jsd(p_d, p_g) - 2.0 * LN2
        err = max(err, abs(lhs - rhs))
    checks.append({"name": "value_at_optimum_identity", "instances": instances,
                   "max_abs_error": err, "tolerance": 1e-9,
                   "pass": bool(err < 1e-9)})

    # penalized mixture objective vs 2*JSD(p_d, p_N) - 2 ln 2
    err = 0.0
    for k in sizes():
        p_d = random_distribution(rng, k)
        p_g = random_distribution(rng, k)
        p_an = random_distribution(rng, k)
        gamma = float(rng.uniform(0.05, 1.0))
        lhs = penalized_value_at_optimum(p_d, p_g, p_an, gamma)
        rhs = 2.0 * jsd(p_d, distorted_mixture(p_g, p_an, gamma)) - 2.0 * LN2
        err = max(err, abs(lhs - rhs))
    checks.append({"name": "penalized_value_identity", "instances": instances,
                   "max_abs_error": err, "tolerance": 1e-9,
                   "pass": bool(err < 1e-9)})

    # mixture reconstruction gamma * p_g_star + (1-gamma) * p_an == p_d
    err = 0.0
    for k in sizes():
        p_d = random_distribution(rng, k)
        p_an = random_distribution(rng, k)
        gamma = float(rng.uniform(0.05, 1.0))
        star = optimal_generator_distribution(p_d, p_an, gamma)
        recon = gamma * star.mass + (1.0 - gamma) * p_an.mass
        err = max(err, float(np.max(np.abs(recon - p_d.mass))))
    checks.append({"name": "generator_reconstruction", "instances": instances,
                   "max_abs_error": err, "tolerance": 1e-12,
                   "pass": bool(err < 1e-12)})

    # symmetry and range of JSD
    err = 0.0
    rng_err = 0.0
    for k in sizes():
        p = random_distribution(rng, k)
        q = random_distribution(rng, k)
        fwd, bwd = jsd(p, q), jsd(q, p)
        err = max(err, abs(fwd - bwd))
        rng_err = max(rng_err, max(0.0 - fwd, fwd - LN2, 0.0))
    checks.append({"name": "jsd_symmetry", "instances": instances,
                   "max_abs_error": err, "tolerance": 1e-12,
                   "pass": bool(err < 1e-12)})
    checks.append({"name": "jsd_range", "instances": instances,
                   "max_abs_error": rng_err, "tolerance": 1e-12,
                   "pass": bool(rng_err < 1e-12)})

    return {"seed": seed, "instances": instances,
            "support_size": support_size, "checks": checks,
            "pass": all(c["pass"] for c in checks)}
