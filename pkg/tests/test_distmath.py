import math

import numpy as np
import pytest

from ganodet.distmath import (
    LN2,
    DiscreteDistribution,
    SignedMassFunction,
    distorted_mixture,
    feasibility_condition,
    grid_search_discriminator,
    jsd,
    kl_divergence,
    optimal_discriminator,
    optimal_generator_distribution,
    penalized_value_at_optimum,
    random_distribution,
    run_identity_suite,
    value_at_optimum,
)
from ganodet.errors import (
    AbsoluteContinuityViolationError,
    GammaOutOfRangeError,
    SupportMismatchError,
)

RNG = np.random.default_rng(42)


def dist(*mass):
    return DiscreteDistribution(list(mass))


# ---- construction -------------------------------------------------------------

def test_distribution_validation():
    with pytest.raises(ValueError):
        DiscreteDistribution([0.5, 0.6])
    with pytest.raises(ValueError):
        DiscreteDistribution([-0.1, 1.1])
    with pytest.raises(ValueError):
        DiscreteDistribution([])


def test_signed_mass_flags_feasibility():
    assert SignedMassFunction([0.3, 0.7]).feasible
    assert not SignedMassFunction([-0.5, 1.5]).feasible
    assert not SignedMassFunction([0.3, 0.3]).feasible  # wrong sum


# ---- KL --------------------------------------------------------------------------

def test_kl_of_distribution_with_itself_is_zero():
    for k in (2, 5, 9):
        p = random_distribution(RNG, k)
        assert kl_divergence(p, p) == 0.0


def test_kl_point_mass_example():
    assert kl_divergence(dist(1, 0), dist(0.5, 0.5)) == pytest.approx(LN2)


def test_kl_matches_direct_two_term_summation():
    p, q = dist(0.5, 0.5), dist(0.25, 0.75)
    expected = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
    assert kl_divergence(p, q) == pytest.approx(expected, abs=1e-15)


def test_kl_absolute_continuity():
    with pytest.raises(AbsoluteContinuityViolationError):
        kl_divergence(dist(0.5, 0.5), dist(1, 0))


def test_support_mismatch():
    with pytest.raises(SupportMismatchError):
        kl_divergence(dist(1, 0), dist(0.5, 0.25, 0.25))
    with pytest.raises(SupportMismatchError):
        jsd(dist(1, 0), dist(0.5, 0.25, 0.25))


# ---- JSD --------------------------------------------------------------------------

def test_jsd_self_is_zero():
    p = random_distribution(RNG, 6)
    assert jsd(p, p) == 0.0


def test_jsd_disjoint_supports_hit_ln2():
    assert jsd(dist(1, 0), dist(0, 1)) == pytest.approx(LN2)


def test_jsd_matches_direct_summation_oracle():
    # independent route: KL halves against the midpoint, term by term
    p, q = (0.5, 0.5), (0.9, 0.1)
    mid = [(a + b) / 2 for a, b in zip(p, q)]
    expected = 0.5 * (
        sum(a * math.log(a / m) for a, m in zip(p, mid))
        + sum(b * math.log(b / m) for b, m in zip(q, mid)))
    assert jsd(dist(*p), dist(*q)) == pytest.approx(expected, abs=1e-15)


def test_jsd_symmetry_and_range_property():
    for _ in range(300):
        k = int(RNG.integers(2, 17))
        p, q = random_distribution(RNG, k), random_distribution(RNG, k)
        fwd, bwd = jsd(p, q), jsd(q, p)
        assert abs(fwd - bwd) < 1e-12
        assert -1e-12 <= fwd <= LN2 + 1e-12


# ---- optimal discriminator ------------------------------------------------------

def test_equal_masses_give_half():
    p = random_distribution(RNG, 5)
    assert np.allclose(optimal_discriminator(p, p), 0.5)


def test_point_masses():
    assert np.array_equal(optimal_discriminator(dist(1, 0), dist(0, 1)),
                          [1.0, 0.0])


def test_zero_mass_points_default_to_half():
    p = dist(1.0, 0.0)
    q = dist(1.0, 0.0)
    assert optimal_discriminator(p, q)[1] == 0.5


def test_closed_form_matches_grid_search():
    for _ in range(50):
        k = int(RNG.integers(2, 9))
        p, q = random_distribution(RNG, k), random_distribution(RNG, k)
        closed = optimal_discriminator(p, q)
        for a, b, y in zip(p.mass, q.mass, closed):
            assert abs(y - grid_search_discriminator(a, b)) <= 1e-3


# ---- value function identities -----------------------------------------------------

def test_value_at_optimum_equal_distributions():
    p = random_distribution(RNG, 4)
    assert value_at_optimum(p, p) == pytest.approx(-2 * LN2)


def test_value_at_optimum_disjoint():
    assert value_at_optimum(dist(1, 0), dist(0, 1)) == pytest.approx(0.0)


def test_value_identity_over_random_instances():
    for _ in range(1000):
        k = int(RNG.integers(2, 17))
        p, q = random_distribution(RNG, k), random_distribution(RNG, k)
        assert abs(value_at_optimum(p, q) - (2 * jsd(p, q) - 2 * LN2)) < 1e-9


# ---- distorted mixture ---------------------------------------------------------------

def test_mixture_gamma_one_returns_generator_distribution():
    p_g, p_an = dist(0.3, 0.7), dist(1, 0)
    assert np.array_equal(distorted_mixture(p_g, p_an, 1.0).mass, p_g.mass)


def test_mixture_half():
    assert np.allclose(distorted_mixture(dist(1, 0), dist(0, 1), 0.5).mass,
                       [0.5, 0.5])


def test_mixture_default_gamma():
    out = distorted_mixture(dist(0.5, 0.5), dist(1, 0), 0.1)
    assert np.allclose(out.mass, [0.95, 0.05])


def test_gamma_validation():
    p = dist(0.5, 0.5)
    for bad in (0.0, -0.2, 1.5):
        with pytest.raises(GammaOutOfRangeError):
            distorted_mixture(p, p, bad)
        with pytest.raises(GammaOutOfRangeError):
            penalized_value_at_optimum(p, p, p, bad)
        with pytest.raises(GammaOutOfRangeError):
            optimal_generator_distribution(p, p, bad)


# ---- penalized objective ------------------------------------------------------------

def test_penalized_value_when_data_equals_mixture():
    p_g, p_an, gamma = dist(0.4, 0.6), dist(0.8, 0.2), 0.3
    p_d = distorted_mixture(p_g, p_an, gamma)
    value = penalized_value_at_optimum(p_d, p_g, p_an, gamma)
    assert value == pytest.approx(-2 * LN2)


def test_penalized_value_gamma_one_reduces_to_plain():
    p_d, p_g, p_an = (random_distribution(RNG, 5) for _ in range(3))
    assert penalized_value_at_optimum(p_d, p_g, p_an, 1.0) == pytest.approx(
        value_at_optimum(p_d, p_g), abs=1e-12)


def test_penalized_identity_over_random_instances():
    for _ in range(1000):
        k = int(RNG.integers(2, 17))
        p_d = random_distribution(RNG, k)
        p_g = random_distribution(RNG, k)
        p_an = random_distribution(RNG, k)
        gamma = float(RNG.uniform(0.05, 1.0))
        lhs = penalized_value_at_optimum(p_d, p_g, p_an, gamma)
        rhs = 2 * jsd(p_d, distorted_mixture(p_g, p_an, gamma)) - 2 * LN2
        assert abs(lhs - rhs) < 1e-9


# ---- closed-form generator target ------------------------------------------------------

def test_generator_target_examples():
    out = optimal_generator_distribution(dist(0.5, 0.5), dist(1, 0), 0.5)
    assert np.allclose(out.mass, [0.0, 1.0]) and out.feasible

    out = optimal_generator_distribution(dist(0.5, 0.5), dist(1, 0), 0.1)
    assert np.allclose(out.mass, [-4.0, 5.0]) and not out.feasible

    p_d = random_distribution(RNG, 6)
    out = optimal_generator_distribution(p_d, random_distribution(RNG, 6), 1.0)
    assert np.allclose(out.mass, p_d.mass) and out.feasible


def test_mixture_reconstruction_identity():
    for _ in range(1000):
        k = int(RNG.integers(2, 17))
        p_d = random_distribution(RNG, k)
        p_an = random_distribution(RNG, k)
        gamma = float(RNG.uniform(0.05, 1.0))
        star = optimal_generator_distribution(p_d, p_an, gamma)
        recon = gamma * star.mass + (1 - gamma) * p_an.mass
        assert np.abs(recon - p_d.mass).max() < 1e-12
        assert abs(star.mass.sum() - 1.0) < 1e-10


def test_feasible_iff_pointwise_condition():
    # constructed feasible case: p_d dominates (1-gamma) * p_an
    p_d, p_an, gamma = dist(0.5, 0.5), dist(0.6, 0.4), 0.5
    assert feasibility_condition(p_d, p_an, gamma)
    assert optimal_generator_distribution(p_d, p_an, gamma).feasible

    # constructed infeasible case: abnormal mass concentrated
    p_an = dist(1.0, 0.0)
    gamma = 0.2
    assert not feasibility_condition(p_d, p_an, gamma)
    assert not optimal_generator_distribution(p_d, p_an, gamma).feasible

    for _ in range(300):
        k = int(RNG.integers(2, 10))
        p_d = random_distribution(RNG, k)
        p_an = random_distribution(RNG, k)
        gamma = float(RNG.uniform(0.05, 1.0))
        star = optimal_generator_distribution(p_d, p_an, gamma)
        assert star.feasible == feasibility_condition(p_d, p_an, gamma)


# ---- the packaged suite ----------------------------------------------------------------

def test_identity_suite_passes_and_is_deterministic():
    one = run_identity_suite(instances=60, seed=9)
    two = run_identity_suite(instances=60, seed=9)
    assert one == two
    assert one["pass"]
    names = [c["name"] for c in one["checks"]]
    assert {"optimal_discriminator_grid", "value_at_optimum_identity",
            "penalized_value_identity",
            "generator_reconstruction"} <= set(names)


def test_identity_suite_minimal_support():
    assert run_identity_suite(instances=40, seed=2, support_size=2)["pass"]
