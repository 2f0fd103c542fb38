import numpy as np
import pytest
import scipy.linalg as sla

from blockrg.action import (
    ActionError,
    CouplingSet,
    action_splus,
    action_terms,
    action_unrenorm,
    averaging_strengths,
    bare_action,
    coupling_schedule,
    lower_bound_ratio,
    potential_density,
    potential_lower_bound,
    quadratic_forms,
    quadratic_lower_bound_constant,
    verify_potential_bound,
)
from blockrg.lattice import TorusLattice, averaging_matrix


def test_bare_action_zero():
    lat = TorusLattice(1, 2, 0, 2)
    assert bare_action(np.zeros(4), lat, CouplingSet()) == 0.0


def test_bare_action_quartic_constant():
    lat = TorusLattice(1, 2, 0, 2)
    assert bare_action(np.ones(4), lat, CouplingSet(lam=4.0, mu_bar=0.0)) == pytest.approx(4.0)


@pytest.mark.parametrize("d,side", [(1, 3), (2, 2)])
def test_bare_action_term_oracle(d, side):
    lat = TorusLattice(d, 2, 0, side)
    rng = np.random.default_rng(d)
    Phi = rng.normal(size=lat.shape)
    c = CouplingSet(lam=0.3, mu=-0.2, eps=0.1, mu_bar=0.7)
    grad = sum(float(np.sum((np.roll(Phi, -1, axis=ax) - Phi) ** 2)) for ax in range(d))
    expect = 0.5 * grad + 0.5 * (c.mu_bar + c.mu) * np.sum(Phi ** 2) + c.eps * Phi.size + 0.25 * c.lam * np.sum(Phi ** 4)
    assert bare_action(Phi.reshape(-1), lat, c) == pytest.approx(expect, rel=1e-12)


def test_bare_action_needs_unit_lattice():
    with pytest.raises(ActionError):
        bare_action(np.zeros(4), TorusLattice(1, 2, 1, 1), CouplingSet())


def test_splus_zero():
    fine = TorusLattice(1, 2, 1, 2)
    c = CouplingSet(lam=0.5, mu=0.3)
    assert action_splus(fine, np.ones(4, bool), np.zeros(4), np.zeros(8), c).total == 0.0


def test_splus_consistent_constant():
    fine = TorusLattice(2, 2, 1, 1)
    phi = np.full(fine.n_sites, 1.7)
    Phi = averaging_matrix(fine, 1) @ phi
    terms = action_splus(fine, np.ones(4, bool), Phi, phi, CouplingSet(mu_bar=0.0))
    assert terms.starred == pytest.approx(0.0, abs=1e-14)


def test_splus_term_oracle():
    fine = TorusLattice(1, 2, 1, 2)
    rng = np.random.default_rng(7)
    Phi, phi = rng.normal(size=4), rng.normal(size=8)
    mask = np.array([True, True, False, True])
    c = CouplingSet(lam=0.2, mu=0.1, eps=0.05, mu_bar=0.4, a=1.3)
    eta = 0.5
    fm = np.repeat(mask, 2)
    avg = 0.5 * c.a * sum((Phi[i] - 0.5 * (phi[2 * i] + phi[2 * i + 1])) ** 2 for i in range(4) if mask[i])
    grad = 0.5 / eta * sum((phi[(x + 1) % 8] - phi[x]) ** 2 for x in range(8) if fm[x] and fm[(x + 1) % 8])
    sq = eta * np.sum(phi[fm] ** 2)
    expect = avg + grad + 0.5 * c.mu_bar * sq + c.eps * 3 + 0.5 * c.mu * sq + 0.25 * c.lam * eta * np.sum(phi[fm] ** 4)
    assert action_splus(fine, mask, Phi, phi, c).total == pytest.approx(expect, rel=1e-12)


def test_terms_size_mismatch():
    fine = TorusLattice(1, 2, 1, 2)
    with pytest.raises(ActionError):
        action_terms(fine, np.ones(4, bool), np.zeros(3), np.zeros(8), 1.0, 1.0)


def test_unrenorm_empty_region():
    fine = TorusLattice(1, 2, 1, 2)
    rng = np.random.default_rng(0)
    c, prev = CouplingSet(lam=0.1, eps=1.0), CouplingSet(eps=2.0, mu=0.5)
    assert action_unrenorm(fine, np.zeros(4, bool), rng.normal(size=4), rng.normal(size=8), c, prev).total == 0.0


def test_unrenorm_zero_field_volume():
    fine = TorusLattice(1, 2, 1, 2)
    prev = CouplingSet(eps=0.3)
    mask = np.array([True, False, True, True])
    terms = action_unrenorm(fine, mask, np.zeros(4), np.zeros(8), CouplingSet(), prev)
    assert terms.total == pytest.approx(2 * 0.3 * 3)  # L^d eps Vol with d = 1


def test_unrenorm_scaling():
    fine = TorusLattice(2, 3, 1, 1)
    rng = np.random.default_rng(4)
    Phi, phi = rng.normal(size=9), rng.normal(size=81)
    mask = rng.random(9) < 0.6
    c, prev = CouplingSet(lam=0.2, a=0.7), CouplingSet(eps=0.1, mu=-0.3)
    ref = action_splus(fine, mask, Phi, phi, CouplingSet(lam=0.2, a=0.7, eps=9 * 0.1, mu=9 * -0.3))
    assert action_unrenorm(fine, mask, Phi, phi, c, prev).total == pytest.approx(ref.total, rel=1e-12)


def test_additive_over_separated_regions():
    fine = TorusLattice(1, 2, 1, 3)
    rng = np.random.default_rng(5)
    Phi, phi = rng.normal(size=8), rng.normal(size=16)
    X = np.zeros(8, bool)
    X[[0, 1]] = True
    Y = np.zeros(8, bool)
    Y[[4, 5]] = True
    c = CouplingSet(lam=0.3, mu=0.2, eps=0.1)
    sx, sy, sxy = (action_splus(fine, m, Phi, phi, c).total for m in (X, Y, X | Y))
    assert sxy == pytest.approx(sx + sy, rel=1e-12)


def test_potential_bound_double_well():
    assert potential_lower_bound(0.0, -2.0, 1.0, 1.0) == -1.0
    assert potential_density(np.sqrt(2.0), 0.0, -2.0, 1.0) == pytest.approx(-1.0)


def test_potential_bound_zero():
    assert potential_lower_bound(0.0, 0.0, 1.0, 5.0) == 0.0
    assert np.all(potential_density(np.linspace(-3, 3, 61), 0.0, 0.0, 1.0) >= 0)


def test_potential_bound_needs_lambda():
    with pytest.raises(ActionError):
        potential_lower_bound(0.0, 1.0, 0.0, 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_potential_bound_grid(seed):
    rng = np.random.default_rng(seed)
    eps, mu, lam = rng.uniform(-1, 1), rng.uniform(-3, 3), rng.uniform(0.1, 2)
    grid = np.linspace(-10, 10, 20001)
    assert np.min(potential_density(grid, eps, mu, lam)) >= potential_lower_bound(eps, mu, lam, 1.0) - 1e-12
    assert verify_potential_bound(eps, mu, lam, rng) >= -1e-12


def test_potential_bound_tight():
    grid = np.linspace(-3, 3, 60001)
    gap = np.min(potential_density(grid, 0.0, -1.5, 0.7)) - potential_lower_bound(0.0, -1.5, 0.7, 1.0)
    assert 0 <= gap < 1e-6


def test_lower_bound_constant_eigen_oracle():
    fine = TorusLattice(1, 2, 1, 2)
    A, B, m = quadratic_forms(fine, np.ones(4, bool), 1.0)
    Bext = np.zeros_like(A)
    Bext[:m, :m] = B
    top = sla.eigh(Bext, A, eigvals_only=True)[-1]
    res = quadratic_lower_bound_constant(fine, np.ones(4, bool), 1.0)
    assert res.c0 > 0 and not res.restricted
    assert res.c0 == pytest.approx(1.0 / top, rel=1e-10)


def test_lower_bound_constant_restricted():
    fine = TorusLattice(1, 2, 1, 2)
    res = quadratic_lower_bound_constant(fine, np.ones(4, bool), 0.0)
    assert res.restricted and res.c0 > 0


def test_lower_bound_constant_field_zero_rhs():
    fine = TorusLattice(1, 2, 1, 2)
    phi = np.random.default_rng(1).normal(size=8)
    num, den = lower_bound_ratio(fine, np.ones(4, bool), 0.0, np.full(4, 2.0), phi)
    assert den == pytest.approx(0.0, abs=1e-12) and num >= 0


@pytest.mark.parametrize("d,k,mu", [(1, 1, 0.1), (1, 2, 1.0), (2, 1, 0.0)])
def test_lower_bound_random_pairs(d, k, mu):
    fine = TorusLattice(d, 2, k, 2 if d == 1 else 1)
    unit = fine.coarser(k)
    mask = np.ones(unit.n_sites, bool)
    c0 = quadratic_lower_bound_constant(fine, mask, mu).c0
    rng = np.random.default_rng(d + k)
    for _ in range(100):
        num, den = lower_bound_ratio(fine, mask, mu, rng.normal(size=unit.n_sites), rng.normal(size=fine.n_sites))
        assert num >= c0 * den * (1 - 1e-10)


def test_mu_range():
    with pytest.raises(ActionError):
        quadratic_lower_bound_constant(TorusLattice(1, 2, 1, 2), np.ones(4, bool), 1.5)


def test_averaging_strengths_recursion():
    a = averaging_strengths(1.0, 2, 3, 3)
    assert np.isinf(a[0])
    for k in range(3):
        assert 1 / a[k + 1] == pytest.approx(1.0 + (0 if k == 0 else 1 / a[k]) / 4)


def test_coupling_schedule():
    sched = coupling_schedule(0.1, 1.0, 1.0, 2, 3, 2)
    assert [c.lam for c in sched] == pytest.approx([0.025, 0.05, 0.1])
    assert [c.mu_bar for c in sched] == pytest.approx([1 / 16, 1 / 4, 1.0])
