import math

import numpy as np
import pytest
import scipy.linalg as sla

from blockrg.greens import (
    GreensError,
    Hierarchy,
    assemble,
    cube_cover,
    decay_certificate,
    field_swap_check,
    fit_ratio,
    greens_exact,
    localized_field,
    minimizer_identity_check,
    objective,
    random_walk_inverse,
    resolvent_rate_1d,
    solve_minimizer,
    source,
)
from blockrg.lattice import TorusLattice
from blockrg.suites import random_hierarchy


def data(h, rng):
    Phi = [rng.normal(size=h.fine.coarser(j).n_sites) for j in range(1, h.k + 1)]
    return Phi, rng.normal(size=h.fine.n_sites)


def full_hierarchy(fine, mu_bar=1.0):
    ones = np.ones(fine.n_sites, bool)
    return Hierarchy(fine, (ones,) * (fine.k + 1), (1.0,) * fine.k, mu_bar)


def test_zero_data():
    h = random_hierarchy(TorusLattice(1, 2, 1, 2), np.random.default_rng(0))
    res = solve_minimizer(h, [np.zeros(4)], np.zeros(8))
    assert np.all(res.phi == 0) and np.all(res.psi == 0)


def quadratic_oracle(h, Phi, phi_ext):
    """Minimize the objective through its Hessian and gradient read off by polarization."""
    idx = np.flatnonzero(h.domain)
    base = np.where(h.domain, 0.0, phi_ext)

    def f(x):
        p = base.copy()
        p[idx] = x
        return objective(h, p, Phi)

    n = idx.size
    E = np.eye(n)
    f0 = f(np.zeros(n))
    fe = np.array([f(E[i]) for i in range(n)])
    H = np.array([[f(E[i] + E[j]) - fe[i] - fe[j] + f0 for j in range(n)] for i in range(n)])
    g = np.array([0.5 * (f(E[i]) - f(-E[i])) for i in range(n)])
    x = sla.lu_solve(sla.lu_factor(H), -g)
    out = base.copy()
    out[idx] = x
    return out


@pytest.mark.parametrize("fine", [TorusLattice(1, 2, 1, 1), TorusLattice(1, 2, 1, 2), TorusLattice(2, 2, 1, 1)])
def test_minimizer_dense_oracle(fine):
    rng = np.random.default_rng(fine.n_sites)
    h = random_hierarchy(fine, rng)
    Phi, ext = data(h, rng)
    got = solve_minimizer(h, Phi, ext).phi
    assert np.max(np.abs(got - quadratic_oracle(h, Phi, ext))) <= 1e-10


def test_minimizer_stationary():
    rng = np.random.default_rng(3)
    h = random_hierarchy(TorusLattice(1, 2, 2, 1), rng)
    Phi, ext = data(h, rng)
    phi = solve_minimizer(h, Phi, ext).phi
    step = 1e-5
    grad = []
    for i in np.flatnonzero(h.domain):
        up, dn = phi.copy(), phi.copy()
        up[i] += step
        dn[i] -= step
        grad.append((objective(h, up, Phi) - objective(h, dn, Phi)) / (2 * step))
    assert np.linalg.norm(grad) <= 1e-8  # central differences carry O(step^2) round-off


def test_minimizer_source_consistent():
    rng = np.random.default_rng(4)
    h = random_hierarchy(TorusLattice(2, 2, 1, 1), rng)
    Phi, ext = data(h, rng)
    op = assemble(h)
    phi = solve_minimizer(h, Phi, ext).phi
    assert np.allclose(op.H @ phi[op.idx], source(h, Phi, ext), atol=1e-10)


def test_identity_zero_data():
    h = random_hierarchy(TorusLattice(1, 2, 2, 1), np.random.default_rng(1))
    assert minimizer_identity_check(h, [np.zeros(4), np.zeros(2)], np.zeros(8)) == 0.0


@pytest.mark.parametrize("fine,tol", [(TorusLattice(1, 2, 2, 2), 1e-10), (TorusLattice(2, 2, 2, 1), 1e-9)])
def test_identity_random(fine, tol):
    rng = np.random.default_rng(9)
    for _ in range(5):
        h = random_hierarchy(fine, rng)
        Phi, ext = data(h, rng)
        assert minimizer_identity_check(h, Phi, ext) <= tol


def test_hierarchy_validation():
    fine = TorusLattice(1, 2, 1, 1)
    ones = np.ones(4, bool)
    with pytest.raises(GreensError):
        Hierarchy(fine, (ones,), (1.0,))
    bad = np.array([True, False, False, False])
    with pytest.raises(GreensError):
        Hierarchy(fine, (ones, bad), (1.0,))
    with pytest.raises(GreensError):
        Hierarchy(fine, (np.array([True, True, False, False]), ones), (1.0,))


def test_greens_loewner_in_r():
    h = random_hierarchy(TorusLattice(1, 2, 1, 2), np.random.default_rng(2))
    prev = greens_exact(h, 0.0)
    for r in (0.5, 2.0, 10.0, 100.0):
        cur = greens_exact(h, r)
        assert np.linalg.eigvalsh(prev - cur).min() >= -1e-12
        prev = cur


def test_walk_zeroth_order_block_diagonal():
    h = full_hierarchy(TorusLattice(1, 2, 1, 3))
    op = assemble(h)
    res = random_walk_inverse(op, 4, n_max=0, halo=0)
    cover = cube_cover(op, 4, halo=0)
    same = cover.cube_of[:, None] == cover.cube_of[None, :]
    assert np.all(res.G[~same] == 0)


def test_walk_single_cube_support():
    h = full_hierarchy(TorusLattice(1, 2, 1, 4))
    op = assemble(h)
    cover = cube_cover(op, 4)
    s = np.zeros(cover.n_cubes)
    s[1] = 1.0
    res = random_walk_inverse(op, 4, n_max=6, s=s)
    rows = np.flatnonzero(np.abs(res.G).sum(axis=1))
    assert set(rows) <= set(cover.halos[1])


def test_walk_converges():
    h = full_hierarchy(TorusLattice(1, 2, 1, 4))
    res = random_walk_inverse(assemble(h), 8, n_max=40)
    assert res.theta < 1 and res.spectral_radius < 1
    assert res.errors[-1] < 1e-8


def test_fit_ratio_geometric():
    assert fit_ratio([0.5 ** m for m in range(20)]) == pytest.approx(0.5)
    assert math.isnan(fit_ratio([1.0, 0.0]))
    assert fit_ratio([0.0, 0.0]) == 0.0


def test_single_cube_localized():
    h = full_hierarchy(TorusLattice(1, 2, 1, 2))
    op = assemble(h)
    f = np.random.default_rng(0).normal(size=op.n)
    lf = localized_field(op, f, op.n, r_layers=0, halo=0)
    assert lf.sup_error <= 1e-12


def test_localized_far_data_small():
    h = full_hierarchy(TorusLattice(1, 2, 1, 5))
    op = assemble(h)
    f = np.zeros(op.n)
    f[:4] = 1.0
    phi = np.linalg.solve(op.dense(), f)
    far = phi[op.n // 2 - 2: op.n // 2 + 2]
    assert np.max(np.abs(far)) < 1e-3 * np.max(np.abs(phi))


def test_resolvent_rate_matches_fit():
    fine = TorusLattice(1, 2, 0, 7)
    h = Hierarchy(fine, (np.ones(fine.n_sites, bool),), (), 1.0)
    cert = decay_certificate(greens_exact(h), fine)
    assert cert.gamma == pytest.approx(resolvent_rate_1d(1.0), rel=0.01)


def test_field_swap_no_shrink():
    rng = np.random.default_rng(5)
    h = random_hierarchy(TorusLattice(1, 2, 1, 3), rng)
    Phi, ext = data(h, rng)
    assert field_swap_check(h, Phi, ext, 2, 1, shrink=False).max_diff == 0.0


def test_field_swap_decays():
    fine = TorusLattice(1, 2, 1, 5)
    ones = np.ones(fine.n_sites, bool)
    last = np.zeros(fine.n_sites, bool)
    last[8:56] = True
    h = Hierarchy(fine, (ones, last), (1.0,), 1.0)
    rng = np.random.default_rng(6)
    Phi, ext = data(h, rng)
    rep = field_swap_check(h, Phi, ext, 2, 2)
    assert rep.holds and rep.probe_sites > 0
