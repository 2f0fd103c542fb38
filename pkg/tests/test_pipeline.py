import math

import numpy as np
import pytest

from blockrg.fluctuation import covariance_r, sqrt_eigen
from blockrg.lattice import TorusLattice, averaging_matrix, scaling_factor
from blockrg.pipeline import (
    ActionFactor,
    ActionFactorSetup,
    DensityState,
    LevelCounts,
    PipelineError,
    char_insert,
    final_integrals,
    final_integrals_counts,
    fluctuation_substitution,
    free_state,
    kappa_prime_limit,
    kprime_states,
    kprime_sum,
    last_step_translate,
    log_integral,
    quartic_state,
    rg_block_step,
    sample_zeta_support,
    small_factor_P,
    small_factor_W,
    fluctuation_support_check,
)
from blockrg.regions import BoundConstants, CubeGrid, CubeRegion, Generators, build_hierarchy, shrink
from blockrg.suites import random_hierarchy


def region(grid, *cubes):
    return CubeRegion(grid, frozenset(cubes))


# ---------------------------------------------------------------- block step


def marginal_precision(A, L, d, a):
    """Precision of Phi_1 from the joint Gaussian of (Phi_0, Phi_1), read off its covariance."""
    n0 = A.shape[0]
    fine = TorusLattice(d, L, 1, round(math.log(round(n0 ** (1 / d)), L)) - 1)
    Q = averaging_matrix(fine, 1).toarray()
    s, aL = scaling_factor(d, L), a * L
    n1 = Q.shape[0]
    J = np.zeros((n0 + n1, n0 + n1))
    J[:n0, :n0] = A + aL * Q.T @ Q
    J[:n0, n0:] = -aL * s * Q.T
    J[n0:, :n0] = -aL * s * Q
    J[n0:, n0:] = aL * s * s * np.eye(n1)
    cov = np.linalg.inv(J)
    return np.linalg.inv(cov[n0:, n0:])


@pytest.mark.parametrize("d,side", [(1, 2), (2, 1), (1, 3)])
def test_quadratic_step_schur_oracle(d, side):
    lat = TorusLattice(d, 2, 0, side)
    st = free_state(lat, 1.0)
    nxt = rg_block_step(st)
    assert np.allclose(nxt.precision, marginal_precision(st.precision, 2, d, 1.0), atol=1e-12)


@pytest.mark.parametrize("d,side", [(1, 2), (2, 2), (3, 1)])
def test_quadratic_step_preserves_integral(d, side):
    st = free_state(TorusLattice(d, 2, 0, side), 0.5)
    base = log_integral(st)
    for _ in range(side):
        st = rg_block_step(st)
        assert log_integral(st) == pytest.approx(base, abs=1e-10)


def test_callable_free_matches_quadratic():
    lat = TorusLattice(1, 2, 0, 2)
    q, c = free_state(lat, 1.0), quartic_state(lat, 1.0, 0.0)
    for _ in range(2):
        q, c = rg_block_step(q), rg_block_step(c)
    y = np.random.default_rng(0).normal(size=(5, 1))
    expect = q.log_z - 0.5 * np.einsum("mi,ij,mj->m", y, q.precision, y)
    assert np.allclose(c.log_density(y), expect, atol=1e-10)


def test_callable_quartic_preserves_integral():
    st = quartic_state(TorusLattice(1, 2, 0, 2), 1.0, 0.1)
    base = log_integral(st, nodes=24)
    for _ in range(2):
        st = rg_block_step(st)
    assert abs(math.expm1(log_integral(st) - base)) <= 1e-8


def test_state_validation():
    lat = TorusLattice(1, 2, 0, 2)
    with pytest.raises(PipelineError):
        DensityState(0, lat, "spline")
    with pytest.raises(PipelineError):
        DensityState(0, lat, "quadratic", precision=np.eye(3))
    with pytest.raises(PipelineError):
        quartic_state(TorusLattice(1, 2, 0, 4), 1.0, 0.1)


def test_ledger_mode():
    st = DensityState(0, TorusLattice(1, 2, 0, 3), "ledger")
    nxt = rg_block_step(st)
    assert nxt.lattice.n_sites == 4 and nxt.level == 1
    with pytest.raises(PipelineError):
        log_integral(nxt)


def test_single_block_stops():
    with pytest.raises(PipelineError):
        rg_block_step(free_state(TorusLattice(1, 2, 0, 0), 1.0))


# ---------------------------------------------------------------- last step


def test_translate_zero():
    h = random_hierarchy(TorusLattice(1, 2, 1, 2), np.random.default_rng(0))
    rep = last_step_translate(h, [np.zeros(4)], np.zeros(8), np.zeros(int(h.omegas[-1].sum() // 2)))
    assert rep.value == rep.base == rep.quadratic == rep.remainder == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_translate_exact_split(seed):
    rng = np.random.default_rng(seed)
    h = random_hierarchy(TorusLattice(1, 2, 1, 3), rng)
    n_last = int(h.omegas[-1].sum() // 2)
    rep = last_step_translate(h, [rng.normal(size=8)], rng.normal(size=16), rng.normal(size=n_last))
    assert abs(rep.remainder) <= 1e-10 * max(1.0, abs(rep.value))


# ---------------------------------------------------------------- substitution


def test_substitution_identity():
    rep = fluctuation_substitution(np.eye(3), np.eye(3))
    assert rep.jacobian == 0.0 and rep.error == pytest.approx(0.0, abs=1e-15) and rep.whitening == 0.0


def test_substitution_square_root():
    h = random_hierarchy(TorusLattice(1, 2, 1, 3), np.random.default_rng(2))
    C = covariance_r(h, 0.0)
    rep = fluctuation_substitution(C, sqrt_eigen(C))
    assert rep.error <= 1e-10 and rep.whitening <= 1e-10


def test_substitution_singular():
    with pytest.raises(PipelineError):
        fluctuation_substitution(np.eye(2), np.zeros((2, 2)))


# ---------------------------------------------------------------- characteristic functions


def test_char_insert_all_small():
    g = CubeGrid(1, 6, M=2)
    omega = region(g, (0,), (1,), (2,), (3,))
    terms = char_insert(omega, np.full(12, 0.5), 1.0, 0)
    alive = [t for t in terms if t.weight]
    assert len(alive) == 1 and alive[0].R.is_empty() and alive[0].weight == 1.0
    assert alive[0].lam == shrink(omega, 0)


def test_char_insert_lambda_shrinks():
    g = CubeGrid(1, 16)
    omega = region(g, *[(i,) for i in range(2, 14)])
    terms = char_insert(omega, np.zeros(16), 1.0, 1)
    empty_term = [t for t in terms if t.R.is_empty()][0]
    assert empty_term.lam == shrink(omega, 5)


def test_char_insert_one_violation():
    g = CubeGrid(1, 5, M=2)
    omega = region(g, (0,), (1,), (2,), (3,), (4,))
    W = np.zeros(10)
    W[5] = 3.0  # inside cube 2
    terms = char_insert(omega, W, 1.0, 0)
    alive = [t for t in terms if t.weight]
    assert math.fsum(t.weight for t in terms) == 1.0
    assert len(alive) == 1 and alive[0].R == region(g, (2,))


def test_char_insert_cap():
    g = CubeGrid(1, 20)
    with pytest.raises(PipelineError):
        char_insert(CubeRegion.full(g), np.zeros(20), 1.0, 0)


def test_support_zero_field():
    unit = TorusLattice(1, 2, 0, 3)
    n = unit.n_sites
    mask = np.ones(n, bool)
    rep = fluctuation_support_check(unit, np.arange(n), np.zeros((n, n)), np.zeros(n), mask, mask, 1.0, 0.5, 1.0, samples=20)
    assert rep.inside and rep.inside_after_resample and rep.outside_change == 0.0


def test_support_extremal_ratio():
    unit = TorusLattice(1, 2, 0, 3)
    n = unit.n_sites
    S = 0.1 * np.eye(n) + 0.02 * np.roll(np.eye(n), 1, axis=1)
    lam = np.ones(n, bool)
    lam[:2] = False
    inner = np.zeros(n, bool)
    inner[3:6] = True
    rep = fluctuation_support_check(unit, np.arange(n), S, np.zeros(n), lam, inner, 2.0, 1.0, 1.0, samples=50)
    assert rep.ratio == pytest.approx(0.12 / 2.0) and rep.ratio <= 0.5
    assert rep.inside and rep.inside_after_resample


# ---------------------------------------------------------------- small factors


def test_small_factor_off_support():
    g = CubeGrid(1, 4, M=2)
    P = region(g, (1,))
    pair = small_factor_W(np.zeros(8), P, 1.0)
    assert pair.lhs == 0.0 and pair.holds


def test_small_factor_threshold():
    g = CubeGrid(1, 4, M=2)
    R = region(g, (0,), (2,))
    W = np.zeros(8)
    W[0] = W[4] = 1.5
    pair = small_factor_W(W, R, 1.5)
    assert pair.lhs == pytest.approx(pair.rhs) and pair.holds
    W[1] = 0.2  # one more nonzero site only adds to the exponent
    assert small_factor_W(W, R, 1.5).lhs < pair.rhs


def test_small_factor_P_threshold():
    fine = TorusLattice(1, 2, 1, 2)
    g = CubeGrid(1, 4)
    Phi_j = np.zeros(8)
    Phi_next = np.array([0.0, 0.7, 0.0, 0.0])
    pair = small_factor_P(Phi_j, Phi_next, region(g, (1,)), fine, 1.0, 0.7)
    assert pair.lhs == pytest.approx(pair.rhs) == pytest.approx(math.exp(-0.25 * 2 * 0.49))


@pytest.mark.parametrize("seed", range(3))
def test_small_factor_random_support(seed):
    rng = np.random.default_rng(seed)
    g = CubeGrid(2, 3, M=2)
    R = region(g, (0, 0), (1, 2))
    for _ in range(200):
        W = sample_zeta_support(R, 1.3, rng)
        assert small_factor_W(W, R, 1.3).holds


def test_action_factor_empty_q_potential():
    af = ActionFactor(ActionFactorSetup(eps_prev=0.0, mu_prev=0.0))
    assert af.potential_constant(0.0) == 0.0
    af = ActionFactor(ActionFactorSetup(eps_prev=-0.01, mu_prev=-0.02, lam=0.1))
    C = af.potential_constant(4.0)
    st = af.setup
    assert C * st.lam ** st.beta * 4 == pytest.approx(2 * 0.01 * 4 + (4 * 0.02) ** 2 / (2 * 0.1) * 4)


def test_action_factor_gradient_spike():
    af = ActionFactor(ActionFactorSetup())
    Phi = np.zeros(af.setup.unit.n_sites)
    Phi[1] = 3 * af.setup.p
    res = af.evaluate(Phi)
    assert res.case == "D" and res.holds and res.path_margin >= 0


def test_action_factor_amplitude_spike():
    st = ActionFactorSetup(mu_bar=0.01, lam=0.1, d=1, side_exponent=3)
    af = ActionFactor(st)
    Phi = np.full(st.unit.n_sites, 1.5 * st.p / st.alpha)
    res = af.evaluate(Phi)
    assert res.case == "F" and res.holds and res.path_margin >= 0


@pytest.mark.parametrize("seed", range(2))
def test_action_factor_samples(seed):
    rng = np.random.default_rng(seed)
    af = ActionFactor(ActionFactorSetup())
    for _ in range(100):
        assert af.evaluate(af.sample(rng)).holds


# ---------------------------------------------------------------- final integrals


def test_final_integrals_full_torus():
    g = CubeGrid(1, 8)
    e = CubeRegion(g, frozenset())
    c = e.grid.coarser(2)
    ec = CubeRegion(c, frozenset())
    hier = build_hierarchy(g, [Generators(e, e, e), Generators(ec, ec, ec)], [1, 1], 2)
    rep = final_integrals(hier, BoundConstants(lam=1e-6, N=1))
    assert rep.exact == 0.0 and rep.assembled == 0.0 and rep.dominates


def test_final_integrals_single_site():
    c = BoundConstants(lam=1e-6, N=1, delta=0.01)
    rep = final_integrals_counts([LevelCounts(0, 0, 0), LevelCounts(1, 0, 0)], c)
    assert rep.per_level[1] == pytest.approx(math.log(2 * c.lam_k(1) ** (-0.25 - 0.01)))


def test_final_integrals_two_levels_dominate():
    c = BoundConstants(lam=1e-6, N=1)
    g = CubeGrid(1, 64)
    gc = g.coarser(2)
    hist = [
        Generators(CubeRegion(g, frozenset()), region(g, (5,)), CubeRegion(g, frozenset())),
        Generators(CubeRegion(gc, frozenset()), CubeRegion(gc, frozenset()), region(gc, (20,))),
    ]
    hier = build_hierarchy(g, hist, [1, 1], 2)
    rep = final_integrals(hier, c, C=1.0)
    assert rep.exact > 0
    assert final_integrals(hier, c, C=max(rep.C_min, 1e-9)).dominates


# ---------------------------------------------------------------- K'


@pytest.fixture(scope="module")
def kprime_table():
    c = BoundConstants(lam=1e-300)
    g = CubeGrid(1, 8)
    return c, g, kprime_states(g, 1, c)


def test_kprime_empty_theta(kprime_table):
    c, g, states = kprime_table
    rep = kprime_sum(g, 1, CubeRegion(g, frozenset()), c, kappa_prime_limit(c, 1), states=states)
    assert rep.log_sum == -math.inf and rep.holds


def test_kprime_single_cube(kprime_table):
    c, g, states = kprime_table
    rep = kprime_sum(g, 1, region(g, (3,)), c, kappa_prime_limit(c, 1), states=states)
    assert rep.holds


def test_kprime_monotone_in_lambda():
    margins = []
    g = CubeGrid(1, 8)
    for lam in (1e-100, 1e-200, 1e-300):
        c = BoundConstants(lam=lam)
        rep = kprime_sum(g, 1, CubeRegion.full(g), c, kappa_prime_limit(c, 1))
        margins.append(rep.margin)
    assert margins[0] < margins[1] < margins[2] and margins[0] > 0


def test_kprime_wrong_grid():
    c = BoundConstants(lam=1e-300)
    g = CubeGrid(1, 8)
    with pytest.raises(PipelineError):
        kprime_sum(g, 2, CubeRegion(g, frozenset()), c, 1.0)
