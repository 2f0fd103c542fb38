"""Verification suites: each takes a parameter dict and a seed and returns a JSON-ready report."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .action import ActionError, averaging_strengths, quadratic_forms, quadratic_lower_bound_constant
from .fluctuation import SqrtSpec, bare_partition_identity, covariance_build, covariance_r, sqrt_covariance, sqrt_eigen
from .greens import (
    Hierarchy,
    assemble,
    critical_cube_size,
    decay_certificate,
    default_weights,
    greens_exact,
    minimizer_identity_check,
    resolvent_rate_1d,
)
from .lattice import TorusLattice, averaging_matrix, block_map, block_mask
from .pipeline import (
    ActionFactor,
    ActionFactorSetup,
    char_insert,
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
)
from .polymer import (
    direct_sum,
    exponentiate,
    hardcore_brute,
    mayer_expand,
    stability_report,
    synthetic_shapes,
)
from .regions import (
    BoundConstants,
    CubeGrid,
    CubeRegion,
    Generators,
    connected_sets,
    covering_bound,
    enlarge,
    interior_blocks,
    region_recursion,
    resummation,
    shrink,
    tree_distance,
    tree_distance_mod,
)


class SuiteError(ValueError):
    pass


@dataclass
class Report:
    suite: str
    seed: int
    params: dict
    checks: list = field(default_factory=list)
    info: dict = field(default_factory=dict)
    runtime: float | None = None

    def check(self, name: str, passed: bool, value=None, bound=None, margin=None) -> bool:
        entry = {"name": name, "pass": bool(passed)}
        if value is not None:
            entry["value"] = _clean(value)
        if bound is not None:
            entry["bound"] = _clean(bound)
        if margin is not None:
            entry["margin"] = _clean(margin)
        self.checks.append(entry)
        return bool(passed)

    @property
    def passed(self) -> bool:
        return all(c["pass"] for c in self.checks)

    def to_dict(self, timing: bool = False) -> dict:
        out = {
            "suite": self.suite,
            "seed": self.seed,
            "params": _clean(self.params),
            "pass": self.passed,
            "passed": sum(c["pass"] for c in self.checks),
            "total": len(self.checks),
            "worst_margin": min((c["margin"] for c in self.checks if isinstance(c.get("margin"), (int, float))), default=None),
            "checks": self.checks,
            "info": _clean(self.info),
        }
        if timing and self.runtime is not None:
            out["runtime"] = self.runtime
        return out


def _clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# ---------------------------------------------------------------- parameter sets


@dataclass
class ZPreservation:
    d: int = 1
    L: int = 2
    side_exponent: int = 2
    lams: tuple = (0.0, 0.1)
    mu_bar: float = 1.0
    a: float = 1.0
    nodes: int = 10
    ref_nodes: int = 24
    tol: float = 1e-8
    quadratic_cases: tuple = ((1, 2, 3), (2, 2, 2))


@dataclass
class PartitionIdentityParams:
    cases: tuple = ((1, 1), (1, 2), (2, 1))
    L: int = 2
    side_exponent: int = 2
    mu_bar: float = 1.0
    a: float = 1.0
    tol: float = 1e-8


@dataclass
class MinimizerIdentity:
    lattices: tuple = ((1, 2, 2, 3), (1, 3, 1, 2), (2, 2, 1, 2), (2, 2, 2, 1))  # (d, L, k, side_exponent)
    instances: int = 100
    a: float = 1.0
    mu_bar: float = 1.0
    tol: float = 1e-9


@dataclass
class LastStep:
    lattices: tuple = ((1, 2, 1, 3), (1, 2, 2, 2), (2, 2, 1, 1))  # (d, L, k, side_exponent)
    instances: int = 20
    a: float = 1.0
    mu_bar: float = 1.0
    p0: float = 1.0
    tol: float = 1e-9
    sqrt_tol: float = 1e-6


@dataclass
class QuadraticBound:
    lattices: tuple = ((1, 2, 1, 3), (1, 2, 2, 2), (1, 3, 1, 2), (2, 2, 1, 2))  # (d, L, k, side_exponent)
    mus: tuple = (0.0, 0.25, 1.0)
    pairs: int = 1000
    rel_tol: float = 1e-9


@dataclass
class GreensDecay:
    instances: tuple = ((1, 2, 1, 5), (1, 2, 2, 4), (2, 2, 1, 4))  # (d, L, k, side_exponent)
    cube_sizes: tuple = (1, 2, 4, 8)
    mu_bar: float = 1.0
    a: float = 1.0
    n_max: int = 30
    rate_sites: int = 64
    rate_tol: float = 0.01


@dataclass
class SqrtCovariance:
    instances: int = 20
    sizes: tuple = (4, 8, 16, 32)
    max_cond: float = 1e3
    tol: float = 1e-6
    nodes: int = 32
    hierarchy: tuple = (1, 2, 1, 3)


@dataclass
class Covering:
    histories: int = 100
    dims: tuple = (1, 2)
    n0: tuple = (64, 32)
    L: int = 2
    r_int: int = 1
    density: float = 0.05
    declared_C: float = 10.0


@dataclass
class Resummation:
    instances: int = 100
    d: int = 1
    n: int = 8
    B0: float = 1.0
    kappa: float = 4.0
    kappa0: float = 1.0
    declared_C: float = 10.0
    tol: float = 1e-12


@dataclass
class SmallFactors:
    samples: int = 1000
    lattices: tuple = ((1, 2, 3, 1), (2, 2, 2, 2))  # (d, L, side_exponent of the coarse lattice, M)
    a: float = 1.0
    p: float = 2.0
    p0: float = 1.5
    action_setups: tuple = (
        {"d": 1, "side_exponent": 3, "mu_bar": 1.0, "lam": 0.1, "p": 2.0},
        {"d": 1, "side_exponent": 3, "mu_bar": 1e-4, "lam": 0.1, "p": 2.0},
        {"d": 2, "side_exponent": 2, "mu_bar": 1.0, "lam": 0.1, "p": 2.0},
    )


@dataclass
class KPrime:
    cases: tuple = ((1, 8), (2, 4))  # (d, cubes per axis at scale 0)
    lam: float = 1e-300
    p: float = 1.8
    p0: float = 1.6
    r: float = 0.3
    n0: int = 4
    C: float = 1.0
    kappa_prime: float | None = None


@dataclass
class Exponentiation:
    draws: int = 100
    universes: tuple = ((1, 1), (1, 2), (1, 3), (1, 4), (1, 5), (1, 6), (2, 2))  # (d, n): n^d cubes
    scale: float = 0.05
    kappa: float = 1.0
    tol: float = 1e-10
    z_values: tuple = (0.3, -0.2, 0.05)


@dataclass
class Stability:
    d: int = 3
    sides: tuple = (8, 12, 16)
    s_max: int = 3
    lam: float = 1e-3
    beta: float = 0.1
    kappa: float = 6.0
    c: float = 0.5
    oracle: tuple = (2, 7)  # (d, n) for the direct-summation check


def _params(cls, given: dict):
    names = {f.name for f in fields(cls)}
    bad = set(given) - names
    if bad:
        raise SuiteError(f"unknown parameters for {cls.__name__}: {sorted(bad)}")
    return cls(**given)


# ---------------------------------------------------------------- helpers


def random_hierarchy(fine: TorusLattice, rng: np.random.Generator, a: float = 1.0, mu_bar: float = 1.0, fill: float = 0.6) -> Hierarchy:
    """Nested block unions grown from the innermost region outwards; Omega_1 is never the full torus
    when the torus has more than one level-1 block, so the Dirichlet exterior is exercised."""
    k = fine.k
    weights = default_weights(averaging_strengths(a, fine.L, fine.d, k)[1:], fine.L, fine.d, k)
    if k == 0:
        return Hierarchy(fine, (np.ones(fine.n_sites, dtype=bool),), (), mu_bar)
    unit = fine.coarser(k)
    cur = rng.random(unit.n_sites) < fill
    if not cur.any():
        cur[rng.integers(unit.n_sites)] = True
    regions = [cur[block_map(fine, k)]]
    for j in range(k, 0, -1):
        coarse = fine.coarser(j)
        inside = np.zeros(coarse.n_sites, dtype=bool)
        inside[block_map(fine, j)[regions[0]]] = True
        inside |= rng.random(coarse.n_sites) < 0.5
        if j == 1 and inside.all() and coarse.n_sites > 1:
            free = np.flatnonzero(~np.isin(np.arange(coarse.n_sites), block_map(fine, 1)[regions[0]]))
            if free.size:
                inside[free[0]] = False
        regions.insert(0, inside[block_map(fine, j)])
    return Hierarchy(fine, tuple(regions), weights, mu_bar)


def _random_data(h: Hierarchy, rng: np.random.Generator) -> tuple[list, np.ndarray]:
    Phi = [rng.normal(size=h.fine.coarser(j).n_sites) for j in range(1, h.k + 1)]
    return Phi, rng.normal(size=h.fine.n_sites)


def _random_spd(n: int, cond: float, rng: np.random.Generator) -> np.ndarray:
    V, _ = np.linalg.qr(rng.normal(size=(n, n)))
    w = np.exp(rng.uniform(0, math.log(cond), size=n))
    w[0], w[-1] = 1.0, cond
    C = (V * w) @ V.T
    return 0.5 * (C + C.T)


def _random_subset(cells: list, p: float, rng: np.random.Generator) -> frozenset:
    return frozenset(c for c in cells if rng.random() < p)


# ---------------------------------------------------------------- suites


def suite_z_preservation(p: ZPreservation, rng, rep: Report) -> None:
    lat = TorusLattice(p.d, p.L, 0, p.side_exponent)
    for lam in p.lams:
        state = quartic_state(lat, p.mu_bar, lam, nodes=p.nodes)
        ref = log_integral(state, nodes=p.ref_nodes)
        for k in range(1, p.side_exponent + 1):
            state = rg_block_step(state, p.a)
            err = abs(math.expm1(log_integral(state) - ref))
            rep.check(f"callable lam={lam} steps={k}", err <= p.tol, err, p.tol, p.tol - err)
    for d, L, side in p.quadratic_cases:
        lat = TorusLattice(d, L, 0, side)
        state = free_state(lat, p.mu_bar)
        ref = log_integral(state)
        for k in range(1, side + 1):
            state = rg_block_step(state, p.a)
            err = abs(math.expm1(log_integral(state) - ref))
            rep.check(f"quadratic d={d} side={side} steps={k}", err <= p.tol, err, p.tol, p.tol - err)


def suite_partition_identity(p: PartitionIdentityParams, rng, rep: Report) -> None:
    for d, N in p.cases:
        res = bare_partition_identity(d, p.L, N, p.side_exponent, p.mu_bar, p.a)
        rep.check(f"d={d} N={N}", res.rel_err <= p.tol, res.rel_err, p.tol, p.tol - res.rel_err)
        rep.info[f"d={d} N={N}"] = {"log_z0": res.lhs, "log_z_recursion": res.log_z}


def suite_minimizer_identity(p: MinimizerIdentity, rng, rep: Report) -> None:
    for d, L, k, side in p.lattices:
        fine = TorusLattice(d, L, k, side)
        worst = 0.0
        for _ in range(p.instances):
            h = random_hierarchy(fine, rng, p.a, p.mu_bar)
            Phi, ext = _random_data(h, rng)
            worst = max(worst, minimizer_identity_check(h, Phi, ext))
        rep.check(f"d={d} L={L} k={k} side={side}", worst <= p.tol, worst, p.tol, p.tol - worst)


def suite_last_step(p: LastStep, rng, rep: Report) -> None:
    """Translation to the minimizer, the square-root change of variables and the characteristic
    function insertion, each checked on random hierarchies."""
    for d, L, k, side in p.lattices:
        fine = TorusLattice(d, L, k, side)
        name = f"d={d} L={L} k={k} side={side}"
        worst_rem = worst_sub = worst_white = worst_chi = 0.0
        for _ in range(p.instances):
            h = random_hierarchy(fine, rng, p.a, p.mu_bar)
            Phi, ext = _random_data(h, rng)
            n_last = int(h.omegas[-1].sum()) // L ** (d * k)
            tr = last_step_translate(h, Phi, ext, rng.normal(size=n_last))
            worst_rem = max(worst_rem, abs(tr.remainder) / max(1.0, abs(tr.value)))
            C = covariance_r(h, 0.0)
            sub = fluctuation_substitution(C, sqrt_covariance(C).value)
            worst_sub = max(worst_sub, sub.error)
            worst_white = max(worst_white, sub.whitening)
            grid = CubeGrid(d, fine.n_per_axis // L ** k, L ** k)
            omega = CubeRegion(grid, _random_subset(grid.cells(), 0.5, rng))
            terms = char_insert(omega, rng.normal(scale=p.p0, size=fine.n_sites), p.p0, 0)
            worst_chi = max(worst_chi, abs(math.fsum(t.weight for t in terms) - 1.0))
        rep.check(f"{name} translation remainder", worst_rem <= p.tol, worst_rem, p.tol, p.tol - worst_rem)
        rep.check(f"{name} change of variables", worst_sub <= p.tol, worst_sub, p.tol, p.tol - worst_sub)
        rep.check(f"{name} whitened form", worst_white <= p.sqrt_tol, worst_white, p.sqrt_tol, p.sqrt_tol - worst_white)
        rep.check(f"{name} partition of unity", worst_chi == 0.0, worst_chi, 0.0)


def suite_quadratic_bound(p: QuadraticBound, rng, rep: Report) -> None:
    for d, L, k, side in p.lattices:
        fine = TorusLattice(d, L, k, side)
        unit = fine.coarser(k)
        for mu in p.mus:
            mask = rng.random(unit.n_sites) < 0.7
            if not mask.any():
                mask[0] = True
            for region, um in (("full", np.ones(unit.n_sites, dtype=bool)), ("random", mask)):
                try:
                    res = quadratic_lower_bound_constant(fine, um, mu)
                except ActionError as exc:
                    rep.check(f"d={d} L={L} k={k} mu={mu} {region} c0", False, str(exc))
                    continue
                rep.check(f"d={d} L={L} k={k} mu={mu} {region} c0>0", res.c0 > 0, res.c0, 0.0, res.c0)
                fails = 0
                worst = math.inf
                A, Bm, m = quadratic_forms(fine, um, mu)
                fm = block_mask(fine, um, k)
                Qt = averaging_matrix(fine, k).T
                for i in range(p.pairs):
                    Phi = rng.normal(size=unit.n_sites)
                    phi = rng.normal(size=fine.n_sites) if i % 2 else Qt @ Phi + 0.1 * rng.normal(size=fine.n_sites)
                    v = np.r_[Phi[um], phi[fm]]
                    num, den = float(v @ A @ v), float(v[:m] @ Bm @ v[:m])
                    slack = num - res.c0 * den
                    worst = min(worst, slack / max(den, 1e-300))
                    fails += slack < -p.rel_tol * max(1.0, abs(num))
                rep.check(f"d={d} L={L} k={k} mu={mu} {region} pairs", fails == 0, fails, 0, worst)


def suite_greens_decay(p: GreensDecay, rng, rep: Report) -> None:
    for d, L, k, side in p.instances:
        fine = TorusLattice(d, L, k, side)
        h = random_hierarchy(fine, rng, p.a, p.mu_bar, fill=0.8)
        G = greens_exact(h)
        cert = decay_certificate(G, fine, np.flatnonzero(h.domain))
        ok = cert.status == "ok" and cert.gamma > 0
        rep.check(f"d={d} L={L} k={k} side={side} gamma>0", ok, cert.gamma, 0.0, cert.gamma if ok else None)
        op = assemble(h)
        sizes = [M for M in p.cube_sizes if fine.n_per_axis % M == 0 and M < fine.n_per_axis]
        M_star, table = critical_cube_size(op, sizes, p.n_max)
        rep.info[f"d={d} L={L} k={k} side={side}"] = {"M_star": M_star, "theta": table, "gamma": cert.gamma, "C": cert.C}
        above = [table[M] for M in sizes if M_star is not None and M >= M_star]
        ok = M_star is not None and all(t < 1 for t in above)
        rep.check(f"d={d} L={L} k={k} side={side} theta<1 for M>=M*", ok, max(above) if above else None, 1.0)
    # exact one-dimensional rate
    unit = TorusLattice(1, 2, 0, int(round(math.log2(p.rate_sites))))
    h = Hierarchy(unit, (np.ones(unit.n_sites, dtype=bool),), (), p.mu_bar)
    cert = decay_certificate(greens_exact(h), unit)
    exact = resolvent_rate_1d(p.mu_bar)
    rel = abs(cert.gamma - exact) / exact
    rep.check("d=1 rate vs resolvent", rel <= p.rate_tol, cert.gamma, exact, p.rate_tol - rel)


def suite_sqrt_covariance(p: SqrtCovariance, rng, rep: Report) -> None:
    worst = 0.0
    spec = SqrtSpec(nodes=p.nodes)
    for i in range(p.instances):
        n = p.sizes[i % len(p.sizes)]
        C = _random_spd(n, p.max_cond, rng)
        S = sqrt_covariance(C, spec).value
        err = float(np.max(np.abs(S - sqrt_eigen(C))))
        worst = max(worst, err)
        rep.check(f"instance {i} n={n}", err <= p.tol, err, p.tol, p.tol - err)
    d, L, k, side = p.hierarchy
    h = random_hierarchy(TorusLattice(d, L, k, side), rng)
    b = covariance_build(h, r_layers=1, quadrature=spec)
    err = float(np.max(np.abs(b.sqrt @ b.sqrt - b.C)))
    rep.check("hierarchy covariance S S = C", err <= p.tol, err, p.tol, p.tol - err)
    rep.info["worst"] = worst


def _random_history(grid0: CubeGrid, L: int, r_int: int, density: float, rng) -> list[Generators]:
    """Two-level generator history obeying the containment rules of the region recursion."""
    empty0 = CubeRegion(grid0)
    Q0 = CubeRegion(grid0, _random_subset(grid0.cells(), density, rng))
    if Q0.is_empty():
        Q0 = CubeRegion(grid0, frozenset([grid0.cells()[rng.integers(grid0.n_cubes)]]))
    g0 = Generators(empty0, Q0, empty0)
    lam0 = region_recursion(CubeRegion.full(grid0), empty0, Q0, empty0, r_int, L, coarsen=False).lam
    lam_bar = interior_blocks(lam0, L)
    grid1 = lam_bar.grid
    P = CubeRegion(grid1, _random_subset(sorted(lam_bar.cubes), density, rng))
    omega = (enlarge(lam_bar.complement(), 5 * r_int) | enlarge(P, 5 * r_int)).complement()
    Q = CubeRegion(grid1, _random_subset(sorted(shrink(omega, r_int).cubes), density, rng))
    R = CubeRegion(grid1, _random_subset(sorted(omega.cubes), density, rng))
    return [g0, Generators(P, Q, R)]


def suite_covering(p: Covering, rng, rep: Report) -> None:
    for d, n in zip(p.dims, p.n0):
        grid0 = CubeGrid(d, n)
        worst = 0.0
        widths = covered = True
        for _ in range(p.histories):
            hist = _random_history(grid0, p.L, p.r_int, p.density, rng)
            res = covering_bound(grid0, hist, [p.r_int] * 2, [float(p.r_int)] * 2, p.L)
            worst = max(worst, res.bound_constant)
            widths &= res.widths_match
            covered &= res.covered
        rep.check(f"d={d} widths match", widths)
        rep.check(f"d={d} cover contains Lambda^c", covered)
        rep.check(f"d={d} C <= {p.declared_C}", worst <= p.declared_C, worst, p.declared_C, p.declared_C - worst)


def suite_resummation(p: Resummation, rng, rep: Report) -> None:
    grid = CubeGrid(p.d, p.n)
    cells = grid.cells()
    worst_err = worst_C = 0.0
    monotone = True
    for _ in range(p.instances):
        omega = CubeRegion(grid, _random_subset(cells, 0.8, rng))
        lam = CubeRegion(grid, _random_subset(sorted(omega.cubes), 0.7, rng))
        if lam.is_empty() or omega == CubeRegion.full(grid):
            continue
        omega_c = omega.complement()
        B = {}
        for X in connected_sets(CubeRegion.full(grid), omega_c):
            if X.cubes & lam.cubes and rng.random() < 0.5:
                B[X] = float(rng.uniform(-1, 1)) * p.B0 * math.exp(-p.kappa * tree_distance_mod(X, omega_c))
        if not B:
            continue
        res = resummation(B, omega, lam, p.B0, p.kappa, p.kappa0)
        worst_err = max(worst_err, abs(res.total_in - res.total_out) / max(1.0, abs(res.total_in)))
        worst_C = max(worst_C, res.bound_constant)
        monotone &= res.distance_monotone
    rep.check("total sum preserved", worst_err <= p.tol, worst_err, p.tol, p.tol - worst_err)
    rep.check(f"bound constant <= {p.declared_C}", worst_C <= p.declared_C, worst_C, p.declared_C, p.declared_C - worst_C)
    rep.check("tree distance does not grow", monotone)


def suite_small_factors(p: SmallFactors, rng, rep: Report) -> None:
    for d, L, side, M in p.lattices:
        fine = TorusLattice(d, L, 1, side)
        grid = CubeGrid(d, L ** side // M, M)
        cells = grid.cells()
        bad_p = bad_w = 0
        worst_p = worst_w = math.inf
        for i in range(p.samples):
            P = CubeRegion(grid, _random_subset(cells, 0.4, rng) or frozenset([cells[0]]))
            dev = sample_zeta_support(P, p.p, rng)
            Phi_j = rng.normal(size=fine.n_sites)
            Phi_next = averaging_matrix(fine, 1) @ Phi_j + dev
            res = small_factor_P(Phi_j, Phi_next, P, fine, p.a, p.p)
            bad_p += not res.holds
            worst_p = min(worst_p, math.log(res.rhs) - (math.log(res.lhs) if res.lhs > 0 else -math.inf))
            W = sample_zeta_support(P, p.p0, rng)
            res = small_factor_W(W, P, p.p0)
            bad_w += not res.holds
            worst_w = min(worst_w, math.log(res.rhs) - (math.log(res.lhs) if res.lhs > 0 else -math.inf))
        rep.check(f"averaging factor d={d} M={M}", bad_p == 0, bad_p, 0, worst_p)
        rep.check(f"fluctuation factor d={d} M={M}", bad_w == 0, bad_w, 0, worst_w)
    for cfg in p.action_setups:
        st = ActionFactorSetup(**cfg)
        fac = ActionFactor(st)
        bad = 0
        cases: dict = {}
        worst = math.inf
        path_bad = 0
        for _ in range(p.samples):
            Phi = fac.sample(rng)
            res = fac.evaluate(Phi)
            bad += not res.holds
            cases[res.case] = cases.get(res.case, 0) + 1
            worst = min(worst, math.log(res.rhs) + res.s_hat / st.R2 ** st.d)
            path_bad += res.path_margin < -1e-9 * max(1.0, res.s_hat) if math.isfinite(res.path_margin) else 0
        name = f"action factor d={st.d} mu_bar={st.mu_bar} lam={st.lam}"
        rep.check(name, bad == 0, bad, 0, worst)
        rep.check(name + " case bounds", path_bad == 0, path_bad, 0)
        rep.info[name] = {"cases": dict(sorted(cases.items())), "c0": fac.c0, "c2": fac.c2}


def suite_kprime(p: KPrime, rng, rep: Report) -> None:
    for d, n in p.cases:
        const = BoundConstants(lam=p.lam, p=p.p, p0=p.p0, r=p.r, n0=p.n0, N=1)
        viol = const.violations()
        rep.check(f"d={d} sufficient conditions", not viol, viol or None)
        kp = kappa_prime_limit(const, d) if p.kappa_prime is None else p.kappa_prime
        grid0 = CubeGrid(d, n)
        final = grid0.coarser(const.L)
        states = kprime_states(grid0, 2, const, p.C)
        reachable = sorted({lam.complement() for lam, _ in states[0]}, key=lambda t: (len(t), t.to_json()))
        rep.info[f"d={d}"] = {"histories": states[1], "kappa_prime": kp, "c2": const.c2(d), "reachable": [len(t) for t in reachable]}
        for theta in reachable:
            if len(theta) > 4:
                continue
            res = kprime_sum(grid0, 2, theta, const, kp, p.C, states)
            rep.check(f"d={d} |Theta|={len(theta)}", res.holds, res.log_sum, res.log_bound, res.margin)


def suite_exponentiation(p: Exponentiation, rng, rep: Report) -> None:
    for d, n in p.universes:
        grid = CubeGrid(d, n)
        U = CubeRegion.full(grid)
        polys = connected_sets(U)
        worst = 0.0
        for _ in range(p.draws):
            K = {X.cubes: float(rng.uniform(-1, 1)) * p.scale * math.exp(-p.kappa * tree_distance(X)) for X in polys}
            H = exponentiate(K, U.cubes)
            lhs = math.exp(math.fsum(H.values()))
            rhs = hardcore_brute(K)
            worst = max(worst, abs(lhs - rhs) / abs(rhs))
        rep.check(f"universe d={d} n={n}", worst <= p.tol, worst, p.tol, p.tol - worst)
    cell = frozenset([(0,)])
    for z in p.z_values:
        h = exponentiate({cell: z}, [(0,)])[cell]
        err = abs(h - math.log1p(z))
        rep.check(f"single polymer z={z}", err <= 1e-12, err, 1e-12, 1e-12 - err)
    E = {frozenset([(i,)]): float(rng.normal()) for i in range(8)}
    m = mayer_expand(E)
    rep.check("mayer identity", m.error <= p.tol, m.error, p.tol, p.tol - m.error)


def suite_stability(p: Stability, rng, rep: Report) -> None:
    shapes = synthetic_shapes(p.d, p.s_max, p.c, p.lam, p.beta, p.kappa, rng)
    for n in p.sides:
        res = stability_report(shapes, p.d, n, p.lam, p.beta, p.c, p.kappa, p.s_max)
        rep.check(f"d={p.d} n={n}", res.holds, abs(res.total) + res.tail, res.bound, res.margin)
        rep.info[f"n={n}"] = res.to_json()
    zero = stability_report({}, p.d, p.sides[0], p.lam, p.beta)
    rep.check("zero activity ratio bounds", zero.log_lower == 0 and zero.log_upper == 0, [zero.log_lower, zero.log_upper])
    d, n = p.oracle
    small = synthetic_shapes(d, p.s_max, p.c, p.lam, p.beta, p.kappa, rng)
    fast = stability_report(small, d, n, p.lam, p.beta).total
    slow = direct_sum(small, d, n)
    err = abs(fast - slow) / max(1.0, abs(slow))
    rep.check(f"translation count vs direct sum d={d} n={n}", err <= 1e-12, err, 1e-12)


SUITES: dict[str, tuple[type, Callable]] = {
    "z-preservation": (ZPreservation, suite_z_preservation),
    "partition-identity": (PartitionIdentityParams, suite_partition_identity),
    "minimizer-identity": (MinimizerIdentity, suite_minimizer_identity),
    "greens-decay": (GreensDecay, suite_greens_decay),
    "sqrt-covariance": (SqrtCovariance, suite_sqrt_covariance),
    "quadratic-bound": (QuadraticBound, suite_quadratic_bound),
    "covering": (Covering, suite_covering),
    "resummation": (Resummation, suite_resummation),
    "small-factors": (SmallFactors, suite_small_factors),
    "kprime": (KPrime, suite_kprime),
    "last-step": (LastStep, suite_last_step),
    "exponentiation": (Exponentiation, suite_exponentiation),
    "stability": (Stability, suite_stability),
}


@dataclass
class ExperimentConfig:
    suite: str
    seed: int = 0
    params: dict = field(default_factory=dict)

    def validate(self):
        if self.suite not in SUITES:
            raise SuiteError(f"unknown suite {self.suite!r}; choose from {sorted(SUITES)}")
        cls, _ = SUITES[self.suite]
        return _params(cls, self.params)


def run_suite(config: ExperimentConfig) -> Report:
    params = config.validate()
    _, fn = SUITES[config.suite]
    rep = Report(config.suite, config.seed, asdict(params))
    rng = np.random.default_rng(config.seed)
    t = time.perf_counter()
    fn(params, rng, rep)
    rep.runtime = time.perf_counter() - t
    return rep
