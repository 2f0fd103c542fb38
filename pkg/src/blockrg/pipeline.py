"""The renormalization step on densities and the checks of the last-step sequence: translation,
fluctuation substitution, characteristic-function insertion, small factors and the final integrals."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .action import action_terms, potential_lower_bound, quadratic_lower_bound_constant
from .fluctuation import logdet_spd, restricted_precision, z_recursion
from .greens import Hierarchy, _coarse_mask, assemble, localized_field, objective, solve_minimizer, source
from .lattice import TorusLattice, averaging_matrix, block_map, bonds, gaussian_normalization, laplacian_matrix, scaling_factor
from .regions import (
    BoundConstants,
    CubeGrid,
    CubeRegion,
    Generators,
    RegionHierarchy,
    enlarge,
    interior_blocks,
    refine,
    region_recursion,
    shrink,
)


class PipelineError(ValueError):
    pass


# ---------------------------------------------------------------- density recursion


@dataclass(frozen=True)
class DensityState:
    """rho_k on the unit lattice. quadratic: rho = exp(log_z - 1/2 Phi A Phi); callable: log rho given
    as a vectorized function with a Gaussian reference precision used to place quadrature nodes;
    ledger: sizes and log Z only."""

    level: int
    lattice: TorusLattice
    mode: str
    log_z: float = 0.0
    precision: np.ndarray | None = field(default=None, repr=False)
    log_density: Callable | None = field(default=None, repr=False)
    reference: np.ndarray | None = field(default=None, repr=False)
    nodes: int = 10
    site_cap: int = 8

    def __post_init__(self):
        if self.mode not in ("quadratic", "callable", "ledger"):
            raise PipelineError(f"unknown mode {self.mode!r}")
        n = self.lattice.n_sites
        if self.mode == "quadratic" and (self.precision is None or self.precision.shape != (n, n)):
            raise PipelineError("quadratic mode needs an n x n precision matrix")
        if self.mode == "callable":
            if self.log_density is None or self.reference is None:
                raise PipelineError("callable mode needs a log density and a reference precision")
            if n > self.site_cap:
                raise PipelineError(f"{n} sites exceeds the callable-mode cap {self.site_cap}")


def free_state(lattice: TorusLattice, mu_bar: float) -> DensityState:
    """rho_0 = exp(-1/2|dPhi|^2 - 1/2 mu_bar |Phi|^2) in quadratic mode."""
    A = laplacian_matrix(lattice).toarray() + mu_bar * np.eye(lattice.n_sites)
    return DensityState(0, lattice, "quadratic", 0.0, A)


def quartic_state(lattice: TorusLattice, mu_bar: float, lam: float, nodes: int = 10, site_cap: int = 8) -> DensityState:
    """rho_0 = exp(-S_0 - 1/4 lam sum Phi^4) in callable mode."""
    A = laplacian_matrix(lattice).toarray() + mu_bar * np.eye(lattice.n_sites)

    def log_rho(X: np.ndarray) -> np.ndarray:
        X2 = X * X
        out = np.sum((X @ A) * X, axis=-1)
        out *= -0.5
        if lam:
            out -= 0.25 * lam * np.sum(X2 * X2, axis=-1)
        return out

    return DensityState(0, lattice, "callable", 0.0, None, log_rho, A, nodes, site_cap)


def _step_lattices(lat: TorusLattice) -> tuple[TorusLattice, TorusLattice]:
    if lat.side_exponent < 1:
        raise PipelineError("the torus is a single block; no further step")
    fine = TorusLattice(lat.d, lat.L, 1, lat.side_exponent - 1)
    return fine, TorusLattice(lat.d, lat.L, 0, lat.side_exponent - 1)


def _gh_grid(nodes: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Standard-normal tensor nodes (T, n) and log of weight * e^{|t|^2/2}."""
    t, w = np.polynomial.hermite_e.hermegauss(nodes)
    idx = np.array(list(itertools.product(range(nodes), repeat=n)), dtype=int).reshape(-1, n)
    pts = t[idx]
    logw = np.sum(np.log(w)[idx] + 0.5 * t[idx] ** 2, axis=1)
    return pts, logw


def rg_block_step(state: DensityState, a: float = 1.0, nodes: int | None = None, chunk: int = 1 << 21) -> DensityState:
    """rho_{k+1}(Phi) = s^{n1} int dPhi0 N_{aL}^{-1} exp(-aL/2 |s Phi - Q Phi0|^2) rho_k(Phi0), s = L^{-(d-2)/2}."""
    lat = state.lattice
    fine, coarse = _step_lattices(lat)
    d, L = lat.d, lat.L
    s = scaling_factor(d, L)
    aL = a * L
    Q = averaging_matrix(fine, 1).toarray()
    n0, n1 = Q.shape[1], Q.shape[0]
    if state.mode == "ledger":
        return replace(state, level=state.level + 1, lattice=coarse)
    base = state.precision if state.mode == "quadratic" else state.reference
    J = base + aL * Q.T @ Q
    C = np.linalg.inv(J)
    C = 0.5 * (C + C.T)
    new_prec = s * s * (aL * np.eye(n1) - aL * aL * Q @ C @ Q.T)
    new_prec = 0.5 * (new_prec + new_prec.T)
    if state.mode == "quadratic":
        log_z = z_recursion(state.log_z, n0, n1, logdet_spd(C), aL, L, d)
        return replace(state, level=state.level + 1, lattice=coarse, log_z=log_z, precision=new_prec)
    m = nodes or state.nodes
    pts, logw = _gh_grid(m, n0)
    R = np.linalg.cholesky(C)
    offs = pts @ R.T
    log_det_r = float(np.sum(np.log(np.diag(R))))
    log_norm = -gaussian_normalization(aL, n1) + n1 * math.log(s) + log_det_r
    parent = state.log_density
    mean_map = aL * s * (C @ Q.T)  # (n0, n1)

    def log_rho(Y: np.ndarray) -> np.ndarray:
        Y = np.asarray(Y, dtype=float)
        lead = Y.shape[:-1]
        Y = Y.reshape(-1, n1)
        out = np.empty(Y.shape[0])
        per = max(1, chunk // (offs.shape[0] * n0))
        for i in range(0, Y.shape[0], per):
            y = Y[i : i + per]
            phi = (y @ mean_map.T)[:, None, :] + offs[None, :, :]
            dev = phi @ Q.T
            dev -= s * y[:, None, :]
            val = parent(phi)
            val -= 0.5 * aL * np.sum(dev * dev, axis=-1)
            val += logw
            out[i : i + per] = logsumexp(val, axis=1) + log_norm
        return out.reshape(lead)

    return replace(state, level=state.level + 1, lattice=coarse, log_density=log_rho, reference=new_prec, nodes=m)


def log_integral(state: DensityState, nodes: int | None = None) -> float:
    """log int rho_k dPhi (closed form in quadratic mode, reference-Gaussian quadrature in callable mode)."""
    n = state.lattice.n_sites
    if state.mode == "quadratic":
        return state.log_z + 0.5 * n * math.log(2 * math.pi) - 0.5 * logdet_spd(state.precision)
    if state.mode == "ledger":
        raise PipelineError("ledger mode carries no density")
    m = nodes or state.nodes
    C = np.linalg.inv(state.reference)
    R = np.linalg.cholesky(0.5 * (C + C.T))
    pts, logw = _gh_grid(m, n)
    vals = state.log_density(pts @ R.T) + logw
    return float(logsumexp(vals)) + float(np.sum(np.log(np.diag(R))))


# ---------------------------------------------------------------- last step: translation


@dataclass(frozen=True)
class TranslateReport:
    value: float
    base: float
    quadratic: float
    remainder: float
    cross: float
    loc_error: float


def last_step_translate(h: Hierarchy, Phi: list, phi_ext: np.ndarray, Z: np.ndarray, psi_loc: np.ndarray | None = None) -> TranslateReport:
    """Substitute Phi_k = Psi_used + Z on Omega_{k+1} and split the minimized action into the
    plus-problem minimum, 1/2 <Z, Delta Z> and a remainder (zero when Psi_used is the exact Psi)."""
    plus = solve_minimizer(h, Phi, phi_ext, plus=True)
    last = _coarse_mask(h.fine, h.omegas[-1], h.k)
    psi_used = plus.psi if psi_loc is None else np.where(last, psi_loc, 0.0)
    Zf = np.zeros_like(plus.psi)
    Zf[last] = np.asarray(Z, dtype=float)
    data = list(Phi)
    data[-1] = np.where(last, psi_used + Zf, np.asarray(Phi[-1], dtype=float))
    full = solve_minimizer(h, data, phi_ext, plus=False)
    value = objective(h, full.phi, data, plus=False)
    base = objective(h, plus.phi, Phi, plus=True)
    D = restricted_precision(h)
    z = Zf[last]
    quad = 0.5 * float(z @ D @ z)
    shift = (psi_used - plus.psi)[last]
    return TranslateReport(
        value, base, quad, value - base - quad, float(np.abs(D @ shift).max()) if shift.size else 0.0, float(np.abs(shift).max()) if shift.size else 0.0
    )


def localized_psi(h: Hierarchy, Phi: list, phi_ext: np.ndarray, M: int, r_layers: int) -> np.ndarray:
    """Psi^loc = [Q_k phi^loc] on Omega_{k+1} with phi^loc glued from cube-localized solves."""
    op = assemble(h, plus=True)
    f = source(h, Phi, phi_ext, plus=True)
    lf = localized_field(op, f, M, r_layers)
    phi = np.where(h.domain, 0.0, np.asarray(phi_ext, dtype=float))
    phi[op.idx] = lf.phi_loc
    last = _coarse_mask(h.fine, h.omegas[-1], h.k)
    return np.where(last, averaging_matrix(h.fine, h.k) @ phi, 0.0)


# ---------------------------------------------------------------- fluctuation substitution


@dataclass(frozen=True)
class SubstitutionReport:
    jacobian: float
    log_z_integral: float
    log_w_integral: float
    error: float
    whitening: float  # max |S^T C^{-1} S - I|: zero when the W measure is standard normal


def fluctuation_substitution(C: np.ndarray, S: np.ndarray) -> SubstitutionReport:
    """Z = S W in int dZ exp(-1/2 Z C^{-1} Z): log|det S|, both sides of the change of variables and
    how far the W-space form is from the identity (zero exactly when S S^T = C)."""
    n = C.shape[0]
    sign, jac = np.linalg.slogdet(S)
    if sign == 0 or not np.isfinite(jac):
        raise PipelineError("singular square root")
    P = np.linalg.inv(C)
    lhs = 0.5 * n * math.log(2 * math.pi) + 0.5 * logdet_spd(C)
    T = S.T @ P @ S
    T = 0.5 * (T + T.T)
    rhs = jac + 0.5 * n * math.log(2 * math.pi) - 0.5 * logdet_spd(T)
    white = float(np.abs(T - np.eye(n)).max()) if n else 0.0
    return SubstitutionReport(float(jac), lhs, float(rhs), float(abs(lhs - rhs)), white)


# ---------------------------------------------------------------- characteristic functions


def cube_sites(grid: CubeGrid, cube: tuple) -> tuple:
    return tuple(slice(c * grid.M, (c + 1) * grid.M) for c in cube)


def cube_ok(grid: CubeGrid, W: np.ndarray, cube: tuple, threshold: float) -> bool:
    return bool(np.all(np.abs(W[cube_sites(grid, cube)]) <= threshold))


@dataclass(frozen=True)
class CharTerm:
    R: CubeRegion
    weight: float
    lam: CubeRegion


def char_insert(omega: CubeRegion, W: np.ndarray, p0: float, r_int: int, max_cubes: int = 12) -> list[CharTerm]:
    """All R in Omega with weight zeta^w(R) chi^w(Omega - R); Lambda = Omega^{5 nat} - R^{5*}."""
    grid = omega.grid
    W = np.asarray(W, dtype=float).reshape((grid.n * grid.M,) * grid.d)
    cubes = sorted(omega.cubes)
    if len(cubes) > max_cubes:
        raise PipelineError(f"{len(cubes)} cubes exceeds the enumeration cap {max_cubes}")
    chi = {c: 1.0 if cube_ok(grid, W, c, p0) else 0.0 for c in cubes}
    inner = shrink(omega, 5 * r_int)
    out = []
    for bits in range(1 << len(cubes)):
        chosen = [c for i, c in enumerate(cubes) if bits >> i & 1]
        weight = 1.0
        for c in cubes:
            weight *= (1.0 - chi[c]) if c in chosen else chi[c]
        R = CubeRegion(grid, frozenset(chosen))
        out.append(CharTerm(R, weight, inner - enlarge(R, 5 * r_int)))
    return out


@dataclass(frozen=True)
class SupportReport:
    inside: bool
    inside_after_resample: bool
    outside_change: float
    C: float
    ratio: float  # C p0 / p
    samples: int


def fluctuation_support_check(
    unit: TorusLattice,
    sites: np.ndarray,
    S_loc: np.ndarray,
    psi_loc: np.ndarray,
    lam_mask: np.ndarray,
    inner_mask: np.ndarray,
    p: float,
    p0: float,
    alpha: float,
    samples: int = 200,
    rng: np.random.Generator | None = None,
) -> SupportReport:
    """Phi = Psi^loc + S_loc W on Omega sites with |W| <= p0 on Lambda; checks |Phi| <= 2p/alpha and
    |dPhi| <= 3p on the inner region, under resampling of W inside and outside Lambda."""
    rng = rng or np.random.default_rng(0)
    n = sites.size
    lam_mask = np.asarray(lam_mask, dtype=bool)
    inner_mask = np.asarray(inner_mask, dtype=bool)
    full_inner = np.zeros(unit.n_sites, dtype=bool)
    full_inner[sites[inner_mask]] = True
    t, hd = bonds(unit, full_inner)
    pos = np.full(unit.n_sites, -1)
    pos[sites] = np.arange(n)
    t, hd = pos[t], pos[hd]

    def ok(Wv: np.ndarray) -> tuple[bool, np.ndarray]:
        phi = psi_loc + S_loc @ Wv
        amp = np.all(np.abs(phi[inner_mask]) <= 2 * p / alpha)
        grad = np.all(np.abs(phi[hd] - phi[t]) <= 3 * p) if t.size else True
        return bool(amp and grad), phi

    def draw() -> np.ndarray:
        Wv = np.empty(n)
        k = int(lam_mask.sum())
        Wv[lam_mask] = rng.choice([-p0, p0], size=k) if rng.random() < 0.3 else rng.uniform(-p0, p0, size=k)
        Wv[~lam_mask] = rng.normal(scale=3 * p0, size=n - k)
        return Wv

    inside = after = True
    change = 0.0
    for _ in range(samples):
        Wv = draw()
        a, phi = ok(Wv)
        inside &= a
        W2 = Wv.copy()
        W2[lam_mask] = rng.uniform(-p0, p0, size=int(lam_mask.sum()))
        after &= ok(W2)[0]
        W3 = Wv.copy()
        W3[~lam_mask] = rng.normal(scale=3 * p0, size=n - int(lam_mask.sum()))
        _, phi3 = ok(W3)
        if inner_mask.any():
            change = max(change, float(np.abs(phi3 - phi)[inner_mask].max()))
    C = float(np.abs(S_loc).sum(axis=1).max()) if n else 0.0
    return SupportReport(inside, after, change, C, C * p0 / p, samples)


# ---------------------------------------------------------------- small factors


@dataclass(frozen=True)
class FactorPair:
    lhs: float
    rhs: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs * (1 + 1e-12)


def _deviation_factor(dev: np.ndarray, region: CubeRegion, threshold: float, coeff: float) -> FactorPair:
    grid = region.grid
    dev = np.asarray(dev, dtype=float).reshape((grid.n * grid.M,) * grid.d)
    zeta = 1.0
    sq = 0.0
    for c in region.cubes:
        block = dev[cube_sites(grid, c)]
        if not np.any(np.abs(block) >= threshold):
            zeta = 0.0
        sq += float(np.sum(block ** 2))
    lhs = math.exp(-coeff * sq) * zeta
    rhs = math.exp(-coeff * threshold ** 2 * len(region))
    return FactorPair(lhs, rhs)


def small_factor_P(Phi_j: np.ndarray, Phi_next: np.ndarray, P: CubeRegion, fine: TorusLattice, a: float, p_j: float) -> FactorPair:
    """exp(-1/4 aL |Phi_{j+1} - Q Phi_j|^2_P) zeta^q(P) <= exp(-1/4 aL p_j^2 #cubes(P))."""
    dev = np.asarray(Phi_next) - averaging_matrix(fine, 1) @ np.asarray(Phi_j)
    return _deviation_factor(dev, P, p_j, 0.25 * a * fine.L)


def small_factor_W(W: np.ndarray, R: CubeRegion, p0: float) -> FactorPair:
    """exp(-1/4 |W|^2_R) zeta^w(R) <= exp(-1/4 p0^2 #cubes(R))."""
    return _deviation_factor(W, R, p0, 0.25)


def sample_zeta_support(region: CubeRegion, threshold: float, rng: np.random.Generator, spread: float = 1.2, max_tries: int = 10000) -> np.ndarray:
    """Rejection sample from a Gaussian scaled to the threshold until every cube of the region has a
    site with |value| >= threshold; sites outside the region are Gaussian at the same scale."""
    grid = region.grid
    shape = (grid.n * grid.M,) * grid.d
    for _ in range(max_tries):
        x = rng.normal(scale=spread * threshold, size=shape)
        if all(np.any(np.abs(x[cube_sites(grid, c)]) >= threshold) for c in region.cubes):
            return x.reshape(-1)
    raise PipelineError("rejection sampling did not reach the support")


@dataclass(frozen=True)
class ActionFactorSetup:
    """Single-cube reduction of the action small-factor bound on a small torus of unit cubes (M = 1)."""

    d: int = 1
    L: int = 2
    side_exponent: int = 3
    a: float = 1.0
    mu_bar: float = 1.0
    lam: float = 0.1
    p: float = 2.0
    c1: float = 0.5
    R: int = 0
    eps_prev: float = 0.0
    mu_prev: float = 0.0
    beta: float = 0.1

    @property
    def fine(self) -> TorusLattice:
        return TorusLattice(self.d, self.L, 1, self.side_exponent)

    @property
    def unit(self) -> TorusLattice:
        return self.fine.coarser(1)

    @property
    def alpha(self) -> float:
        return max(self.mu_bar ** 0.5, self.lam ** 0.25)

    @property
    def R1(self) -> int:
        return 2 * self.R + 1

    @property
    def R2(self) -> int:
        return 2 * self.R1 + 1


@dataclass(frozen=True)
class ActionFactorResult:
    case: str
    lhs: float
    rhs: float
    holds: bool
    s_hat: float
    path_margin: float


class ActionFactor:
    """exp(-R2^{-d} S_hat(window)) zeta(cube) <= exp(-c2 p^2) with phi the global minimizer given Phi."""

    def __init__(self, setup: ActionFactorSetup, center: int = 0):
        self.setup = st = setup
        fine, unit = st.fine, st.unit
        eta = fine.spacing
        self.Q = averaging_matrix(fine, 1).toarray()
        H = st.a * self.Q.T @ self.Q + eta ** (st.d - 2) * laplacian_matrix(fine).toarray() + eta ** st.d * st.mu_bar * np.eye(fine.n_sites)
        self.G = np.linalg.solve(H, st.a * self.Q.T)
        c = unit.coords()
        diff = np.abs(c - c[center])
        dist = np.max(np.minimum(diff, unit.n_per_axis - diff), axis=1)
        if 2 * st.R1 + 1 > unit.n_per_axis:
            raise PipelineError("window wraps around the torus")
        self.window = dist <= st.R1
        self.cube = dist == 0
        self.fine_cube = self.cube[self.block]
        self.c0 = quadratic_lower_bound_constant(fine, self.window, min(st.mu_bar, 1.0)).c0 if st.a == 1.0 else math.nan
        self.c2 = BoundConstants(L=st.L, c0=self.c0 if math.isfinite(self.c0) else 0.0, c1=st.c1, R=st.R, a=st.a).c2(st.d)

    @property
    def block(self) -> np.ndarray:
        return block_map(self.setup.fine, 1)

    def field(self, Phi: np.ndarray) -> np.ndarray:
        return self.G @ Phi

    def zeta(self, Phi: np.ndarray, phi: np.ndarray) -> float:
        st = self.setup
        fine = st.fine
        eta = fine.spacing
        dev = (Phi - self.Q @ phi)[self.cube]
        t, h = bonds(fine, self.fine_cube)
        grad = np.abs(phi[h] - phi[t]) / eta
        amp = np.abs(phi[self.fine_cube])
        chi = np.all(np.abs(dev) <= st.p) and np.all(grad <= st.p) and np.all(amp <= st.p / st.alpha)
        return 0.0 if chi else 1.0

    def case(self, Phi: np.ndarray) -> str:
        st = self.setup
        t, h = bonds(st.unit, self.window)
        if t.size and np.max(np.abs(Phi[h] - Phi[t])) >= st.c1 * st.p:
            return "D"
        if np.max(np.abs(Phi[self.window])) >= st.c1 * st.p / st.alpha:
            return "E" if st.alpha == st.mu_bar ** 0.5 else "F"
        return "C"

    def evaluate(self, Phi: np.ndarray) -> ActionFactorResult:
        st = self.setup
        fine = st.fine
        phi = self.field(Phi)
        terms = action_terms(fine, self.window, Phi, phi, st.a, st.mu_bar)
        fmask = self.window[self.block]
        quart = st.lam / 8 * fine.spacing ** st.d * float(np.sum(phi[fmask] ** 4))
        s_hat = terms.starred + quart
        z = self.zeta(Phi, phi)
        lhs = math.exp(-s_hat / st.R2 ** st.d) * z
        rhs = math.exp(-self.c2 * st.p ** 2)
        case = self.case(Phi)
        if case in ("D", "E") and math.isfinite(self.c0):
            margin = terms.starred - self.c0 * st.c1 ** 2 * st.p ** 2
        elif case == "F":
            margin = quart - st.c1 ** 4 * st.p ** 4 / 128
        else:
            margin = math.nan
        return ActionFactorResult(case, lhs, rhs, lhs <= rhs * (1 + 1e-12), s_hat, margin)

    def potential_constant(self, volume: float) -> float:
        """Smallest C with -V(L^d eps, L^2 mu, lam/2) <= C lam^beta Vol."""
        st = self.setup
        if volume == 0:
            return 0.0
        bound = -potential_lower_bound(st.L ** st.d * st.eps_prev, st.L ** 2 * st.mu_prev, st.lam / 2, volume)
        return bound / (st.lam ** st.beta * volume)

    def sample(self, rng: np.random.Generator, max_tries: int = 20000) -> np.ndarray:
        """Rejection sample Phi on the support of zeta(cube) from spike or Gaussian proposals."""
        st = self.setup
        unit = st.unit
        for _ in range(max_tries):
            kind = rng.integers(3)
            Phi = rng.normal(scale=0.3 * st.p, size=unit.n_sites)
            if kind == 0:
                Phi[rng.integers(unit.n_sites)] += rng.choice([-1, 1]) * rng.uniform(1, 3) * st.p
            elif kind == 1:
                Phi += rng.choice([-1, 1]) * rng.uniform(0.5, 2) * st.p / st.alpha
            if self.zeta(Phi, self.field(Phi)) == 1.0:
                return Phi
        raise PipelineError("rejection sampling did not reach the support")


# ---------------------------------------------------------------- final integrals


@dataclass(frozen=True)
class LevelCounts:
    """Site counts at one scale: box region for the amplitude bound, Gaussian sites, Lambda^c sites."""

    box: int
    gauss: int
    lambda_c: int


@dataclass(frozen=True)
class FinalIntegralReport:
    exact: float
    per_level: list
    C_min: float
    C: float
    assembled: float
    dominates: bool


def final_integrals_counts(levels: list[LevelCounts], constants: BoundConstants, C: float = 1.0) -> FinalIntegralReport:
    """Sum of log box-volume factors [2 lam_j^{-1/4-delta}]^box, log N(a L / 2, gauss) for j >= 1 and the
    mu_bar_0 Gaussian (4 pi / mu_bar_0)^{gauss/2} at j = 0, against C sum_j (-log lam_j)|Lambda_j^c|."""
    per = []
    weight = 0.0
    for j, lc in enumerate(levels):
        ell = -math.log(constants.lam_k(j))
        box = lc.box * (math.log(2) + (0.25 + constants.delta) * ell)
        if j == 0:
            gauss = 0.5 * lc.gauss * math.log(4 * math.pi / constants.mu_bar_k(0)) if lc.gauss else 0.0
        else:
            gauss = gaussian_normalization(0.5 * constants.a * constants.L, lc.gauss)
        per.append(box + gauss)
        weight += ell * lc.lambda_c
    exact = math.fsum(per)
    C_min = exact / weight if weight > 0 else (0.0 if exact <= 0 else math.inf)
    assembled = C * weight
    return FinalIntegralReport(exact, per, C_min, C, assembled, assembled >= exact)


def hierarchy_counts(hier: RegionHierarchy, L: int) -> list[LevelCounts]:
    """Per-level counts. j = 0: box on Lambda_0 - Omega_1, mu_bar_0 Gaussian on Lambda_0^c.
    j >= 1: box and kernel Gaussian on dOmega_j = Omega_j - Omega_{j+1}; the last level has none."""
    K = len(hier.lambdas)
    out = []
    for j in range(K):
        lam = hier.lambdas[j]
        grid = lam.grid
        vol = grid.M ** grid.d
        nxt = refine(hier.omegas[j], grid, L) if j + 1 < K else None
        lam_c = len(lam.complement()) * vol
        if j == 0:
            box = len(lam - nxt) * vol if nxt is not None else 0
            out.append(LevelCounts(box, lam_c, lam_c))
        else:
            d_omega = len(hier.omegas[j - 1] - nxt) * vol if nxt is not None else 0
            out.append(LevelCounts(d_omega, d_omega, lam_c))
    return out


def final_integrals(hier: RegionHierarchy, constants: BoundConstants, C: float = 1.0) -> FinalIntegralReport:
    return final_integrals_counts(hierarchy_counts(hier, constants.L), constants, C)


# ---------------------------------------------------------------- K' enumeration


@dataclass(frozen=True)
class KPrimeReport:
    log_sum: float
    log_bound: float
    terms: int
    holds: bool

    @property
    def margin(self) -> float:
        return self.log_bound - self.log_sum


def _subsets(cells: list):
    for bits in range(1 << len(cells)):
        yield frozenset(c for i, c in enumerate(cells) if bits >> i & 1)


def kprime_states(grid0: CubeGrid, n_scales: int, constants: BoundConstants, C: float = 1.0, max_terms: int = 5_000_000) -> tuple[dict, int]:
    """Log weights exp(sum_j C (-log lam_j)|Lambda_j^c| - c2 sum_j p0_j^2 #generators_j) of every
    generator history, keyed by (final Lambda, any generator used).

    The next level depends on the history only through Lambda_j, so histories are merged by
    (Lambda_j, any generator yet) with their weights combined in the log domain."""
    d, L = grid0.d, constants.L
    c2 = constants.c2(d)
    states: dict = {(None, False): [0.0]}
    terms = 0
    grid = grid0
    for j in range(n_scales):
        if j:
            grid = grid.coarser(L)
        ell = -math.log(constants.lam_k(j))
        pen = c2 * constants.p0_k(j) ** 2
        r = constants.r_int(j)
        nxt: dict = {}
        for (lam_prev, any_gen), logs in states.items():
            acc = float(logsumexp(logs))
            base = CubeRegion.full(grid) if j == 0 else lam_prev
            lam_bar = base if j == 0 else interior_blocks(lam_prev, L)
            for P in ([frozenset()] if j == 0 else _subsets(sorted(lam_bar.cubes))):
                Pr = CubeRegion(grid, P)
                omega = (enlarge(lam_bar.complement(), 5 * r) | enlarge(Pr, 5 * r)).complement()
                for Qs in _subsets(sorted(shrink(omega, r).cubes)):
                    for Rs in _subsets([] if j == 0 else sorted(omega.cubes)):
                        step = region_recursion(base, Pr, CubeRegion(grid, Qs), CubeRegion(grid, Rs), r, L, coarsen=j > 0)
                        n_gen = len(P) + len(Qs) + len(Rs)
                        val = acc + C * ell * len(step.lam.complement()) * grid.M ** d - pen * n_gen
                        nxt.setdefault((step.lam, any_gen or n_gen > 0), []).append(val)
                        terms += 1
                        if terms > max_terms:
                            raise PipelineError("enumeration cap exceeded")
        states = nxt
    return states, terms


def kprime_sum(
    grid0: CubeGrid,
    n_scales: int,
    theta: CubeRegion,
    constants: BoundConstants,
    kappa_prime: float,
    C: float = 1.0,
    states: tuple | None = None,
) -> KPrimeReport:
    """Sum over nonempty generator histories with final Lambda^c = Theta, against lam^{n0} e^{-kappa' |Theta|}.
    `states` reuses the output of kprime_states across several Theta."""
    final = grid0
    for _ in range(n_scales - 1):
        final = final.coarser(constants.L)
    if theta.grid != final:
        raise PipelineError("Theta must live on the final grid")
    table, _ = states or kprime_states(grid0, n_scales, constants, C)
    logs = [v for (lam, any_gen), vals in table.items() if any_gen and lam.complement() == theta for v in vals]
    log_sum = float(logsumexp(logs)) if logs else -math.inf
    log_bound = constants.n0 * math.log(constants.lam) - kappa_prime * len(theta)
    return KPrimeReport(log_sum, log_bound, len(logs), log_sum <= log_bound)


def kappa_prime_limit(constants: BoundConstants, d: int) -> float:
    """1/2 c2 (-log lam)^{2 p0 - 3 r}: the largest kappa' allowed by the sufficient condition."""
    return 0.5 * constants.c2(d) * (-math.log(constants.lam)) ** (2 * constants.p0 - 3 * constants.r)
