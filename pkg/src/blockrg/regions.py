"""Cube regions on periodic grids: enlargement, connectivity, tree distances, region recursion,
covering of large-field regions and the resummation of boundary activities."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping

import numpy as np


class RegionError(ValueError):
    pass


@dataclass(frozen=True)
class CubeGrid:
    """Periodic grid of n^d cubes of side M (in units of the level's unit lattice)."""

    d: int
    n: int
    M: int = 1
    level: int = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def n_cubes(self) -> int:
        return self.n ** self.d

    def cells(self) -> list[tuple[int, ...]]:
        return list(itertools.product(range(self.n), repeat=self.d))

    def coarser(self, L: int) -> "CubeGrid":
        if self.n % L:
            raise RegionError(f"grid of {self.n} cubes per axis is not divisible by L={L}")
        return CubeGrid(self.d, self.n // L, self.M, self.level + 1)

    def distance(self, a: tuple[int, ...], b: tuple[int, ...]) -> int:
        """Periodic Chebyshev distance between cube centers, in cube lengths."""
        return max(min(abs(x - y), self.n - abs(x - y)) for x, y in zip(a, b))


@dataclass(frozen=True)
class CubeRegion:
    grid: CubeGrid
    cubes: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        cubes = frozenset(tuple(int(v) % self.grid.n for v in c) for c in self.cubes)
        for c in cubes:
            if len(c) != self.grid.d:
                raise RegionError(f"cube {c} has wrong dimension for {self.grid}")
        object.__setattr__(self, "cubes", cubes)

    @classmethod
    def from_mask(cls, grid: CubeGrid, mask: np.ndarray) -> "CubeRegion":
        return cls(grid, frozenset(tuple(int(v) for v in c) for c in np.argwhere(mask)))

    @classmethod
    def full(cls, grid: CubeGrid) -> "CubeRegion":
        return cls(grid, frozenset(grid.cells()))

    def mask(self) -> np.ndarray:
        m = np.zeros(self.grid.shape, dtype=bool)
        for c in self.cubes:
            m[c] = True
        return m

    def __len__(self) -> int:
        return len(self.cubes)

    def __iter__(self):
        return iter(sorted(self.cubes))

    def __contains__(self, c) -> bool:
        return tuple(c) in self.cubes

    def _check(self, other: "CubeRegion"):
        if other.grid != self.grid:
            raise RegionError("regions live on different grids")

    def __or__(self, other):
        self._check(other)
        return CubeRegion(self.grid, self.cubes | other.cubes)

    def __and__(self, other):
        self._check(other)
        return CubeRegion(self.grid, self.cubes & other.cubes)

    def __sub__(self, other):
        self._check(other)
        return CubeRegion(self.grid, self.cubes - other.cubes)

    def complement(self) -> "CubeRegion":
        return CubeRegion(self.grid, frozenset(self.grid.cells()) - self.cubes)

    def issubset(self, other: "CubeRegion") -> bool:
        self._check(other)
        return self.cubes <= other.cubes

    def is_empty(self) -> bool:
        return not self.cubes

    def sites(self) -> int:
        """Number of unit-lattice points, |X^{(j)}| = M^d * #cubes."""
        return len(self.cubes) * self.grid.M ** self.grid.d

    def to_json(self) -> list:
        return [list(c) for c in sorted(self.cubes)]


def _dilate(mask: np.ndarray, layers: int) -> np.ndarray:
    out = mask.copy()
    for axis in range(mask.ndim):
        if 2 * layers + 1 >= mask.shape[axis]:  # the shells wrap the whole axis
            out = np.broadcast_to(np.any(out, axis=axis, keepdims=True), out.shape).copy()
            continue
        acc = out.copy()
        for s in range(1, min(layers, mask.shape[axis]) + 1):
            acc |= np.roll(out, s, axis=axis) | np.roll(out, -s, axis=axis)
        out = acc
    return out


def enlarge(X: CubeRegion, layers: int) -> CubeRegion:
    """Add `layers` shells of Chebyshev-adjacent cubes with periodic wrap."""
    if layers < 0:
        raise RegionError("layers must be nonnegative")
    if layers == 0 or X.is_empty():
        return X
    return CubeRegion.from_mask(X.grid, _dilate(X.mask(), layers))


def shrink(X: CubeRegion, layers: int) -> CubeRegion:
    """Remove every cube within `layers` shells of the complement."""
    return enlarge(X.complement(), layers).complement()


def _neighbors(a: tuple[int, ...], b: tuple[int, ...], n: int) -> bool:
    return all(min(abs(x - y), n - abs(x - y)) <= 1 for x, y in zip(a, b))


class _UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def components(X: CubeRegion, mod: CubeRegion | None = None) -> list[CubeRegion]:
    """Closure-contact components; in mod mode cubes of X sharing a component of `mod` are joined."""
    cells = sorted(X.cubes)
    uf = _UnionFind(cells)
    n = X.grid.n
    for i, a in enumerate(cells):
        for b in cells[i + 1:]:
            if _neighbors(a, b, n):
                uf.union(a, b)
    if mod is not None and not mod.is_empty():
        X._check(mod)
        for comp in components(mod):
            inside = sorted(comp.cubes & X.cubes)
            for b in inside[1:]:
                uf.union(inside[0], b)
    groups: dict = {}
    for c in cells:
        groups.setdefault(uf.find(c), set()).add(c)
    return [CubeRegion(X.grid, frozenset(groups[r])) for r in sorted(groups)]


def is_connected(X: CubeRegion, mod: CubeRegion | None = None) -> bool:
    return len(components(X, mod)) == 1


def _mst_groups(grid: CubeGrid, groups: list[list[tuple[int, ...]]]) -> int:
    """Prim's algorithm on groups of cubes; a group is a zero-cost contracted vertex."""
    m = len(groups)
    if m <= 1:
        return 0
    dist = np.array([[min(grid.distance(a, b) for a in g for b in h) for h in groups] for g in groups])
    in_tree = np.zeros(m, dtype=bool)
    in_tree[0] = True
    best = dist[0].astype(float)
    total = 0
    for _ in range(m - 1):
        cand = np.where(in_tree, np.inf, best)
        j = int(np.argmin(cand))
        total += int(cand[j])
        in_tree[j] = True
        best = np.minimum(best, dist[j])
    return total


def tree_distance(X: CubeRegion) -> int:
    """Minimum spanning tree length on cube centers, in cube lengths."""
    if X.is_empty():
        raise RegionError("tree distance of an empty region")
    if not is_connected(X):
        raise RegionError("region is disconnected; decompose into components first")
    return _mst_groups(X.grid, [[c] for c in sorted(X.cubes)])


def _contracted_groups(X: CubeRegion, omega_c: CubeRegion) -> list[list[tuple[int, ...]]]:
    groups, seen = [], set()
    if not omega_c.is_empty():
        for comp in components(omega_c):
            inside = sorted(comp.cubes & X.cubes)
            if inside:
                groups.append(inside)
                seen.update(inside)
    groups.extend([c] for c in sorted(X.cubes - seen))
    return groups


def tree_distance_mod(X: CubeRegion, omega_c: CubeRegion) -> int:
    """Tree distance with every component of omega_c contracted to a zero-cost vertex."""
    if X.is_empty():
        raise RegionError("tree distance of an empty region")
    if not is_connected(X, omega_c):
        raise RegionError("region is not connected modulo the given complement")
    return _mst_groups(X.grid, _contracted_groups(X, omega_c))


def refine(X: CubeRegion, fine: CubeGrid, L: int) -> CubeRegion:
    """The same set expressed in the cubes of a grid L times finer."""
    if fine.n != X.grid.n * L:
        raise RegionError("grids are not related by the factor L")
    out = set()
    for c in X.cubes:
        for off in itertools.product(range(L), repeat=X.grid.d):
            out.add(tuple(L * a + b for a, b in zip(c, off)))
    return CubeRegion(fine, frozenset(out))


def interior_blocks(X: CubeRegion, L: int) -> CubeRegion:
    """Largest union of L-blocks contained in X, on the coarser grid."""
    coarse = X.grid.coarser(L)
    keep = set()
    for c in coarse.cells():
        if all(tuple(L * a + b for a, b in zip(c, off)) in X.cubes for off in itertools.product(range(L), repeat=X.grid.d)):
            keep.add(c)
    return CubeRegion(coarse, frozenset(keep))


@dataclass(frozen=True)
class RecursionStep:
    omega: CubeRegion
    lam: CubeRegion


def region_recursion(
    lam_j: CubeRegion,
    P: CubeRegion,
    Q: CubeRegion,
    R: CubeRegion,
    r_int: int,
    L: int,
    coarsen: bool = True,
) -> RecursionStep:
    """Omega^c = (bar Lambda)^{c,5*} u P^{5*};  Lambda^c = (Omega^c)^{5*} u Q^{5*} u R^{5*}.

    5* is enlargement by 5*r_int layers on the new grid. With coarsen=False the step stays on
    the same grid (the initial step from the full torus).
    """
    lam_bar = interior_blocks(lam_j, L) if coarsen else lam_j
    grid = lam_bar.grid
    for name, G in (("P", P), ("Q", Q), ("R", R)):
        if G.grid != grid:
            raise RegionError(f"generator {name} is not on the grid of the new level")
    bad = P - lam_bar
    if bad.cubes:
        raise RegionError(f"P not inside the block interior of Lambda: {bad.to_json()}")
    layers = 5 * r_int
    omega_c = enlarge(lam_bar.complement(), layers) | enlarge(P, layers)
    omega = omega_c.complement()
    bad = Q - shrink(omega, r_int)
    if bad.cubes:
        raise RegionError(f"Q not inside the shrunken Omega: {bad.to_json()}")
    bad = R - omega
    if bad.cubes:
        raise RegionError(f"R not inside Omega: {bad.to_json()}")
    lam_c = enlarge(omega_c, layers) | enlarge(Q, layers) | enlarge(R, layers)
    return RecursionStep(omega, lam_c.complement())


@dataclass(frozen=True)
class Generators:
    P: CubeRegion
    Q: CubeRegion
    R: CubeRegion

    def count(self) -> int:
        return len(self.P) + len(self.Q) + len(self.R)


@dataclass(frozen=True)
class RegionHierarchy:
    """Levels (Lambda_0, Omega_1, Lambda_1, ...) and the generators that produced them."""

    lambdas: tuple
    omegas: tuple
    generators: tuple

    def to_json(self) -> str:
        levels = []
        for j, lam in enumerate(self.lambdas):
            entry = {"level": j, "Lambda": lam.to_json()}
            if j > 0:
                entry["Omega"] = self.omegas[j - 1].to_json()
            g = self.generators[j]
            entry.update(P=g.P.to_json(), Q=g.Q.to_json(), R=g.R.to_json())
            levels.append(entry)
        return json.dumps(levels)


def build_hierarchy(grid0: CubeGrid, history: list[Generators], r_ints: list[int], L: int) -> RegionHierarchy:
    """Run the recursion from the full torus; history[j] lives on grid0 coarsened j times."""
    full = CubeRegion.full(grid0)
    g0 = history[0]
    if g0.P.cubes or g0.R.cubes:
        raise RegionError("level-0 generators P and R must be empty")
    first = region_recursion(full, g0.P, g0.Q, g0.R, r_ints[0], L, coarsen=False)
    lambdas, omegas = [first.lam], []
    for j in range(1, len(history)):
        g = history[j]
        step = region_recursion(lambdas[-1], g.P, g.Q, g.R, r_ints[j], L)
        omegas.append(step.omega)
        lambdas.append(step.lam)
    return RegionHierarchy(tuple(lambdas), tuple(omegas), tuple(history))


@dataclass(frozen=True)
class CoverCube:
    born: int
    center: tuple
    width: Fraction


def claimed_width(born: int, k: int, r_ints: list[int], L: int) -> Fraction:
    """Width in M units at level k of a cover cube born at level `born`."""
    w = Fraction(1 + 22 * r_ints[born], L ** (k - born))
    for m in range(born + 1, k + 1):
        w += Fraction(22 * r_ints[m], L ** (k - m))
    return w


def _covers(grid: CubeGrid, cube: CoverCube, cell: tuple[int, ...]) -> bool:
    half = (cube.width - 1) / 2
    for c, x in zip(cube.center, cell):
        if cube.width >= grid.n:
            continue
        delta = abs(c - (Fraction(x) + Fraction(1, 2))) % grid.n
        delta = min(delta, grid.n - delta)
        if delta > half:
            return False
    return True


@dataclass(frozen=True)
class CoveringReport:
    cover: list
    volume: int
    counts: list
    bound_constant: float
    widths_match: bool
    covered: bool


def covering_bound(grid0: CubeGrid, history: list[Generators], r_ints: list[int], r_values: list[float], L: int) -> CoveringReport:
    """Explicit inductive cover of Lambda_k^c, its volume and the smallest admissible constant C in
    Vol <= C (M r_k)^d sum_j |C_j|."""
    hier = build_hierarchy(grid0, history, r_ints, L)
    k = len(history) - 1
    cover: list[CoverCube] = []
    widths_match = True
    for j in range(k + 1):
        if j > 0:
            grown = []
            for c in cover:
                w = (c.width + 22 * L * r_ints[j]) / L
                grown.append(CoverCube(c.born, tuple(x / L for x in c.center), w))
            cover = grown
        g = history[j]
        for region in (g.P, g.Q, g.R):
            for cell in region:
                cover.append(CoverCube(j, tuple(Fraction(x) + Fraction(1, 2) for x in cell), Fraction(1 + 22 * r_ints[j])))
    for c in cover:
        widths_match &= c.width == claimed_width(c.born, k, r_ints, L)
    lam_c = hier.lambdas[-1].complement()
    grid_k = lam_c.grid
    covered = all(any(_covers(grid_k, c, cell) for c in cover) for cell in lam_c)
    counts = [g.count() for g in history]
    vol = lam_c.sites()
    total = sum(counts)
    M, d = grid0.M, grid0.d
    const = vol / ((M * r_values[k]) ** d * total) if total else 0.0
    return CoveringReport(cover, vol, counts, const, widths_match, covered)


def _enumerate_subsets(cells: list) -> Iterable[frozenset]:
    for r in range(1, len(cells) + 1):
        for combo in itertools.combinations(cells, r):
            yield frozenset(combo)


def connected_sets(universe: CubeRegion, mod: CubeRegion | None = None) -> list[CubeRegion]:
    """All nonempty subsets of the universe connected (optionally modulo `mod`)."""
    cells = sorted(universe.cubes)
    out = []
    for s in _enumerate_subsets(cells):
        X = CubeRegion(universe.grid, s)
        if is_connected(X, mod):
            out.append(X)
    return out


def attach(X: CubeRegion, lam_c: CubeRegion) -> CubeRegion:
    """X -> Y: union with every component of lam_c that X meets."""
    Y = X
    for comp in components(lam_c):
        if comp.cubes & X.cubes:
            Y = Y | comp
    return Y


@dataclass(frozen=True)
class ResummationReport:
    activity: dict
    total_in: float
    total_out: float
    bound_constant: float
    distance_monotone: bool


def resummation(
    B: Mapping[CubeRegion, float],
    omega: CubeRegion,
    lam: CubeRegion,
    B0: float,
    kappa: float,
    kappa0: float,
) -> ResummationReport:
    """B'(Y) = sum over X -> Y of B(X), with the bound constant C in |B'(Y)| <= C B0 e^{-(kappa-kappa0-1) d(Y mod Lambda^c)}."""
    if not lam.issubset(omega):
        raise RegionError("Lambda must be contained in Omega")
    omega_c, lam_c = omega.complement(), lam.complement()
    out: dict = {}
    monotone = True
    for X, value in B.items():
        if not (X.cubes & lam.cubes):
            raise RegionError("activity region does not meet Lambda")
        dx = tree_distance_mod(X, omega_c)
        if abs(value) > B0 * math.exp(-kappa * dx) * (1 + 1e-12):
            raise RegionError(f"activity exceeds its declared bound on {X.to_json()}")
        Y = attach(X, lam_c)
        out.setdefault(Y, []).append(value)
        monotone &= tree_distance_mod(Y, lam_c) <= dx
    activity = {Y: math.fsum(v) for Y, v in out.items()}
    const = 0.0
    for Y, v in activity.items():
        env = B0 * math.exp(-(kappa - kappa0 - 1) * tree_distance_mod(Y, lam_c))
        const = max(const, abs(v) / env)
    return ResummationReport(activity, math.fsum(B.values()), math.fsum(activity.values()), const, monotone)


@dataclass(frozen=True)
class TreeJoinReport:
    lhs: int
    rhs: int
    holds: bool


def tree_join_check(thetas: list[CubeRegion], xs: list[CubeRegion], ys: list[CubeRegion]) -> TreeJoinReport:
    pieces = list(thetas) + list(xs) + list(ys)
    if not pieces:
        raise RegionError("nothing to join")
    U = pieces[0]
    for p in pieces[1:]:
        U = U | p
    if not is_connected(U):
        raise RegionError("union is disconnected")
    theta_all = CubeRegion(U.grid, frozenset())
    for t in thetas:
        theta_all = theta_all | t
    lhs = sum(tree_distance(t) + 1 for t in thetas)
    lhs += sum(tree_distance(x) + 1 for x in xs)
    lhs += sum(tree_distance_mod(y, theta_all) + 1 for y in ys)
    rhs = tree_distance(U)
    return TreeJoinReport(lhs, rhs, lhs >= rhs)


@dataclass(frozen=True)
class BoundConstants:
    """Small-coupling parameters; the k-dependent quantities are accessors."""

    lam: float = 1e-12
    mu_bar: float = 1.0
    L: int = 2
    N: int = 1
    p: float = 1.8
    p0: float = 1.6
    r: float = 0.3
    kappa: float = 40.0
    kappa0: float = 1.0
    beta: float = 0.1
    delta: float = 0.01
    n0: int = 4
    B0: float = 1.0
    C_w: float = 1.0
    B_w: float = 1.0
    c_tilde_N: float = 0.0
    gamma0: float = 0.5
    gamma: float = 0.5
    c0: float = 0.1
    c1: float = 0.5
    R: int = 0
    M: int = 1
    a: float = 1.0

    @property
    def R1(self) -> int:
        return 2 * self.R + 1

    @property
    def R2(self) -> int:
        return 2 * self.R1 + 1

    def lam_k(self, k: int) -> float:
        return float(self.L) ** (-(self.N - k)) * self.lam

    def mu_bar_k(self, k: int) -> float:
        return float(self.L) ** (-2 * (self.N - k)) * self.mu_bar

    def p_k(self, k: int) -> float:
        return (-math.log(self.lam_k(k))) ** self.p

    def p0_k(self, k: int) -> float:
        return (-math.log(self.lam_k(k))) ** self.p0

    def r_k(self, k: int) -> float:
        return (-math.log(self.lam_k(k))) ** self.r

    def r_int(self, k: int) -> int:
        return int(math.floor(self.r_k(k)))

    def alpha_k(self, k: int) -> float:
        return max(self.lam_k(k) ** 0.25, self.mu_bar_k(k) ** 0.5)

    def c2(self, d: int) -> float:
        """min(1/4, aL/4, c0 c1^2 R2^-d, c1^4 R2^-d / 128)."""
        R2d = float(self.R2) ** d
        return min(0.25, 0.25 * self.a * self.L, self.c0 * self.c1 ** 2 / R2d, self.c1 ** 4 / (128 * R2d))

    def violations(self) -> list[str]:
        out = []
        if self.kappa - 11 * self.kappa0 - 11 < self.kappa0:
            out.append("kappa - 11 kappa0 - 11 >= kappa0")
        if not self.p0 < self.p:
            out.append("p0 < p")
        if not 3 * self.r + 2 < 2 * self.p0:
            out.append("3r + 2 < 2 p0")
        if self.n0 < 4:
            out.append("n0 >= 4")
        return out
