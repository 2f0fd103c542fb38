"""Polymer-gas algebra on small cube universes: Mayer expansion, connected-cluster activities,
exponentiation by Moebius inversion of log Z, Ursell coefficients and the stability sum."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping

import numpy as np

from .regions import CubeGrid, CubeRegion, is_connected, tree_distance, tree_distance_mod

ENUM_CAP = 20  # polymers in a brute-force collection enumeration
CUBE_CAP = 12  # cubes in a subset-lattice (3^n) computation


class PolymerError(ValueError):
    pass


class DivergentCluster(PolymerError):
    def __init__(self, ratio: float):
        super().__init__(f"cluster series diverges: measured ratio {ratio:.4g} >= 1")
        self.ratio = ratio


# ---------------------------------------------------------------- activities


@dataclass
class PolymerActivity:
    """Values on connected regions with a declared envelope |A(X)| <= B0 e^{-kappa d(X)}, checked on access."""

    values: dict
    B0: float
    kappa: float
    mode: str = "plain"  # plain | mod
    modulo: CubeRegion | None = None
    check: bool = True

    def distance(self, X: CubeRegion) -> int:
        if self.mode == "mod":
            return tree_distance_mod(X, self.modulo)
        return tree_distance(X)

    def __call__(self, X: CubeRegion) -> float:
        v = self.values.get(X, 0.0)
        if self.check:
            if not is_connected(X, self.modulo if self.mode == "mod" else None):
                raise PolymerError(f"activity evaluated on a disconnected region {X.to_json()}")
            if abs(v) > self.B0 * math.exp(-self.kappa * self.distance(X)) * (1 + 1e-12):
                raise PolymerError(f"activity exceeds its declared bound on {X.to_json()}")
        return v

    def to_json(self) -> list:
        return [[X.to_json(), v] for X, v in sorted(self.values.items(), key=lambda kv: kv[0].to_json())]


def synthetic_activity(polymers: Iterable[CubeRegion], B0: float, kappa: float, rng: np.random.Generator, mode: str = "plain", modulo=None) -> PolymerActivity:
    """Seeded values drawn uniformly within the envelope."""
    act = PolymerActivity({}, B0, kappa, mode, modulo)
    for X in polymers:
        act.values[X] = float(rng.uniform(-1, 1)) * B0 * math.exp(-kappa * act.distance(X))
    return act


# ---------------------------------------------------------------- bitmask helpers


def _index(universe: Iterable) -> dict:
    return {c: i for i, c in enumerate(sorted(universe))}


def _mask(cubes: Iterable, index: dict) -> int:
    m = 0
    for c in cubes:
        m |= 1 << index[c]
    return m


def _submasks(m: int):
    s = m
    while True:
        yield s
        if s == 0:
            return
        s = (s - 1) & m


# ---------------------------------------------------------------- Mayer expansion


@dataclass(frozen=True)
class MayerReport:
    mayer: dict
    lhs: float
    rhs: float
    error: float


def mayer_expand(E: Mapping, verify: bool = True) -> MayerReport:
    """I(X) = e^{E(X)} - 1 and exp(sum E) = sum over sets of distinct polymers of prod I."""
    I = {X: math.expm1(v) for X, v in E.items()}
    lhs = math.exp(math.fsum(E.values()))
    if not verify:
        return MayerReport(I, lhs, math.nan, math.nan)
    vals = list(I.values())
    if len(vals) > ENUM_CAP:
        raise PolymerError(f"{len(vals)} polymers exceeds the enumeration cap {ENUM_CAP}")
    terms = []
    for r in range(len(vals) + 1):
        for combo in itertools.combinations(vals, r):
            terms.append(math.prod(combo))
    rhs = math.fsum(terms)
    return MayerReport(I, lhs, rhs, abs(lhs - rhs) / max(1.0, abs(lhs)))


# ---------------------------------------------------------------- connected clusters


def cluster_activity(polymers: list[tuple[frozenset, float]], universe: Iterable, exact: bool = False) -> dict:
    """K(U) = sum over collections of distinct polymers whose union is U and which are connected by
    shared cubes, of the product of values. Peels off the cluster containing the lowest cube.

    exact=True runs in rational arithmetic: the peeling subtracts O(1) disconnected weight from
    the union sums, which wipes out connected parts far below machine epsilon in floating point."""
    index = _index(universe)
    n = len(index)
    if n > CUBE_CAP:
        raise PolymerError(f"{n} cubes exceeds the subset-lattice cap {CUBE_CAP}")
    full = (1 << n) - 1
    # G(V): collections whose union is exactly V, built additively polymer by polymer
    if exact:
        G = [Fraction(0)] * (1 << n)
        G[0] = Fraction(1)
        for p, v in polymers:
            m, fv = _mask(p, index), Fraction(v)
            add = [Fraction(0)] * (1 << n)
            for Wm in range(1 << n):
                if G[Wm]:
                    add[Wm | m] += G[Wm] * fv
            G = [a + b for a, b in zip(G, add)]
        K = [Fraction(0)] * (1 << n)
    else:
        G = np.zeros(1 << n)
        G[0] = 1.0
        W = np.arange(1 << n)
        for p, v in polymers:
            add = np.zeros(1 << n)
            np.add.at(add, W | _mask(p, index), G * v)
            G += add
        K = np.zeros(1 << n)
    for V in range(1, full + 1):
        low = V & -V
        acc = G[V]
        for sub in _submasks(V ^ low):
            U = sub | low
            if U != V and K[U]:
                acc -= K[U] * G[V ^ U]
        K[V] = acc
    cells = sorted(index)
    out = {}
    for V in range(1, full + 1):
        if K[V] != 0:
            out[frozenset(cells[i] for i in range(n) if V >> i & 1)] = float(K[V])
    return out


def hardcore_sum(K: Mapping, universe: Iterable, sub: Iterable | None = None) -> float:
    """Z(W) = sum over collections of pairwise cube-disjoint polymers inside W of prod K."""
    index = _index(universe)
    n = len(index)
    W = (1 << n) - 1 if sub is None else _mask(sub, index)
    km = {}
    for U, v in K.items():
        km[_mask(U, index)] = km.get(_mask(U, index), 0.0) + v
    memo = {0: 1.0}

    def z(S: int) -> float:
        if S in memo:
            return memo[S]
        low = S & -S
        acc = z(S ^ low)
        for U, v in km.items():
            if U & low and U & S == U:
                acc += v * z(S ^ U)
        memo[S] = acc
        return acc

    return z(W)


def hardcore_brute(K: Mapping, sub: Iterable | None = None) -> float:
    """The same sum by direct enumeration of disjoint collections (independent oracle)."""
    items = [(U, v) for U, v in K.items() if sub is None or U <= frozenset(sub)]
    if len(items) > 2 * ENUM_CAP:
        raise PolymerError("too many polymers for brute-force enumeration")
    total = []

    def rec(i: int, used: frozenset, prod: float):
        if i == len(items):
            total.append(prod)
            return
        rec(i + 1, used, prod)
        U, v = items[i]
        if not (U & used):
            rec(i + 1, used | U, prod * v)

    rec(0, frozenset(), 1.0)
    return math.fsum(total)


# ---------------------------------------------------------------- component factorization


def overlap_components(polymers: list[frozenset]) -> list[list[int]]:
    """Indices grouped by shared-cube connectivity."""
    parent = list(range(len(polymers)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in itertools.combinations(range(len(polymers)), 2):
        if polymers[i] & polymers[j]:
            parent[find(j)] = find(i)
    groups: dict = {}
    for i in range(len(polymers)):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values())


@dataclass(frozen=True)
class FactorReport:
    components: list
    joint: float
    factored: float
    error: float


def component_factorize(thetas: list, xs: list, ys: list, universe: Iterable) -> FactorReport:
    """Polymers given as (cubes, value). U = union; components by shared cubes. Checks that the sum
    over all sub-collections equals the hard-core sum of connected-cluster activities."""
    items = [(frozenset(p), v) for p, v in list(thetas) + list(xs) + list(ys)]
    if not items:
        return FactorReport([], 1.0, 1.0, 0.0)
    if len(items) > ENUM_CAP:
        raise PolymerError("too many polymers for enumeration")
    comps = overlap_components([p for p, _ in items])
    union = [frozenset().union(*(items[i][0] for i in g)) for g in comps]
    joint = math.prod(1.0 + v for _, v in items)
    K = cluster_activity(items, universe)
    factored = hardcore_sum(K, universe)
    return FactorReport(union, joint, factored, abs(joint - factored) / max(1.0, abs(joint)))


def transform(polymers: list, grid: CubeGrid, shift: tuple = None, flip: int | None = None) -> list:
    """Translate (and optionally reflect one axis of) every polymer on the periodic grid."""
    out = []
    n = grid.n
    for p, v in polymers:
        cells = []
        for c in p:
            c = list(c)
            if flip is not None:
                c[flip] = (-c[flip] - 1) % n
            if shift is not None:
                c = [(x + s) % n for x, s in zip(c, shift)]
            cells.append(tuple(c))
        out.append((frozenset(cells), v))
    return out


# ---------------------------------------------------------------- K(U) bound


@dataclass(frozen=True)
class KUReport:
    value: float
    bound_shape: float
    O1_min: float
    terms: int


def k_u_bound(
    U: CubeRegion,
    lam: float,
    beta: float,
    kappa: float,
    kappa0: float,
    kappa_prime: float,
    n0: int,
    families: tuple = (True, True, True),
) -> KUReport:
    """K(U) from worst-case envelopes: Theta -> lam^{n0} e^{-kappa' |Theta|}, I(X) and J(Y) ->
    lam^beta e^{-kappa d(X)}; reports the smallest O(1) in K(U) <= O(1) lam^{beta/2} e^{-(kappa'-kappa0-1) d(U)}."""
    if not is_connected(U):
        raise PolymerError("U must be connected")
    subs = [X for X in _connected_subsets(U)]
    items = []
    use_t, use_x, use_y = families
    for X in subs:
        dX = tree_distance(X)
        if use_t:
            items.append((X.cubes, lam ** n0 * math.exp(-kappa_prime * len(X))))
        if use_x:
            items.append((X.cubes, lam ** beta * math.exp(-kappa * dX)))
        if use_y:
            items.append((X.cubes, lam ** beta * math.exp(-kappa * dX)))
    K = cluster_activity(items, U.cubes, exact=True) if items else {}
    value = K.get(U.cubes, 0.0)
    shape = lam ** (beta / 2) * math.exp(-(kappa_prime - kappa0 - 1) * tree_distance(U))
    return KUReport(value, shape, abs(value) / shape, len(items))


def _connected_subsets(U: CubeRegion) -> list[CubeRegion]:
    cells = sorted(U.cubes)
    if len(cells) > CUBE_CAP:
        raise PolymerError("universe too large")
    out = []
    for r in range(1, len(cells) + 1):
        for combo in itertools.combinations(cells, r):
            X = CubeRegion(U.grid, frozenset(combo))
            if is_connected(X):
                out.append(X)
    return out


# ---------------------------------------------------------------- exponentiation


def partition_polynomial(K: Mapping, universe: Iterable) -> np.ndarray:
    """Coefficients c_m of Z(t) = sum_m c_m t^m, m = number of polymers in the disjoint collection."""
    index = _index(universe)
    n = len(index)
    km = [(_mask(U, index), v) for U, v in K.items()]
    memo = {0: np.array([1.0])}

    def z(S: int) -> np.ndarray:
        if S in memo:
            return memo[S]
        low = S & -S
        acc = z(S ^ low).copy()
        for U, v in km:
            if U & low and U & S == U:
                rest = np.concatenate([[0.0], v * z(S ^ U)])
                if rest.size > acc.size:
                    acc = np.pad(acc, (0, rest.size - acc.size))
                acc[: rest.size] += rest
        memo[S] = acc
        return acc

    return z((1 << n) - 1)


def measured_ratio(K: Mapping, universe: Iterable) -> float:
    """1 / (smallest |t| with Z(t) = 0); the series of log Z(t) converges at t = 1 iff this is < 1."""
    c = np.trim_zeros(partition_polynomial(K, universe), "b")
    if c.size <= 1:
        return 0.0
    roots = np.roots(c[::-1])
    return float(1.0 / np.min(np.abs(roots)))


def exponentiate(K: Mapping, universe: Iterable, check: bool = True) -> dict:
    """H(X) = sum_{W subset X} (-1)^{|X - W|} log Z(W), so that sum_{X subset V} H(X) = log Z(V)."""
    index = _index(universe)
    n = len(index)
    if n > CUBE_CAP:
        raise PolymerError(f"{n} cubes exceeds the subset-lattice cap {CUBE_CAP}")
    if check:
        ratio = measured_ratio(K, universe)
        if ratio >= 1:
            raise DivergentCluster(ratio)
    cells = sorted(index)
    logz = np.empty(1 << n)
    for W in range(1 << n):
        zw = hardcore_sum(K, universe, [cells[i] for i in range(n) if W >> i & 1])
        if zw <= 0:
            raise DivergentCluster(math.inf)
        logz[W] = math.log(zw)
    H = logz.copy()
    for i in range(n):
        bit = 1 << i
        for W in range(1 << n):
            if W & bit:
                H[W] -= H[W ^ bit]
    out = {}
    for W in range(1, 1 << n):
        if abs(H[W]) > 1e-15:
            out[frozenset(cells[i] for i in range(n) if W >> i & 1)] = float(H[W])
    return out


# ---------------------------------------------------------------- Ursell coefficients


def ursell(n: int, edges: Iterable[tuple[int, int]]) -> int:
    """Sum over connected spanning subgraphs G of the graph of (-1)^{|E(G)|}."""
    edges = list(edges)
    if n == 1:
        return 1
    if len(edges) > 24:
        raise PolymerError("too many edges for subgraph enumeration")
    total = 0
    for r in range(n - 1, len(edges) + 1):
        for sub in itertools.combinations(edges, r):
            parent = list(range(n))

            def find(i):
                while parent[i] != i:
                    i = parent[i]
                return i

            for a, b in sub:
                parent[find(a)] = find(b)
            if len({find(i) for i in range(n)}) == 1:
                total += (-1) ** r
    return total


def single_polymer_series(z: float, order: int) -> float:
    """Cluster series for one polymer: clusters of m copies have complete incompatibility graphs."""
    total = 0.0
    for m in range(1, order + 1):
        phi = ursell(m, itertools.combinations(range(m), 2))
        total += phi / math.factorial(m) * z ** m
    return total


# ---------------------------------------------------------------- stability sum


def animals(d: int, size: int) -> list[tuple]:
    """Connected (Chebyshev-adjacent) cell sets of the given size, normalized so the lexicographic
    minimum sits at the origin; each translation class appears once."""
    steps = [s for s in itertools.product((-1, 0, 1), repeat=d) if any(s)]
    level = {(tuple([0] * d),)}
    for _ in range(size - 1):
        nxt = set()
        for shape in level:
            cells = set(shape)
            for c in shape:
                for s in steps:
                    x = tuple(a + b for a, b in zip(c, s))
                    if x not in cells:
                        new = sorted(cells | {x})
                        base = new[0]
                        nxt.add(tuple(tuple(a - b for a, b in zip(q, base)) for q in new))
        level = nxt
    return sorted(level)


@dataclass(frozen=True)
class StabilityReport:
    total: float
    tail: float
    volume: int
    bound: float
    margin: float
    log_lower: float
    log_upper: float
    holds: bool

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def synthetic_shapes(d: int, s_max: int, c: float, lam: float, beta: float, kappa: float, rng: np.random.Generator) -> dict:
    """Translation-invariant H(shape) drawn uniformly in +-c lam^{beta/2} e^{-kappa d(shape)}."""
    out = {}
    grid = CubeGrid(d, 2 * s_max + 2)
    for s in range(1, s_max + 1):
        for shape in animals(d, s):
            dist = tree_distance(CubeRegion(grid, frozenset(shape)))
            out[shape] = float(rng.uniform(-1, 1)) * c * lam ** (beta / 2) * math.exp(-kappa * dist)
    return out


def stability_report(shapes: Mapping, d: int, n: int, lam: float, beta: float, c: float = 0.0, kappa: float = 0.0, s_max: int | None = None) -> StabilityReport:
    """Sum of a translation-invariant activity over the torus of n^d cubes: n^d times the sum over
    translation classes, plus a tail bound for shapes larger than s_max with |H| <= c lam^{beta/2}
    e^{-kappa (s-1)} and at most (e D)^{s-1} connected sets of size s through a cube (D = 3^d - 1)."""
    s_top = max((len(s) for s in shapes), default=0) if s_max is None else s_max
    if shapes and n <= 2 * s_top:
        raise PolymerError("torus too small for the translation count")
    vol = n ** d
    total = vol * math.fsum(shapes.values())
    tail = 0.0
    if c > 0:
        q = math.e * (3 ** d - 1) * math.exp(-kappa)
        if q >= 1:
            raise PolymerError(f"declared decay too weak for the tail bound: ratio {q:.3g}")
        tail = vol * c * lam ** (beta / 2) * q ** s_top / (1 - q)
    bound = lam ** (beta / 2) * vol
    worst = abs(total) + tail
    return StabilityReport(total, tail, vol, bound, bound - worst, total - tail, total + tail, worst <= bound)


def direct_sum(shapes: Mapping, d: int, n: int) -> float:
    """Brute-force sum over every placed region on a small torus (oracle for the translation count)."""
    grid = CubeGrid(d, n)
    placed = {}
    for shape, v in shapes.items():
        for shift in itertools.product(range(n), repeat=d):
            X = frozenset(tuple((a + b) % n for a, b in zip(c, shift)) for c in shape)
            placed[X] = v
    return math.fsum(placed.values())
