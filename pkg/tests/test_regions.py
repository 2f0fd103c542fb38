import itertools
import math

import numpy as np
import pytest

from blockrg.regions import (
    BoundConstants,
    CubeGrid,
    CubeRegion,
    Generators,
    RegionError,
    attach,
    build_hierarchy,
    components,
    connected_sets,
    covering_bound,
    enlarge,
    is_connected,
    region_recursion,
    resummation,
    shrink,
    tree_distance,
    tree_distance_mod,
    tree_join_check,
)


def region(grid, *cubes):
    return CubeRegion(grid, frozenset(cubes))


def empty(grid):
    return CubeRegion(grid, frozenset())


def random_region(grid, p, rng):
    return CubeRegion.from_mask(grid, rng.random(grid.shape) < p)


# ---------------------------------------------------------------- enlarge / shrink


def test_enlarge_single_cube_1d():
    g = CubeGrid(1, 8)
    assert enlarge(region(g, (3,)), 1).cubes == {(2,), (3,), (4,)}


def test_enlarge_zero_layers():
    g = CubeGrid(2, 5)
    X = region(g, (0, 0), (2, 3))
    assert enlarge(X, 0) == X


def test_enlarge_empty():
    g = CubeGrid(2, 5)
    assert enlarge(empty(g), 3).is_empty()


def test_enlarge_two_layers_2d_brute():
    g = CubeGrid(2, 7)
    out = enlarge(region(g, (3, 3)), 2)
    brute = {c for c in g.cells() if g.distance(c, (3, 3)) <= 2}
    assert len(out) == 25 and out.cubes == brute


def test_enlarge_wraps():
    g = CubeGrid(1, 4)
    assert enlarge(region(g, (0,)), 1).cubes == {(3,), (0,), (1,)}
    assert len(enlarge(region(g, (0,)), 2)) == 4


def test_enlarge_negative_layers():
    with pytest.raises(RegionError):
        enlarge(region(CubeGrid(1, 4), (0,)), -1)


@pytest.mark.parametrize("layers", [0, 1, 3])
def test_shrink_full(layers):
    g = CubeGrid(2, 6)
    assert shrink(CubeRegion.full(g), layers) == CubeRegion.full(g)


def test_shrink_middle_cube():
    g = CubeGrid(1, 8)
    assert shrink(region(g, (2,), (3,), (4,)), 1).cubes == {(3,)}


@pytest.mark.parametrize("seed", range(5))
def test_shrink_duality(seed):
    rng = np.random.default_rng(seed)
    g = CubeGrid(2, 7)
    X = random_region(g, 0.6, rng)
    for n in range(3):
        assert shrink(X, n) == enlarge(X.complement(), n).complement()


# ---------------------------------------------------------------- components


def test_corner_contact():
    g = CubeGrid(2, 6)
    assert len(components(region(g, (1, 1), (2, 2)))) == 1


def test_mod_mode_joins():
    g = CubeGrid(1, 10)
    X = region(g, (1,), (6,))
    omega_c = region(g, (2,), (3,), (4,), (5,))
    assert len(components(X)) == 2
    assert len(components(X, omega_c)) == 2  # X does not contain cubes of omega_c
    X2 = X | region(g, (2,), (5,))
    assert len(components(X2, omega_c)) == 1


def union_find_oracle(X):
    cells = sorted(X.cubes)
    label = {c: i for i, c in enumerate(cells)}
    n = X.grid.n
    changed = True
    while changed:
        changed = False
        for a, b in itertools.combinations(cells, 2):
            if all(min(abs(x - y), n - abs(x - y)) <= 1 for x, y in zip(a, b)) and label[a] != label[b]:
                m = min(label[a], label[b])
                label[a] = label[b] = m
                changed = True
    groups = {}
    for c in cells:
        groups.setdefault(label[c], set()).add(c)
    return sorted(sorted(s) for s in groups.values())


@pytest.mark.parametrize("seed", range(6))
def test_components_union_find(seed):
    rng = np.random.default_rng(seed)
    g = CubeGrid(2, 8)
    X = random_region(g, 0.3, rng)
    got = sorted(sorted(c.cubes) for c in components(X))
    assert got == union_find_oracle(X)


# ---------------------------------------------------------------- tree distance


def test_tree_distance_examples():
    g = CubeGrid(1, 10)
    assert tree_distance(region(g, (4,))) == 0
    assert tree_distance(region(g, (4,), (5,))) == 1
    assert tree_distance(region(g, (4,), (5,), (6,))) == 2


def spanning_tree_oracle(X):
    cells = sorted(X.cubes)
    edges = list(itertools.combinations(range(len(cells)), 2))
    best = math.inf
    for tree in itertools.combinations(edges, len(cells) - 1):
        parent = list(range(len(cells)))

        def find(i):
            while parent[i] != i:
                i = parent[i]
            return i

        for a, b in tree:
            parent[find(a)] = find(b)
        if len({find(i) for i in range(len(cells))}) == 1:
            best = min(best, sum(X.grid.distance(cells[a], cells[b]) for a, b in tree))
    return best


@pytest.mark.parametrize("seed", range(4))
def test_tree_distance_spanning_oracle(seed):
    rng = np.random.default_rng(seed)
    g = CubeGrid(2, 6)
    cells = g.cells()
    X = region(g, *[cells[i] for i in rng.choice(len(cells), 5, replace=False)])
    X = components(X)[0] if not is_connected(X) else X
    assert tree_distance(X) == spanning_tree_oracle(X)


def test_tree_distance_refuses_disconnected():
    g = CubeGrid(1, 10)
    with pytest.raises(RegionError):
        tree_distance(region(g, (1,), (5,)))


def test_tree_distance_mod_contracted():
    g = CubeGrid(1, 10)
    omega_c = region(g, (2,), (3,), (4,), (5,))
    assert tree_distance_mod(region(g, (2,), (4,)), omega_c) == 0


def test_tree_distance_mod_no_complement():
    g = CubeGrid(2, 6)
    X = region(g, (0, 0), (1, 1), (2, 1))
    assert tree_distance_mod(X, empty(g)) == tree_distance(X)


def test_tree_distance_mod_monotone():
    g = CubeGrid(1, 12)
    X = region(g, (1,), (2,), (3,), (4,), (5,))
    small = region(g, (3,))
    big = region(g, (2,), (3,), (4,))
    assert tree_distance_mod(X, big) <= tree_distance_mod(X, small) <= tree_distance(X)


# ---------------------------------------------------------------- recursion


def test_recursion_empty_generators():
    g = CubeGrid(1, 8)
    step = region_recursion(CubeRegion.full(g), empty(g.coarser(2)), empty(g.coarser(2)), empty(g.coarser(2)), 1, 2)
    assert step.omega == CubeRegion.full(g.coarser(2)) == step.lam


def test_recursion_p_shell():
    g = CubeGrid(1, 32)
    c = g.coarser(2)
    step = region_recursion(CubeRegion.full(g), region(c, (8,)), empty(c), empty(c), 1, 2)
    assert enlarge(region(c, (8,)), 5).issubset(step.omega.complement())
    assert step.lam.issubset(step.omega)


def test_recursion_validates_q():
    g = CubeGrid(1, 32)
    c = g.coarser(2)
    with pytest.raises(RegionError):
        region_recursion(CubeRegion.full(g), region(c, (8,)), region(c, (9,)), empty(c), 1, 2)


def test_recursion_validates_grid():
    g = CubeGrid(1, 32)
    with pytest.raises(RegionError):
        region_recursion(CubeRegion.full(g), empty(g), empty(g), empty(g), 1, 2)


# ---------------------------------------------------------------- covering


def test_covering_single_q():
    g = CubeGrid(1, 32)
    rep = covering_bound(g, [Generators(empty(g), region(g, (10,)), empty(g))], [1], [1.0], 2)
    assert len(rep.cover) == 1 and rep.covered and rep.widths_match
    assert rep.volume == 1 + 10 * 1
    assert rep.cover[0].width >= 1 + 10 * 1


def test_covering_empty_history():
    g = CubeGrid(2, 8)
    rep = covering_bound(g, [Generators(empty(g), empty(g), empty(g))], [1], [1.0], 2)
    assert rep.volume == 0 and rep.bound_constant == 0.0 and rep.covered


def test_covering_two_levels_cell_count():
    g = CubeGrid(1, 64)
    c = g.coarser(2)
    hist = [Generators(empty(g), region(g, (5,)), empty(g)), Generators(empty(c), empty(c), region(c, (25,)))]
    rep = covering_bound(g, hist, [1, 1], [1.0, 1.0], 2)
    hier = build_hierarchy(g, hist, [1, 1], 2)
    assert rep.volume == len(hier.lambdas[-1].complement())
    assert rep.covered and rep.widths_match


# ---------------------------------------------------------------- resummation and trees


def test_resummation_identity():
    g = CubeGrid(1, 6)
    lam = CubeRegion.full(g)
    B = {region(g, (0,)): 0.5, region(g, (0,), (1,)): 0.1}
    rep = resummation(B, lam, lam, 1.0, 1.0, 0.5)
    assert rep.activity == B


def test_resummation_single_attach():
    g = CubeGrid(1, 8)
    omega = CubeRegion.full(g)
    lam = omega - region(g, (3,), (4,))
    X = region(g, (2,), (3,))
    rep = resummation({X: 0.25}, omega, lam, 1.0, 1.0, 0.5)
    assert rep.activity == {region(g, (2,), (3,), (4,)): 0.25}
    assert attach(X, lam.complement()) == region(g, (2,), (3,), (4,))
    # a component that X only touches is not adjoined
    assert attach(region(g, (2,)), lam.complement()) == region(g, (2,))


def test_resummation_totals():
    rng = np.random.default_rng(3)
    g = CubeGrid(1, 6)
    omega = CubeRegion.full(g) - region(g, (0,))
    lam = omega - region(g, (3,))
    B = {}
    for X in connected_sets(omega, omega.complement()):
        if X.cubes & lam.cubes:
            B[X] = float(rng.uniform(-1, 1)) * math.exp(-2.0 * tree_distance_mod(X, omega.complement()))
    rep = resummation(B, omega, lam, 1.0, 2.0, 0.5)
    assert rep.total_out == pytest.approx(rep.total_in, abs=1e-12)
    assert rep.distance_monotone


def test_resummation_refuses_unbounded():
    g = CubeGrid(1, 6)
    full = CubeRegion.full(g)
    with pytest.raises(RegionError):
        resummation({region(g, (0,)): 2.0}, full, full, 1.0, 1.0, 0.5)


def test_tree_join_examples():
    g = CubeGrid(1, 8)
    U = region(g, (1,), (2,))
    rep = tree_join_check([U], [], [])
    assert rep.lhs == 2 and rep.rhs == 1 and rep.holds
    rep = tree_join_check([], [region(g, (1,)), region(g, (2,))], [])
    assert rep.lhs == 2 and rep.rhs == 1


def test_tree_join_disconnected():
    g = CubeGrid(1, 8)
    with pytest.raises(RegionError):
        tree_join_check([region(g, (1,))], [region(g, (5,))], [])


# ---------------------------------------------------------------- constants


def test_c2_default():
    c = BoundConstants()
    assert c.c2(1) == pytest.approx(min(0.25, 0.5, 0.1 * 0.25 / 3, 0.5 ** 4 / (128 * 3)))


def test_constants_schedule():
    c = BoundConstants(lam=1e-6, N=2, L=2)
    assert c.lam_k(2) == 1e-6 and c.lam_k(0) == pytest.approx(0.25e-6)
    assert c.mu_bar_k(1) == pytest.approx(0.25)
