import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_points
from hyptsp.dyntsp import (
    Instance,
    PortalGraph,
    RepTable,
    combine,
    ResourceCapExceeded,
    all_matchings,
    cell_crossings,
    fits,
    held_karp,
    matching,
    opt_against,
    portal_uses,
    reduce_representative,
    run_table_dp,
    run_tsp,
    solve_leaf,
    two_opt,
)
from hyptsp.hgeom import DomainError, HPoint, as_array, hyp_distance, pairwise_dist
from hyptsp.hybridtree import Shift, prepare
from hyptsp.verify import brute_force_tsp, exact_tsp


def P(*c):
    return HPoint.from_coords(c)


class TestMatchings:
    def test_fits_examples(self):
        assert fits(matching([(1, 2), (3, 4)]), matching([(2, 3), (4, 1)]))
        assert not fits(matching([(1, 2), (3, 4)]), matching([(1, 2), (3, 4)]))
        assert fits(matching([(1, 2)]), matching([(1, 2)]))
        with pytest.raises(DomainError):
            fits(matching([(1, 2)]), matching([(1, 3)]))

    def test_matching_counts(self):
        assert [len(all_matchings(range(k))) for k in (0, 2, 4, 6)] == [1, 1, 3, 15]
        with pytest.raises(DomainError):
            all_matchings(range(3))

    def test_two_labels_reduce_to_one(self):
        R = {matching([("a", "b")]): (1.0, None, 0)}
        assert len(reduce_representative(R)) == 1

    def test_cheaper_partner_kept(self):
        B = range(4)
        M1, M2, M3 = all_matchings(B)
        R = {M1: (5.0, None, 0), M2: (1.0, None, 0), M3: (2.0, None, 0)}
        kept = reduce_representative(R)
        assert M2 in kept
        for comp in all_matchings(B):
            assert opt_against(comp, kept) == opt_against(comp, R)

    @given(st.sampled_from([2, 4, 6]), st.data())
    def test_representative_preserves_opt(self, k, data):
        Ms = all_matchings(range(k))
        subset = data.draw(st.lists(st.sampled_from(Ms), min_size=1, unique=True))
        costs = data.draw(st.lists(st.floats(0, 10), min_size=len(subset), max_size=len(subset)))
        R = {M: (c, None, 0) for M, c in zip(subset, costs)}
        kept = reduce_representative(R)
        assert set(kept) <= set(R)
        for comp in Ms:
            assert opt_against(comp, kept) == opt_against(comp, R)


class TestLeaf:
    p, q = (0.0, 1.0), (1.0, 1.0)

    def test_no_points(self):
        cost, paths = solve_leaf([], {"p": self.p, "q": self.q}, matching([("p", "q")]))
        assert cost == pytest.approx(hyp_distance(P(*self.p), P(*self.q)))

    def test_one_point(self):
        v = (0.5, 2.0)
        cost, paths = solve_leaf([v], {"p": self.p, "q": self.q}, matching([("p", "q")]))
        expect = hyp_distance(P(*self.p), P(*v)) + hyp_distance(P(*v), P(*self.q))
        assert cost == pytest.approx(expect)
        assert paths == [[self.p, v, self.q]]

    def test_two_points_best_order(self):
        u, v = (0.9, 1.5), (0.1, 1.5)
        cost, _ = solve_leaf([u, v], {"p": self.p, "q": self.q}, matching([("p", "q")]))
        d = lambda a, b: hyp_distance(P(*a), P(*b))
        orders = [d(self.p, a) + d(a, b) + d(b, self.q) for a, b in ((u, v), (v, u))]
        assert cost == pytest.approx(min(orders))

    def test_root_cycle(self):
        pts = [(0.0, 1.0), (1.0, 1.0), (0.5, 2.0)]
        cost, _ = solve_leaf(pts, {}, frozenset())
        d = lambda a, b: hyp_distance(P(*a), P(*b))
        assert cost == pytest.approx(d(pts[0], pts[1]) + d(pts[1], pts[2]) + d(pts[2], pts[0]))


class TestExactTSP:
    def test_held_karp_matches_enumeration(self, rng):
        for n in range(3, 9):
            D = pairwise_dist(as_array(random_points(rng, n)))
            hk, order = held_karp(D)
            assert hk == pytest.approx(brute_force_tsp(D)[0], abs=1e-9)
            assert sorted(order) == list(range(n))

    def test_two_opt_never_worse(self, rng):
        D = pairwise_dist(as_array(random_points(rng, 12)))
        start = list(range(12))
        cost = lambda o: sum(D[a, b] for a, b in zip(o, o[1:] + o[:1]))
        assert cost(two_opt(D, start)) <= cost(start) + 1e-12


class TestRunTSP:
    def test_two_points(self):
        pts = [P(0, 1), P(1.5, 2)]
        tour = run_tsp(Instance(pts, 0.5, 4), c_g=1.0)
        prep = prepare(pts, 0.5)
        assert tour.length == pytest.approx(2 * hyp_distance(*prep.perturbed), rel=1e-9)

    def test_needs_two(self):
        with pytest.raises(DomainError):
            run_tsp(Instance([P(0, 1)], 0.5, 4))

    def test_three_points(self):
        pts = [P(0, 1), P(1, 1.5), P(0.3, 2.5)]
        inst = Instance(pts, 0.5, 8)
        tour = run_tsp(inst, c_g=1.0)
        per = exact_tsp(inst.prepared().perturbed)[0]
        assert tour.length >= per - 1e-9
        assert tour.length <= 1.1 * per

    def test_p4_example(self):
        pts = [P(0, 1.3), P(0.4, 1.1), P(0.9, 1.7), P(0.2, 2.6)]
        inst = Instance(pts, 0.5, 8)
        pert = inst.prepared().perturbed
        D = pairwise_dist(as_array(pert))
        orders = [(0, 1, 2, 3), (0, 1, 3, 2), (0, 2, 1, 3)]
        opt = min(sum(D[o[i], o[(i + 1) % 4]] for i in range(4)) for o in orders)
        rng = np.random.default_rng(0)
        for _ in range(4):
            tour = run_tsp(inst, inst.prepared().shifts.sample(rng), c_g=1.0)
            assert tour.length >= opt - 1e-9

    def test_feasible_and_lower_bound(self, rng):
        for n in (4, 6, 9):
            inst = Instance(random_points(rng, n), 0.5, 8)
            prep = inst.prepared()
            opt = exact_tsp(prep.perturbed)[0]
            graph = PortalGraph(prep.tree(prep.shifts.sample(rng)), 8, 1.0)
            tour = graph.solve()
            assert sorted(tour.point_order()) == list(range(n))
            assert tour.max_portal_use() <= 2
            assert tour.length >= opt - 1e-9
            uses = portal_uses(graph.W, tour.walk, graph.facets, graph.portal_facets)
            assert max(uses.values(), default=0) <= 2

    def test_monotone_in_r(self, rng):
        inst = Instance(random_points(rng, 7), 0.5, 16)
        prep = inst.prepared()
        for _ in range(3):
            graph = PortalGraph(prep.tree(prep.shifts.sample(rng)), 16, 1.0, r_values=(2, 4, 8))
            lengths = [graph.solve(r).length for r in (2, 4, 8, 16)]
            assert all(a >= b - 1e-9 for a, b in zip(lengths, lengths[1:]))

    def test_bmax_cap(self, rng):
        inst = Instance(random_points(rng, 8), 0.5, 4)
        prep = inst.prepared()
        graph = PortalGraph(prep.tree(Shift.identity(2)), 4, 1.0)
        with pytest.raises(ResourceCapExceeded):
            graph.solve(4, b_max=1)
        tour = graph.solve(4, b_max=None)
        assert max(cell_crossings(graph.W, tour.walk, graph.tree).values()) > 1


class TestCombine:
    def test_compressed_pass_through(self):
        empty = RepTable(0, {(): {frozenset(): (0.0, None, 0)}})
        B = ((5, 0), (6, 0))
        child = RepTable(1, {B: {matching([B]): (1.5, None, 0)}}, has_points=True)
        out = combine(0, [empty, child], {}, allowed_outer=lambda p: True)
        assert out.sets[B][matching([B])][0] == 1.5

    def test_glue_portal_used_twice(self):
        o1, o2, p = 1, 2, 9
        A_B = tuple(sorted([(o1, 0), (o2, 0), (p, 0), (p, 1)]))
        A = RepTable(0, {A_B: {matching([((o1, 0), (p, 0)), ((o2, 0), (p, 1))]): (2.0, None, 0)}})
        C_B = ((p, 0), (p, 1))
        C = RepTable(1, {C_B: {matching([C_B]): (0.75, None, 0)}}, has_points=True)
        out = combine(3, [A, C], {p: (0, 1)}, allowed_outer=lambda q: q in (o1, o2))
        B = ((o1, 0), (o2, 0))
        assert out.sets[B][matching([B])][0] == pytest.approx(2.75)

    def test_closed_cycle_only_at_root(self):
        p = 9
        B = ((p, 0), (p, 1))
        A = RepTable(0, {B: {matching([B]): (1.0, None, 0)}}, has_points=True)
        C = RepTable(1, {B: {matching([B]): (2.0, None, 0)}}, has_points=True)
        inner = combine(3, [A, C], {p: (0, 1)}, allowed_outer=lambda q: False)
        assert not any(inner.sets.values())
        root = combine(3, [A, C], {p: (0, 1)}, root=True, allowed_outer=lambda q: False)
        assert root.sets[()][frozenset()][0] == pytest.approx(3.0)


def test_table_dp_reference_agrees():
    """The cell-by-cell table DP never beats the portal-graph optimum.

    The table engine glues portals shared by exactly two children, so it is a
    restricted reference; this instance is one where it is feasible.
    """
    rng = np.random.default_rng(3)
    pts = random_points(rng, 4, width=1.0, log_height=0.5)
    inst = Instance(pts, 10.0, 1)
    prep = inst.prepared()
    graph = PortalGraph(prep.tree(Shift.identity(2)), 1, 1.0)
    best = graph.solve(1, b_max=None).length
    table = run_table_dp(graph, 1)
    assert math.isfinite(table)
    assert table >= best - 1e-9
