import io
import itertools
import json
import math

import networkx as nx
import numpy as np
import pytest
from oracles import FIG6_CYCLE_LENGTHS, FIG6_SIMPLE_LOOPS
from suite import converged_bp, loopy_suite

from loopcalc import FactorGraph, PseudoMarginals, brute_force_partition
from loopcalc.bp import bp_run
from loopcalc.coloring import ColoringModel, build_coloring_factor_graph, fig6_edges, symmetric_bethe
from loopcalc.errors import BudgetError, InputError, NotATreeError
from loopcalc.exp_family import SufficientStatistic
from loopcalc.factor_graph import exact_pseudo_marginals, joint_table
from loopcalc.generators import cycle_scopes, random_factor_graph, random_tree_scopes
from loopcalc.loops import (
    GeneralizedLoop,
    LedgerEntry,
    MarginalScope,
    b_C_table,
    correlation_matrix,
    enumerate_generalized_loops,
    enumerate_simple_loops,
    full_loop_series,
    loop_weight,
    loop_weight_binary,
    loop_weight_delta_basis,
    marginal_correction,
    marginal_edge_sets,
    marginal_loop_weight,
    simple_loop_weight_trace,
    subset_weight,
    tree_correlation_decompose,
    truncated_series_estimates,
    write_ledger,
)


def pairwise(n, edges, q=2):
    return FactorGraph.from_arrays(np.ones((n, q)), [(e, np.ones((q, q))) for e in edges])


def fig3_graph():
    """The generalized-loop illustration: 7 variables, 5 factors, 13 edges."""
    vs = ["1", "2", "3", "z3", "z22", "z222", "4"]
    fs = ["a3", "a2", "z2", "z33", "z4"]
    inc = [
        ("a3", "3"), ("a3", "1"), ("a2", "2"), ("a2", "3"), ("z2", "2"), ("z2", "z22"), ("z2", "z222"),
        ("z4", "z3"), ("z4", "1"), ("a3", "z3"), ("z33", "z3"), ("a2", "z222"), ("z33", "4"),
    ]
    scopes = {f: [vs.index(v) for a, v in inc if a == f] for f in fs}
    return FactorGraph.from_arrays(np.ones((7, 2)), [(scopes[f], np.ones((2,) * len(scopes[f]))) for f in fs])


def random_instance(seed, n, scopes, q):
    rng = np.random.default_rng(seed)
    g = random_factor_graph(rng, n, scopes, q)
    res = converged_bp(g)
    assert res is not None
    return g, res


# ------------------------------------------------------------------ enumeration


class TestEnumeration:
    def test_path_has_no_loops(self):
        assert list(enumerate_generalized_loops(pairwise(3, [(0, 1), (1, 2)]))) == []

    def test_triangle(self, triangle_coloring):
        loops = list(enumerate_generalized_loops(triangle_coloring))
        assert [lp.edges for lp in loops] == [tuple(range(6))]
        assert len(enumerate_simple_loops(triangle_coloring)) == 1

    def test_tree_has_no_simple_loops(self, rng):
        g = random_factor_graph(rng, 7, random_tree_scopes(rng, 7), 2)
        assert enumerate_simple_loops(g) == []

    def test_fig3_graph(self):
        g = fig3_graph()
        loops = list(enumerate_generalized_loops(g))
        assert len(loops) == 4  # plus the empty set makes the five drawn structures
        for lp in loops:
            assert lp.is_generalized_loop()
        assert sum(lp.is_simple() for lp in loops) == 2
        # exhaustive check of the degree rule
        count = 0
        for mask in range(1, 1 << g.n_edges):
            edges = [e for e in range(g.n_edges) if mask >> e & 1]
            count += GeneralizedLoop.from_edges(g, edges).is_generalized_loop()
        assert count == 4

    def test_every_enumerated_set_is_a_loop_and_canonically_ordered(self):
        for inst in loopy_suite(10, seed0=600):
            loops = list(enumerate_generalized_loops(inst.g))
            assert [lp.edges for lp in loops] == sorted(lp.edges for lp in loops)
            assert all(lp.is_generalized_loop() for lp in loops)

    def test_budget(self):
        g = pairwise(26, cycle_scopes(26))
        with pytest.raises(BudgetError, match="24"):
            list(enumerate_generalized_loops(g))
        assert len(list(enumerate_generalized_loops(g, max_edges=52))) == 1

    def test_max_edges_truncates(self, triangle_coloring):
        assert list(enumerate_generalized_loops(triangle_coloring, max_edges=5)) == []

    def test_canonical_orientation(self):
        g = pairwise(4, [(2, 3), (0, 3), (1, 2), (0, 1)])
        (lp,) = enumerate_simple_loops(g)
        assert lp.cycle[0] == ("v", 0)
        # the neighbouring factors of variable 0 are 1 (scope (0, 3)) and 3 (scope (0, 1))
        assert lp.cycle[1] == ("f", 1)


def _fig6_cycle_scan(edges, n_nodes):
    """Connected edge subsets with every vertex degree in {0, 2}, by a scan over all 2^|E| masks."""
    masks = np.zeros(n_nodes, dtype=np.uint32)
    for k, (u, v) in enumerate(edges):
        masks[u] |= np.uint32(1 << k)
        masks[v] |= np.uint32(1 << k)
    found = []
    step = 1 << 20
    for start in range(0, 1 << len(edges), step):
        s = np.arange(start, start + step, dtype=np.uint32)
        ok = s != 0
        for m in masks:
            d = np.bitwise_count(s & m)
            ok &= (d == 0) | (d == 2)
        found.extend(int(x) for x in s[ok])
    hist = {}
    for mask in found:
        sub = nx.Graph([edges[k] for k in range(len(edges)) if mask >> k & 1])
        if nx.is_connected(sub):
            L = sub.number_of_edges()
            hist[L] = hist.get(L, 0) + 1
    return hist


def test_fig6_simple_loop_count_by_subset_scan():
    edges = fig6_edges()
    assert _fig6_cycle_scan(edges, 16) == FIG6_CYCLE_LENGTHS


def test_fig6_simple_loops():
    g = build_coloring_factor_graph(ColoringModel(tuple(fig6_edges()), 3, 1.0))
    loops = enumerate_simple_loops(g)
    assert len(loops) == FIG6_SIMPLE_LOOPS
    hist = {}
    for lp in loops:
        hist[len(lp.edges) // 2] = hist.get(len(lp.edges) // 2, 0) + 1
    assert hist == FIG6_CYCLE_LENGTHS


# ------------------------------------------------------------------ weights


def _binary_oracle(g, b, edges, C=(), gval=None):
    """Direct evaluation of the binary loop formula (with the optional marginal block)."""
    z = [(np.arange(2) - b.var[i][1]) / math.sqrt(b.var[i][1] * b.var[i][0]) for i in range(g.n_vars)]
    deg_v = {i: 0 for i in range(g.n_vars)}
    in_loop = set()
    for e in edges:
        i, a = g.edges[e]
        deg_v[i] += 1
        in_loop.add((i, a))
    scope = MarginalScope.of(g, C) if C else None
    total = 1.0
    for a, sc in enumerate(g.scopes):
        if scope and a in scope.F_C:
            continue
        acc = 0.0
        for x in itertools.product(range(2), repeat=len(sc)):
            term = b.fac[a][x]
            for k, i in enumerate(sc):
                if (i, a) in in_loop:
                    term *= z[i][x[k]]
            acc += term
        total *= acc
    for i in range(g.n_vars):
        if i not in C:
            total *= float(b.var[i] @ z[i] ** deg_v[i])
    if C:
        bc = b_C_table(g, b, scope)
        acc = 0.0
        for x in itertools.product(range(2), repeat=len(scope.C)):
            term = gval[x] * bc[x]
            for k, i in enumerate(scope.C):
                term *= z[i][x[k]] ** deg_v[i]
            acc += term
        total *= acc
    return total


class TestBinary:
    def test_matches_closed_form(self):
        checked = 0
        for inst in loopy_suite(12, qs=(2,), seed0=700):
            for lp in enumerate_generalized_loops(inst.g):
                want = _binary_oracle(inst.g, inst.result.beliefs, lp.edges)
                assert loop_weight_binary(inst.g, inst.result.beliefs, lp) == pytest.approx(want, rel=1e-10, abs=1e-13)
                assert loop_weight(inst.g, inst.result.beliefs, lp) == pytest.approx(want, rel=1e-10, abs=1e-13)
                checked += 1
        assert checked > 20

    def test_degree_three_variable_gives_third_moment(self):
        # variable 0 shared by three pairwise factors to 1, 2, 3, which share factors pairwise with 4
        g, res = random_instance(11, 5, [(0, 1), (0, 2), (0, 3), (1, 4), (2, 4), (3, 4)], 2)
        loops = [lp for lp in enumerate_generalized_loops(g) if lp.var_degree.get(0) == 3]
        assert loops
        # the oracle's variable term for degree 3 is the standardized third central moment
        for lp in loops:
            want = _binary_oracle(g, res.beliefs, lp.edges)
            assert loop_weight_binary(g, res.beliefs, lp) == pytest.approx(want, rel=1e-10)

    def test_wrong_alphabet(self, triangle_coloring):
        res = bp_run(triangle_coloring)
        (lp,) = enumerate_generalized_loops(triangle_coloring)
        with pytest.raises(InputError, match="q = 2"):
            loop_weight_binary(triangle_coloring, res.beliefs, lp)


class TestDeltaAndTrace:
    def test_triangle_delta_equals_loop_weight(self):
        g, res = random_instance(3, 3, cycle_scopes(3), 3)
        (lp,) = enumerate_generalized_loops(g)
        assert loop_weight_delta_basis(g, res.beliefs, lp) == pytest.approx(loop_weight(g, res.beliefs, lp), rel=1e-10)

    def test_not_a_loop_rejected(self, triangle_coloring):
        res = bp_run(triangle_coloring)
        with pytest.raises(InputError, match="not a generalized loop"):
            loop_weight_delta_basis(triangle_coloring, res.beliefs, [0, 1])
        with pytest.raises(InputError):
            loop_weight(triangle_coloring, res.beliefs, [0])

    def test_binary_trace_is_product_of_correlation_coefficients(self):
        g, res = random_instance(5, 4, cycle_scopes(4), 2)
        (lp,) = enumerate_simple_loops(g)
        prod = 1.0
        for a, (i, j) in enumerate(g.scopes):
            p = res.beliefs.fac[a]
            bi, bj = p.sum(1), p.sum(0)
            cov = p[1, 1] - bi[1] * bj[1]
            prod *= cov / math.sqrt(bi[0] * bi[1] * bj[0] * bj[1])
        assert simple_loop_weight_trace(g, res.beliefs, lp) == pytest.approx(prod, rel=1e-12)

    def test_q4_trace_matches_loop_weight(self):
        g, res = random_instance(8, 5, cycle_scopes(5), 4)
        (lp,) = enumerate_simple_loops(g)
        assert simple_loop_weight_trace(g, res.beliefs, lp) == pytest.approx(loop_weight(g, res.beliefs, lp), rel=1e-10)

    def test_independent_beliefs_give_zero(self, rng):
        g = random_factor_graph(rng, 3, cycle_scopes(3), 3)
        var = rng.dirichlet(np.ones(3), size=3)
        pm = PseudoMarginals(var, tuple(np.outer(var[i], var[j]) for i, j in g.scopes))
        (lp,) = enumerate_simple_loops(g)
        assert abs(simple_loop_weight_trace(g, pm, lp)) < 1e-15
        assert abs(loop_weight(g, pm, lp)) < 1e-15

    def test_orientation_invariance(self):
        g, res = random_instance(9, 5, cycle_scopes(5) + [(0, 2)], 3)
        for lp in enumerate_simple_loops(g):
            rev = (lp.cycle[0],) + tuple(reversed(lp.cycle[1:]))
            flipped = GeneralizedLoop.from_edges(g, lp.edges, rev)
            assert simple_loop_weight_trace(g, res.beliefs, flipped) == pytest.approx(
                simple_loop_weight_trace(g, res.beliefs, lp), rel=1e-10, abs=1e-14
            )

    def test_non_simple_rejected(self):
        g, res = random_instance(10, 4, [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)], 2)
        bad = [lp for lp in enumerate_generalized_loops(g) if not lp.is_simple()]
        assert bad
        with pytest.raises(InputError, match="simple"):
            simple_loop_weight_trace(g, res.beliefs, bad[0])

    def test_boundary_beliefs_rejected(self, triangle_coloring):
        pm = exact_pseudo_marginals(triangle_coloring)
        var = pm.var.copy()
        var[0] = [1.0, 0.0, 0.0]
        with pytest.raises(InputError, match="boundary"):
            loop_weight(triangle_coloring, PseudoMarginals(var, pm.fac), list(range(6)))


# ------------------------------------------------------------------ series


class TestSeries:
    def test_tree_is_bethe(self, rng):
        g = random_factor_graph(rng, 6, random_tree_scopes(rng, 6), 3)
        res = bp_run(g)
        s = full_loop_series(g, res)
        assert s.ledger == [] and s.z_estimate == res.z_bethe

    def test_triangle(self):
        g, res = random_instance(12, 3, cycle_scopes(3), 3)
        assert full_loop_series(g, res).z_estimate == pytest.approx(brute_force_partition(g), rel=1e-9)

    def test_chorded_cycle(self):
        g, res = random_instance(13, 4, cycle_scopes(4) + [(0, 2)], 3)
        s = full_loop_series(g, res)
        assert s.z_estimate == pytest.approx(brute_force_partition(g), rel=1e-7)
        assert s.ledger[-1].cumulative_sum == pytest.approx(s.series_sum)

    @pytest.mark.parametrize("method", ["diagonal_fisher", "theorem1", "delta_basis"])
    def test_methods(self, method):
        g, res = random_instance(14, 4, [(0, 1, 2), (1, 2, 3), (0, 3)], 3)
        assert full_loop_series(g, res, method=method).z_estimate == pytest.approx(brute_force_partition(g), rel=1e-9)

    def test_single_cycle_truncations_equal_full(self):
        g, res = random_instance(15, 5, cycle_scopes(5), 3)
        full = full_loop_series(g, res).z_estimate
        t = truncated_series_estimates(g, res)
        assert t.z_bethe_plus_loops == pytest.approx(full, rel=1e-12)
        assert t.z_bethe_times_loops == pytest.approx(full, rel=1e-12)

    @pytest.mark.parametrize(
        "q,z,plus,times,tol",
        [(3, 2628, 1.117, 1.060, 1e-3), (9, 108384232602240, 1.00007, 1.00001, 1e-5)],
    )
    def test_fig6_truncations(self, q, z, plus, times, tol):
        g, res = symmetric_bethe(ColoringModel(tuple(fig6_edges()), q, 1.0))
        t = truncated_series_estimates(g, res)
        assert t.z_bethe_plus_loops / z == pytest.approx(plus, abs=tol)
        assert t.z_bethe_times_loops / z == pytest.approx(times, abs=tol)

    def test_ledger_format(self, triangle_coloring):
        res = bp_run(triangle_coloring)
        s = full_loop_series(triangle_coloring, res)
        buf = io.StringIO()
        write_ledger(s.ledger, buf, triangle_coloring)
        rows = [json.loads(line) for line in buf.getvalue().splitlines()]
        assert len(rows) == 1
        assert set(rows[0]) == {"edges", "weight", "method", "cumulative_sum"}
        assert rows[0]["edges"][0] == [0, 0]
        assert LedgerEntry((0,), 0.5, "trace", 1.5).to_dict() == {
            "edges": [0], "weight": 0.5, "method": "trace", "cumulative_sum": 1.5
        }


def test_holant_terms_vanish_off_generalized_loops():
    for inst in loopy_suite(6, max_edges=12, seed0=800):
        g, b = inst.g, inst.result.beliefs
        off = 0.0
        for mask in range(1, 1 << g.n_edges):
            edges = [e for e in range(g.n_edges) if mask >> e & 1]
            if not GeneralizedLoop.from_edges(g, edges).is_generalized_loop():
                off += subset_weight(g, b, edges)
        assert abs(off) < 1e-9


# ------------------------------------------------------------------ marginals


class TestMarginal:
    def test_scope_sets(self):
        g = pairwise(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
        s = MarginalScope.of(g, [1, 0])
        assert s.C == (0, 1) and s.F_C == frozenset({0}) and s.E_FC == frozenset({0, 1})
        assert all(e not in s.E_FC for e in s.allowed(g))

    def test_empty_set_weight_is_bethe_estimate(self):
        g, res = random_instance(20, 4, cycle_scopes(4), 3)
        gval = np.arange(9.0).reshape(3, 3)
        want = float(np.einsum("i,j,ij->", res.beliefs.var[0], res.beliefs.var[2], gval))
        assert marginal_loop_weight(g, res.beliefs, [0, 2], gval, []) == pytest.approx(want, rel=1e-12)

    def test_unit_g_reduces_to_loop_weight(self):
        g, res = random_instance(21, 5, cycle_scopes(5) + [(1, 3)], 3)
        for lp in enumerate_generalized_loops(g):
            if 4 not in lp.var_degree:
                got = marginal_loop_weight(g, res.beliefs, [4], np.ones(3), lp.edges)
                assert got == pytest.approx(loop_weight(g, res.beliefs, lp), rel=1e-10, abs=1e-14)

    def test_binary_closed_form(self):
        for inst in loopy_suite(6, qs=(2,), seed0=900):
            g, b = inst.g, inst.result.beliefs
            rng = np.random.default_rng(inst.seed)
            C = tuple(sorted(g.scopes[0]))
            gval = rng.uniform(-1, 1, size=(2,) * len(C))
            for edges in marginal_edge_sets(g, C):
                want = _binary_oracle(g, b, edges, C, gval)
                assert marginal_loop_weight(g, b, C, gval, edges) == pytest.approx(want, rel=1e-10, abs=1e-12)

    def test_edges_in_fc_rejected(self):
        g, res = random_instance(22, 3, cycle_scopes(3), 2)
        with pytest.raises(InputError, match="E\\(F_C\\)"):
            marginal_loop_weight(g, res.beliefs, [0, 1], np.ones((2, 2)), [0, 1])

    def test_tree_single_variable_is_belief(self, rng):
        g = random_factor_graph(rng, 5, random_tree_scopes(rng, 5), 3)
        res = bp_run(g)
        gval = np.array([1.0, -2.0, 0.5])
        mc = marginal_correction(g, res, [2], gval)
        assert mc.estimate == pytest.approx(float(res.beliefs.var[2] @ gval), rel=1e-10)

    def test_triangle_indicator(self):
        g, res = random_instance(23, 3, cycle_scopes(3), 3)
        p = joint_table(g)
        exact = p[:, 0, :].sum() / p.sum()
        assert marginal_correction(g, res, [1], np.array([1.0, 0.0, 0.0])).estimate == pytest.approx(exact, abs=1e-8)

    def test_single_cycle_unique_loop(self):
        g, res = random_instance(24, 5, cycle_scopes(5), 3)
        p = joint_table(g)
        exact = p.sum(axis=(1, 2, 3, 4)) / p.sum()
        mc = marginal_correction(g, res, [0], np.eye(3)[1])
        assert mc.n_terms == 2
        assert mc.estimate == pytest.approx(exact[1], abs=1e-10)

    def test_callable_g(self):
        g, res = random_instance(25, 4, cycle_scopes(4), 2)
        a = marginal_correction(g, res, [0, 1], lambda x0, x1: float(x0 == x1)).estimate
        b = marginal_correction(g, res, [0, 1], np.eye(2)).estimate
        assert a == pytest.approx(b, rel=1e-14)


# ------------------------------------------------------------------ trees


def _exact_cor(g, i, j):
    p = joint_table(g)
    p /= p.sum()
    pij = p.sum(axis=tuple(k for k in range(g.n_vars) if k not in (i, j)))
    if i > j:
        pij = pij.T
    s = SufficientStatistic.indicator(g.q)
    return correlation_matrix(pij, pij.sum(1), pij.sum(0), s, s)


class TestTreeCorrelation:
    def test_adjacent_pair(self, rng):
        g = random_factor_graph(rng, 3, [(0, 1), (1, 2)], 3)
        pm = exact_pseudo_marginals(g)
        s = SufficientStatistic.indicator(3)
        want = correlation_matrix(pm.fac[0], pm.var[0], pm.var[1], s, s)
        np.testing.assert_allclose(tree_correlation_decompose(g, pm, 0, 1), want, atol=1e-15)

    def test_binary_chain(self, rng):
        g = random_factor_graph(rng, 3, [(0, 1), (1, 2)], 2)
        pm = exact_pseudo_marginals(g)
        got = tree_correlation_decompose(g, pm, 0, 2)
        assert got.shape == (1, 1)
        assert got[0, 0] == pytest.approx(_exact_cor(g, 0, 2)[0, 0], abs=1e-12)

    def test_random_tree_q3(self, rng):
        g = random_factor_graph(rng, 5, random_tree_scopes(rng, 5), 3)
        pm = exact_pseudo_marginals(g)
        for i, j in itertools.permutations(range(5), 2):
            np.testing.assert_allclose(tree_correlation_decompose(g, pm, i, j), _exact_cor(g, i, j), atol=1e-8)

    def test_not_a_tree(self, triangle_coloring):
        with pytest.raises(NotATreeError):
            tree_correlation_decompose(triangle_coloring, exact_pseudo_marginals(triangle_coloring), 0, 1)

    def test_disconnected(self):
        g = pairwise(4, [(0, 1), (2, 3)])
        with pytest.raises(InputError, match="different components"):
            tree_correlation_decompose(g, exact_pseudo_marginals(g), 0, 3)
