import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierlatent.dsep import ExactOracle
from hierlatent.errors import (ModelViolationError, OracleInconsistencyError,
                               QueryBudgetExceeded)
from hierlatent.figures import BUILTINS, builtin
from hierlatent.graph import HierGraph, best_perm_shd_f1, validate_condition1
from hierlatent.recover import (RecoveryTrace, SurrogateMap, assign_multi_parents,
                                cluster_pure_children, find_isolated, recover_full,
                                recover_layer)

from conftest import hier_graphs, random_instances


def measured_map(n):
    return SurrogateMap((("x", j), frozenset([j])) for j in range(n))


def X(*idx):
    return [("x", j) for j in idx]


# ---------------------------------------------------------------- isolated

def test_no_isolated_fig5a():
    assert find_isolated(ExactOracle(builtin("fig5a")), measured_map(4)) == set()


def test_parentless_latent_fig5d():
    sur = SurrogateMap({"z2": frozenset({0, 1}), "z3": frozenset({2, 3}),
                        "z4": frozenset({4, 5})})
    assert find_isolated(ExactOracle(builtin("fig5d")), sur, level=1) == {"z4"}


def test_free_measured_column_isolated():
    a = builtin("fig5a")
    blocks = [a.blocks[0], np.hstack([a.blocks[1], np.zeros((2, 1), dtype=np.uint8)])]
    g = HierGraph(5, a.layer_sizes, blocks)
    assert find_isolated(ExactOracle(g), measured_map(5)) == {("x", 4)}
    est, _ = recover_full(ExactOracle(g), 5)
    assert best_perm_shd_f1(g, est).shd == 0


# ---------------------------------------------------------------- clusters

def test_clusters_fig5a():
    clusters, leftover = cluster_pure_children(ExactOracle(builtin("fig5a")), measured_map(4))
    assert clusters == [tuple(X(0, 1)), tuple(X(2, 3))]
    assert leftover == []


def test_clusters_fig5d():
    clusters, leftover = cluster_pure_children(ExactOracle(builtin("fig5d")), measured_map(7))
    assert clusters == [tuple(X(0, 1)), tuple(X(2, 3)), tuple(X(4, 5))]
    assert leftover == X(6)


def test_split_pair_rejected_fig2():
    g = builtin("fig2")
    trace = RecoveryTrace()
    clusters, _ = cluster_pure_children(ExactOracle(g), measured_map(13), trace=trace)
    assert all(not {("x", 0), ("x", 2)} <= set(c) for c in clusters)
    asked = [q for q in trace.queries if q["S"] == [0, 2]]
    assert asked and asked[0]["answer"] == 2


def _all_maximal_clusters(oracle, sur, cap):
    nodes = list(sur)

    def passes(T):
        rest = [v for v in nodes if v not in T]
        return oracle.query(sur.union(T), sur.union(rest)) <= 1

    good = []
    for k in range(2, len(nodes) + 1):
        for S in itertools.combinations(nodes, k):
            if all(passes(T) for m in range(2, min(cap, k) + 1)
                   for T in itertools.combinations(S, m)):
                good.append(frozenset(S))
    return {S for S in good if not any(S < other for other in good)}


def test_greedy_matches_enumeration():
    for g in [builtin(n) for n in ("fig5a", "fig5b", "fig5c", "fig5d")] + \
            random_instances(15, seed0=9, sizes=range(5, 10)):
        oracle = ExactOracle(g)
        sur = measured_map(g.num_measured)
        iso = find_isolated(oracle, sur)
        sur = SurrogateMap((k, v) for k, v in sur.items() if k not in iso)
        clusters, _ = cluster_pure_children(oracle, sur)
        assert {frozenset(c) for c in clusters} == _all_maximal_clusters(oracle, sur, 4)


def test_subset_cap_sweep_agrees():
    for g in random_instances(20, seed0=13):
        base, _ = recover_full(ExactOracle(g), g.num_measured, subset_cap=4)
        wide, _ = recover_full(ExactOracle(g), g.num_measured, subset_cap=8)
        pairs, _ = recover_full(ExactOracle(g), g.num_measured, subset_cap=2)
        assert base == wide == pairs


class MirrorBroken:
    def __init__(self, g):
        self.exact = ExactOracle(g)

    def query(self, S, T):
        r = self.exact.query(S, T)
        return r + 1 if len(S) > len(T) else r


def test_inconsistent_oracle_detected():
    with pytest.raises(OracleInconsistencyError) as info:
        cluster_pure_children(MirrorBroken(builtin("fig5b")), measured_map(6),
                              check_symmetry=True)
    err = info.value
    assert err.answers[0] != err.answers[1]
    assert err.query == (err.mirrored[1], err.mirrored[0])


# ---------------------------------------------------------------- parents

def test_triple_parent_fig5d():
    oracle = ExactOracle(builtin("fig5d"))
    sur = measured_map(7)
    clusters = [tuple(X(0, 1)), tuple(X(2, 3)), tuple(X(4, 5))]
    trace = RecoveryTrace()
    P = assign_multi_parents(oracle, ("x", 6), clusters, sur, trace=trace)
    assert P == (0, 1, 2)
    answers = {(tuple(q["S"]), tuple(q["T"])): q["answer"] for q in trace.queries}
    assert answers[((0, 2, 4), (1, 3, 5))] == 3
    assert answers[((0, 2, 4, 6), (1, 3, 5))] == 3
    # the two-parent candidate {z2, z3} fails on its first transversal
    assert answers[((0, 2), (1, 3, 4, 5))] == 2
    assert answers[((0, 2, 6), (1, 3, 4, 5))] == 3


def test_double_parent_fig2():
    g = builtin("fig2")
    oracle = ExactOracle(g)
    sur = measured_map(13)
    clusters, leftover = cluster_pure_children(oracle, sur)
    assert leftover == X(10)
    trace = RecoveryTrace()
    P = assign_multi_parents(oracle, ("x", 10), clusters, sur, trace=trace)
    assert sorted(set(clusters[i]) for i in P) == [set(X(8, 9)), set(X(11, 12))]
    singles = [d for d in trace.decisions if d["action"] == "parents"]
    assert len(singles) == 1 and len(singles[0]["parents"]) == 2


def test_no_clusters_is_violation():
    with pytest.raises(ModelViolationError):
        assign_multi_parents(ExactOracle(builtin("fig5a")), ("x", 0), [], measured_map(4))


# ---------------------------------------------------------------- layers

def test_layer_fig5a():
    res = recover_layer(ExactOracle(builtin("fig5a")), measured_map(4))
    assert res.children == (tuple(X(0, 1)), tuple(X(2, 3)))
    assert dict(res.surrogates) == {(1, 0): {0, 1}, (1, 1): {2, 3}}


def test_layer_fig5b_then_root():
    oracle = ExactOracle(builtin("fig5b"))
    first = recover_layer(oracle, measured_map(6))
    assert len(first.children) == 3
    second = recover_layer(oracle, first.surrogates, level=1)
    assert len(second.children) == 1 and len(second.children[0]) == 3


def test_single_cluster_terminates():
    g = HierGraph(3, [1], [[[1, 1, 1]]])
    est, trace = recover_full(ExactOracle(g), 3)
    assert est == g
    assert len(trace.surrogates) == 2


# ---------------------------------------------------------------- end to end

@pytest.mark.parametrize("name", sorted(BUILTINS))
def test_builtins_exact(name):
    g = builtin(name)
    est, trace = recover_full(ExactOracle(g), g.num_measured)
    m = best_perm_shd_f1(g, est)
    assert (m.shd, m.f1) == (0, 1.0)
    assert validate_condition1(est).ok
    for q in trace.queries:
        assert not set(q["S"]) & set(q["T"])


def test_random_exact():
    for g in random_instances(50):
        est, trace = recover_full(ExactOracle(g), g.num_measured)
        assert best_perm_shd_f1(g, est).shd == 0
        assert validate_condition1(est).ok


def test_trace_properties(tmp_path):
    g = builtin("fig2")
    _, trace = recover_full(ExactOracle(g), 13)
    cited = {q for d in trace.decisions for q in d["queries"]}
    assert all(d["queries"] for d in trace.decisions)
    assert cited <= set(range(len(trace.queries)))
    # level l+1 surrogates are unions of level-l surrogates
    for lower, upper in zip(trace.surrogates, trace.surrogates[1:]):
        pieces = [set(v) for v in lower["map"].values()]
        for v in upper["map"].values():
            v = set(v)
            assert v == set().union(*[p for p in pieces if p <= v])
        sets = list(upper["map"].values())
        assert all(len(s) >= 2 for s in sets)
        assert sum(len(s) for s in sets) == len(set().union(*map(set, sets)))
    path = tmp_path / "trace.jsonl"
    trace.write(path)
    back = RecoveryTrace.read(path)
    assert back.queries == trace.queries
    assert back.decisions == trace.decisions
    assert len(path.read_text().splitlines()) == \
        len(trace.queries) + len(trace.decisions) + len(trace.surrogates)


def test_budget():
    with pytest.raises(QueryBudgetExceeded) as info:
        recover_full(ExactOracle(builtin("fig2")), 13, budget=30)
    assert len(info.value.trace.queries) == 30


class Scrambled:
    """Exact answers with some flipped at random, deterministic per query."""

    def __init__(self, g, seed, rate):
        self.exact = ExactOracle(g)
        self.seed = seed
        self.rate = rate

    def query(self, S, T):
        key = hash((self.seed, frozenset(S), frozenset(T))) % 10_000 / 10_000
        r = self.exact.query(S, T)
        if key < self.rate:
            return max(0, r + (1 if key < self.rate / 2 else -1))
        return r


@settings(max_examples=40, deadline=None)
@given(hier_graphs(max_measured=9), st.integers(0, 10 ** 6), st.floats(0.05, 0.5))
def test_wrong_answers_never_crash(g, seed, rate):
    try:
        est, _ = recover_full(Scrambled(g, seed, rate), g.num_measured)
    except ModelViolationError:
        return
    assert est.num_measured == g.num_measured
