import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierlatent.dsep import (ExactOracle, is_dsep, latent_min_sep_size, min_dsep_size,
                             min_dsep_size_brute, pure_descendants)
from hierlatent.errors import ArgumentError, RefusalError, UnknownNodeError
from hierlatent.figures import BUILTINS, builtin
from hierlatent.graph import HierGraph, random_graph

from conftest import hier_graphs, random_instances


def all_pairs(n):
    """Every (S, T) of disjoint nonempty measured sets."""
    for labels in itertools.product((0, 1, 2), repeat=n):
        S = {j for j, v in enumerate(labels) if v == 1}
        T = {j for j, v in enumerate(labels) if v == 2}
        if S and T:
            yield S, T


# ---------------------------------------------------------------- is_dsep

def test_is_dsep_examples():
    a = builtin("fig5a")
    assert is_dsep(a, {0}, {2}, {(0, 0)})
    assert not is_dsep(a, {0}, {1}, {(0, 0)})
    assert not is_dsep(a, {0}, {2})
    d = builtin("fig5d")
    assert is_dsep(d, {0, 1}, {4, 5}, set())
    # conditioning on a collider's parents does not open anything
    assert not is_dsep(d, {0, 1}, {4, 5, 6}, set())


def test_is_dsep_errors():
    a = builtin("fig5a")
    with pytest.raises(ArgumentError):
        is_dsep(a, {0, 1}, {1, 2})
    with pytest.raises(UnknownNodeError):
        is_dsep(a, {0}, {9})


def _paths_blocked(g, S, T, Z):
    """Path enumeration on the skeleton, the textbook definition."""
    parents = g.parents()
    n = g.num_nodes
    nbrs = [set() for _ in range(n)]
    for v, ps in enumerate(parents):
        for p in ps:
            nbrs[v].add(p)
            nbrs[p].add(v)
    kids = [[] for _ in range(n)]
    for v, ps in enumerate(parents):
        for p in ps:
            kids[p].append(v)

    def descendants(v):
        out, stack = set(), [v]
        while stack:
            u = stack.pop()
            for c in kids[u]:
                if c not in out:
                    out.add(c)
                    stack.append(c)
        return out

    S = {g.measured_id(j) for j in S}
    T = {g.measured_id(j) for j in T}
    Z = {g.latent_id(*z) for z in Z}

    def blocked(path):
        for a, b, c in zip(path, path[1:], path[2:]):
            collider = a in parents[b] and c in parents[b]
            if collider:
                if b not in Z and not (descendants(b) & Z):
                    return True
            elif b in Z:
                return True
        return False

    def walk(path):
        v = path[-1]
        if v in T:
            yield path
            return
        for u in nbrs[v]:
            if u not in path:
                yield from walk(path + [u])

    return all(blocked(p) for s in S for p in walk([s]))


@settings(max_examples=30, deadline=None)
@given(hier_graphs(max_measured=7), st.integers(0, 2 ** 31 - 1))
def test_bayes_ball_matches_path_enumeration(g, seed):
    rng = np.random.default_rng(seed)
    n = g.num_measured
    labels = rng.integers(0, 3, size=n)
    S = set(np.flatnonzero(labels == 1).tolist()) or {0}
    T = set(np.flatnonzero(labels == 2).tolist()) - S or {n - 1}
    T -= S
    if not T:
        return
    latents = [(l, i) for l, k in enumerate(g.layer_sizes) for i in range(k)]
    Z = [z for z in latents if rng.random() < 0.3]
    assert is_dsep(g, S, T, Z) == _paths_blocked(g, S, T, Z)


# ---------------------------------------------------------------- min separator

def test_min_dsep_examples():
    a = builtin("fig5a")
    assert min_dsep_size(a, {0, 1}, {2, 3}) == 1
    assert min_dsep_size(a, {0, 2}, {1, 3}) == 2
    assert min_dsep_size(builtin("fig5d"), {0, 1}, {4, 5}) == 0
    assert min_dsep_size(a, set(), {1}) == 0


def test_brute_refuses_large():
    big = HierGraph(42, [21], [np.kron(np.eye(21, dtype=int), np.ones((1, 2), dtype=int))])
    with pytest.raises(RefusalError):
        min_dsep_size_brute(big, {0}, {1})


def test_flow_matches_brute_on_builtins_all_pairs():
    for name in ("fig5a", "fig5b", "fig5c", "fig5d"):
        g = builtin(name)
        for S, T in all_pairs(g.num_measured):
            assert min_dsep_size(g, S, T) == min_dsep_size_brute(g, S, T), (name, S, T)


def test_flow_matches_brute_random():
    rng = np.random.default_rng(7)
    for g in random_instances(50, seed0=3):
        n = g.num_measured
        for _ in range(4):
            labels = rng.integers(0, 3, size=n)
            S = set(np.flatnonzero(labels == 1).tolist())
            T = set(np.flatnonzero(labels == 2).tolist())
            assert min_dsep_size(g, S, T) == min_dsep_size_brute(g, S, T)


@settings(max_examples=40, deadline=None)
@given(hier_graphs(max_measured=9, max_layers=3), st.integers(0, 2 ** 31 - 1))
def test_symmetry_monotonicity_bound(g, seed):
    rng = np.random.default_rng(seed)
    n = g.num_measured
    labels = rng.integers(0, 3, size=n)
    S = set(np.flatnonzero(labels == 1).tolist())
    T = set(np.flatnonzero(labels == 2).tolist())
    r = min_dsep_size(g, S, T)
    assert r == min_dsep_size(g, T, S)
    assert 0 <= r <= g.layer_sizes[-1]
    free = [j for j in range(n) if j not in S | T]
    if free:
        assert min_dsep_size(g, S | {free[0]}, T) >= r


# ---------------------------------------------------------------- surrogates

def test_pure_descendants_examples():
    d = builtin("fig5d")
    assert pure_descendants(d, [(1, 2)]) == {4, 5}
    assert pure_descendants(d, [(1, 0), (1, 1), (1, 2)]) == set(range(7))
    assert pure_descendants(d, [(0, 0)]) == {0, 1, 2, 3}
    f2 = builtin("fig2")
    assert pure_descendants(f2, [(2, 4), (2, 5)]) == {8, 9, 10, 11, 12}


def _sample_latent_pairs(g, rng, count):
    latents = [(l, i) for l, k in enumerate(g.layer_sizes) for i in range(k)]
    out = []
    for _ in range(count):
        labels = rng.integers(0, 3, size=len(latents))
        zx = [z for z, v in zip(latents, labels) if v == 1]
        zy = [z for z, v in zip(latents, labels) if v == 2]
        if zx and zy:
            out.append((zx, zy))
    return out


def test_surrogate_queries_match_latent_queries():
    rng = np.random.default_rng(11)
    graphs = [builtin(n) for n in ("fig5a", "fig5b", "fig5c", "fig5d")] + \
        random_instances(20, seed0=5)
    for g in graphs:
        for zx, zy in _sample_latent_pairs(g, rng, 25):
            X, Y = pure_descendants(g, zx), pure_descendants(g, zy)
            if not X or not Y or X & Y:
                continue
            assert latent_min_sep_size(g, zx, zy) == min_dsep_size(g, X, Y), (zx, zy)


def test_exact_oracle_caches():
    o = ExactOracle(builtin("fig5a"))
    assert o.query({0, 1}, {2, 3}) == 1
    assert o.query([1, 0], (3, 2)) == 1
    assert len(o._cache) == 1
