"""Exact answers to r(S, T): the fewest latents that d-separate S from T.

``S`` and ``T`` are sets of measured indices; conditioning sets are latents
given as ``(layer, index)`` pairs.
"""
from __future__ import annotations

import itertools
from collections import deque
from typing import Iterable, Protocol

import networkx as nx

from .errors import ArgumentError, RefusalError, UnknownNodeError
from .graph import HierGraph

BRUTE_FORCE_LATENT_CAP = 20


class RankOracle(Protocol):
    """Anything that answers r(S, T) for measured index sets."""

    def query(self, S: Iterable[int], T: Iterable[int]) -> int: ...


def _measured_ids(g: HierGraph, xs) -> frozenset:
    return frozenset(g.measured_id(int(j)) for j in xs)


def _latent_ids(g: HierGraph, zs) -> frozenset:
    return frozenset(g.latent_id(*z) for z in zs)


def _ancestors(g: HierGraph, ids) -> set:
    parents = g.parents()
    seen = set(ids)
    stack = list(ids)
    while stack:
        v = stack.pop()
        for p in parents[v]:
            if p not in seen:
                seen.add(p)
                stack.append(p)
    return seen


def _children_lists(g: HierGraph):
    parents = g.parents()
    kids = [[] for _ in parents]
    for v, ps in enumerate(parents):
        for p in ps:
            kids[p].append(v)
    return kids


def dsep_ids(g: HierGraph, A, B, Z) -> bool:
    """d-separation over flat node ids by reachability ("Bayes ball")."""
    A, B, Z = set(A), set(B), set(Z)
    if not A or not B:
        return True
    parents = g.parents()
    children = _children_lists(g)
    anc_z = _ancestors(g, Z)
    # states: (node, arrived_from_child)
    queue = deque((a, True) for a in A)
    visited = set()
    while queue:
        v, from_child = queue.popleft()
        if (v, from_child) in visited:
            continue
        visited.add((v, from_child))
        if v not in Z and v in B:
            return False
        if from_child:
            if v in Z:
                continue
            queue.extend((p, True) for p in parents[v])
            queue.extend((c, False) for c in children[v])
        else:
            if v not in Z:
                queue.extend((c, False) for c in children[v])
            if v in anc_z:
                queue.extend((p, True) for p in parents[v])
    return True


def _check_query(g, S, T, Z=()):
    S, T, Z = set(S), set(T), set(Z)
    if S & T:
        raise ArgumentError(f"S and T overlap: {sorted(S & T)}")
    for j in S | T:
        if not 0 <= j < g.num_measured:
            raise UnknownNodeError(f"no measured variable {j}")
    return S, T, Z


def is_dsep(g: HierGraph, S, T, Z=()) -> bool:
    S, T, Z = _check_query(g, S, T, Z)
    return dsep_ids(g, _measured_ids(g, S), _measured_ids(g, T), _latent_ids(g, Z))


def min_dsep_size(g: HierGraph, S, T) -> int:
    """Min latent vertex cut between S and T in the moral graph of An(S u T)."""
    S, T, _ = _check_query(g, S, T)
    if not S or not T:
        return 0
    s_ids, t_ids = _measured_ids(g, S), _measured_ids(g, T)
    anc = _ancestors(g, s_ids | t_ids)
    parents = g.parents()

    moral = set()
    for v in anc:
        ps = [p for p in parents[v] if p in anc]
        for p in ps:
            moral.add((p, v))
        for a, b in itertools.combinations(ps, 2):
            moral.add((a, b))

    flow = nx.DiGraph()
    for v in anc:
        if g.is_latent_id(v):
            flow.add_edge(("in", v), ("out", v), capacity=1)
        else:
            flow.add_edge(("in", v), ("out", v))  # no capacity attr = infinite
    for a, b in moral:
        flow.add_edge(("out", a), ("in", b))
        flow.add_edge(("out", b), ("in", a))
    for s in s_ids:
        flow.add_edge("source", ("in", s))
    for t in t_ids:
        flow.add_edge(("out", t), "sink")
    return int(nx.maximum_flow_value(flow, "source", "sink"))


def min_dsep_size_brute(g: HierGraph, S, T) -> int:
    """Same contract as :func:`min_dsep_size`, by subset enumeration."""
    if g.num_latents > BRUTE_FORCE_LATENT_CAP:
        raise RefusalError(
            f"{g.num_latents} latents exceeds brute-force cap {BRUTE_FORCE_LATENT_CAP}")
    S, T, _ = _check_query(g, S, T)
    if not S or not T:
        return 0
    s_ids, t_ids = _measured_ids(g, S), _measured_ids(g, T)
    latents = range(g.num_latents)
    for size in range(g.num_latents + 1):
        for Z in itertools.combinations(latents, size):
            if dsep_ids(g, s_ids, t_ids, Z):
                return size
    raise AssertionError("unreachable: conditioning on every latent separates")


def latent_min_sep_size(g: HierGraph, ZX, ZY) -> int:
    """r between two latent sets, by enumeration.

    A latent placed in the separator stops acting as an endpoint, so the
    answer never exceeds ``min(|ZX|, |ZY|)``.
    """
    zx, zy = _latent_ids(g, ZX), _latent_ids(g, ZY)
    if zx & zy:
        raise ArgumentError("latent sets overlap")
    for size in range(g.num_latents + 1):
        for Z in itertools.combinations(range(g.num_latents), size):
            Z = set(Z)
            if dsep_ids(g, zx - Z, zy - Z, Z):
                return size
    raise AssertionError("unreachable")


def pure_descendants(g: HierGraph, latents) -> frozenset:
    """Measured variables every one of whose root-to-node paths meets ``latents``."""
    ids = _latent_ids(g, latents)
    children = _children_lists(g)
    parents = g.parents()

    def reach(starts, blocked):
        seen = set()
        stack = [v for v in starts if v not in blocked]
        while stack:
            v = stack.pop()
            if v in seen:
                continue
            seen.add(v)
            stack.extend(c for c in children[v] if c not in blocked)
        return seen

    below = reach(ids, set()) - set(ids)
    roots = [v for v in range(g.num_nodes) if not parents[v]]
    bypass = reach(roots, set(ids))
    return frozenset(v - g.num_latents for v in below - bypass
                     if not g.is_latent_id(v))


class ExactOracle:
    """RankOracle backed by a known graph.  Answers are cached."""

    capped = False

    def __init__(self, g: HierGraph):
        self.graph = g
        self._cache: dict = {}

    def query(self, S, T) -> int:
        key = (frozenset(S), frozenset(T))
        if key not in self._cache:
            self._cache[key] = min_dsep_size(self.graph, *key)
        return self._cache[key]
