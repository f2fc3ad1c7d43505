"""Rebuild a latent hierarchy from rank queries alone.

Works one level at a time, bottom up.  At each level the active nodes are
either measured variables or latents discovered one level below; a latent
is represented in queries by a *surrogate*, a small set of its pure measured
descendants.  Each level runs three steps:

1. isolated nodes: ``r({c}, rest) = 0`` means ``c`` has no parent;
2. pure-child clusters: every small subset ``T`` of a cluster is separated
   from the remaining active nodes by a single latent;
3. multi-parent children: the smallest set of clusters ``P`` such that
   adding the child to any transversal of ``P`` leaves the rank unchanged.

Each cluster becomes a new latent.  The loop stops once at most one active
non-isolated node is left.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ModelViolationError, OracleInconsistencyError, QueryBudgetExceeded
from .graph import HierGraph

DEFAULT_SUBSET_CAP = 4
DEFAULT_QUERY_BUDGET = 20_000


# --------------------------------------------------------------------------
# Trace
# --------------------------------------------------------------------------

def node_label(v) -> str:
    """``("x", 3)`` -> ``"x3"``; latent ``(2, 1)`` -> ``"L2.1"``."""
    if isinstance(v, tuple) and len(v) == 2:
        head, k = v
        return f"x{k}" if head == "x" else f"L{head}.{k}"
    return str(v)


@dataclass
class RecoveryTrace:
    """Every oracle query in issue order, the decisions they support and
    the surrogate map of each level."""
    queries: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    surrogates: list = field(default_factory=list)

    def log_query(self, S, T, answer: int, purpose: str) -> int:
        self.queries.append({"id": len(self.queries), "S": sorted(S), "T": sorted(T),
                             "answer": int(answer), "purpose": purpose})
        return len(self.queries) - 1

    def log_decision(self, level: int, action: str, nodes, queries, **extra):
        entry = {"level": level, "action": action, "nodes": [node_label(v) for v in nodes],
                 "queries": list(queries)}
        entry.update(extra)
        self.decisions.append(entry)

    def log_surrogates(self, level: int, surrogates: "SurrogateMap"):
        self.surrogates.append({"level": level, "map": surrogates.to_dict()})

    def lines(self):
        """One JSON object per line: queries, then decisions, then surrogate maps."""
        for q in self.queries:
            yield json.dumps({"kind": "query", **q}, sort_keys=True)
        for d in self.decisions:
            yield json.dumps({"kind": "decision", **d}, sort_keys=True)
        for s in self.surrogates:
            yield json.dumps({"kind": "surrogates", **s}, sort_keys=True)

    def write(self, path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines()))

    @classmethod
    def read(cls, path) -> "RecoveryTrace":
        trace = cls()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            kind = entry.pop("kind")
            {"query": trace.queries, "decision": trace.decisions,
             "surrogates": trace.surrogates}[kind].append(entry)
        return trace


class SurrogateMap(dict):
    """Active node label -> frozenset of measured indices standing in for it."""

    def union(self, nodes) -> frozenset:
        out = frozenset()
        for v in nodes:
            out |= self[v]
        return out

    def to_dict(self) -> dict:
        return {node_label(k): sorted(v) for k, v in self.items()}


class _Session:
    """Oracle wrapper that logs, counts and optionally checks symmetry."""

    def __init__(self, oracle, trace: RecoveryTrace, budget: int, check_symmetry: bool):
        self.oracle = oracle
        self.trace = trace
        self.budget = budget
        self.check_symmetry = check_symmetry

    def _ask(self, S, T, purpose):
        if len(self.trace.queries) >= self.budget:
            raise QueryBudgetExceeded(self.budget, self.trace)
        answer = int(self.oracle.query(S, T))
        return answer, self.trace.log_query(S, T, answer, purpose)

    def query(self, S, T, purpose: str):
        S, T = frozenset(S), frozenset(T)
        if S & T:
            raise ValueError(f"overlapping query sets {sorted(S)} / {sorted(T)}")
        answer, qid = self._ask(S, T, purpose)
        if self.check_symmetry:
            mirrored, mid = self._ask(T, S, purpose + ":mirror")
            if mirrored != answer:
                raise OracleInconsistencyError((sorted(S), sorted(T)),
                                               (sorted(T), sorted(S)), (answer, mirrored))
            return answer, [qid, mid]
        return answer, [qid]


def _session(oracle, trace, budget, check_symmetry):
    if isinstance(oracle, _Session):
        return oracle
    return _Session(oracle, trace if trace is not None else RecoveryTrace(),
                    budget, check_symmetry)


# --------------------------------------------------------------------------
# The three steps
# --------------------------------------------------------------------------

def find_isolated(oracle, surrogates: SurrogateMap, level: int = 0, *, trace=None,
                  budget: int = DEFAULT_QUERY_BUDGET, check_symmetry: bool = False) -> set:
    """Active nodes with no parent: those separated from the rest by nothing."""
    sess = _session(oracle, trace, budget, check_symmetry)
    nodes = list(surrogates)
    if len(nodes) < 2:
        return set(nodes)
    isolated = set()
    for c in nodes:
        rest = [v for v in nodes if v != c]
        r, qids = sess.query(surrogates[c], surrogates.union(rest), "isolated")
        if r == 0:
            isolated.add(c)
            sess.trace.log_decision(level, "isolated", [c], qids)
    return isolated


def _subsets_with(member, others, cap):
    """Subsets of ``others + [member]`` that contain ``member``, sizes 2..cap."""
    for k in range(1, min(cap, len(others) + 1)):
        for combo in itertools.combinations(others, k):
            yield (*combo, member)


def cluster_pure_children(oracle, surrogates: SurrogateMap, level: int = 0, *,
                          subset_cap: int = DEFAULT_SUBSET_CAP, trace=None,
                          budget: int = DEFAULT_QUERY_BUDGET,
                          check_symmetry: bool = False):
    """Split the (non-isolated) active nodes into pure-child clusters.

    A set passes when each of its subsets ``T`` with ``2 <= |T| <= subset_cap``
    has ``r(T, rest) <= 1``.  Clusters grow greedily and every addition is
    re-verified against all new subsets.  Returns ``(clusters, leftover)``
    where clusters are tuples in discovery order.
    """
    if subset_cap < 2:
        raise ValueError("subset_cap must be at least 2")
    sess = _session(oracle, trace, budget, check_symmetry)
    nodes = list(surrogates)
    answers: dict = {}

    def passes(T):
        T = frozenset(T)
        if T not in answers:
            rest = [v for v in nodes if v not in T]
            r, qids = sess.query(surrogates.union(T), surrogates.union(rest), "cluster")
            answers[T] = (r <= 1, qids)
        return answers[T]

    assigned = set()
    clusters, leftover = [], []
    for a in nodes:
        if a in assigned:
            continue
        cluster, cited = [a], []
        for b in nodes:
            if b in assigned or b in cluster:
                continue
            ok, cite = True, []
            for T in _subsets_with(b, cluster, subset_cap):
                good, qids = passes(T)
                cite.extend(qids)
                if not good:
                    ok = False
                    break
            if ok:
                cluster.append(b)
                cited.extend(cite)
        if len(cluster) >= 2:
            clusters.append(tuple(cluster))
            assigned.update(cluster)
            sess.trace.log_decision(level, "cluster", list(cluster), sorted(set(cited)))
        else:
            leftover.append(a)
    return clusters, leftover


def assign_multi_parents(oracle, c, clusters, surrogates: SurrogateMap, level: int = 0, *,
                         trace=None, budget: int = DEFAULT_QUERY_BUDGET,
                         check_symmetry: bool = False) -> tuple:
    """Indices of the clusters whose latents are the parents of ``c``.

    Candidates are tried by ascending size.  ``P`` is accepted when for every
    transversal ``S`` of its clusters ``r(S, X - S - c) = r(S + c, X - S - c)``,
    with ``X`` every clustered node plus the leftovers.  When no proper subset
    works, every cluster is a parent.
    """
    sess = _session(oracle, trace, budget, check_symmetry)
    everyone = [v for v in surrogates]
    m = len(clusters)
    if m == 0:
        raise ModelViolationError(f"node {c!r} has parents but no pure-child cluster exists")

    def accepts(P):
        cited = []
        for S in itertools.product(*(clusters[i] for i in P)):
            rest = [v for v in everyone if v not in S and v != c]
            T = surrogates.union(rest)
            r_without, q1 = sess.query(surrogates.union(S), T, "parents")
            r_with, q2 = sess.query(surrogates.union(S) | surrogates[c], T, "parents")
            cited.extend(q1 + q2)
            if r_without != r_with:
                return False, cited
        return True, cited

    cited = []
    for size in range(1, m + 1):
        for P in itertools.combinations(range(m), size):
            ok, cited = accepts(P)
            if ok:
                sess.trace.log_decision(level, "parents", [c], cited, parents=list(P))
                return P
    if m >= 2:
        # every proper subset failed, which by itself implies all clusters
        sess.trace.log_decision(level, "parents-fallback", [c], cited,
                                parents=list(range(m)))
        return tuple(range(m))
    raise ModelViolationError(f"no parent set explains node {c!r}")


@dataclass(frozen=True)
class LayerResult:
    """One recovered level: ``children[k]`` lists the active nodes under new latent k."""
    isolated: frozenset
    children: tuple
    surrogates: SurrogateMap


def recover_layer(oracle, surrogates: SurrogateMap, level: int = 0, *,
                  subset_cap: int = DEFAULT_SUBSET_CAP, trace=None,
                  budget: int = DEFAULT_QUERY_BUDGET, check_symmetry: bool = False,
                  isolated=None) -> LayerResult:
    """Isolated nodes, clusters and multi-parent assignments for one level.

    The surrogate of each new latent is the union of the surrogates of the
    first two members of its cluster.
    """
    sess = _session(oracle, trace, budget, check_symmetry)
    if isolated is None:
        isolated = find_isolated(sess, surrogates, level)
    active = SurrogateMap((v, s) for v, s in surrogates.items() if v not in isolated)
    clusters, leftover = cluster_pure_children(sess, active, level, subset_cap=subset_cap)
    children = [list(cl) for cl in clusters]
    for c in leftover:
        for i in assign_multi_parents(sess, c, clusters, active, level):
            children[i].append(c)
    upper = SurrogateMap()
    for k, cl in enumerate(clusters):
        upper[(level + 1, k)] = active[cl[0]] | active[cl[1]]
    return LayerResult(frozenset(isolated), tuple(tuple(ch) for ch in children), upper)


def recover_full(oracle, num_measured: int, *, subset_cap: int = DEFAULT_SUBSET_CAP,
                 budget: int = DEFAULT_QUERY_BUDGET, check_symmetry: bool = False,
                 trace: RecoveryTrace | None = None):
    """Recover the whole hierarchy.  Returns ``(HierGraph, RecoveryTrace)``.

    Pass ``trace`` to keep the partial log when recovery raises.

    Active nodes are labelled ``("x", j)`` for measured variables and
    ``(level, k)`` for the k-th latent found at ``level`` (1 = parents of the
    measured variables).
    """
    trace = RecoveryTrace() if trace is None else trace
    sess = _Session(oracle, trace, budget, check_symmetry)
    surrogates = SurrogateMap((("x", j), frozenset([j])) for j in range(num_measured))
    levels = []        # (ordered node labels of the level below, children per new latent)
    level = 0
    while True:
        trace.log_surrogates(level, surrogates)
        isolated = find_isolated(sess, surrogates, level)
        if len(surrogates) - len(isolated) <= 1:
            break
        result = recover_layer(sess, surrogates, level, subset_cap=subset_cap,
                               isolated=isolated)
        if not result.children:
            raise ModelViolationError(f"level {level}: no pure-child cluster found")
        levels.append((list(surrogates), result.children))
        surrogates = result.surrogates
        level += 1
    return _assemble(num_measured, levels), trace


def _assemble(num_measured: int, levels) -> HierGraph:
    """Turn per-level child lists into top-first blocks."""
    blocks = []
    for below, children in levels:
        index = {v: j for j, v in enumerate(below)}
        block = np.zeros((len(children), len(below)), dtype=np.uint8)
        for k, ch in enumerate(children):
            block[k, [index[v] for v in ch]] = 1
        blocks.append(block)
    blocks.reverse()
    return HierGraph(num_measured, [b.shape[0] for b in blocks], blocks)
