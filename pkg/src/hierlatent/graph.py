"""Layered latent graphs in block form, Condition-1 checks and SHD/F1 scoring.

A :class:`HierGraph` stores the latent hierarchy as a stack of binary blocks,
top layer first.  ``blocks[i]`` connects layer ``i`` (rows) to layer ``i + 1``
(columns); the last block connects the bottom latent layer to the measured
variables.  Cross-layer edges and edges out of measured variables cannot be
expressed, so the equal-path-length half of Condition 1 holds by
construction.

Nodes are addressed as ``(layer, index)`` for latents and ``("x", j)`` for
measured variables.  Some routines (d-separation, adjacency dumps) use a flat
integer id instead: latents in layer order, then the measured variables.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (FeasibilityError, IncomparableError, ParseError,
                     StructuralError, UnknownNodeError)

GRAPH_FORMAT_VERSION = 1
MEASURED = "x"

# Refuse relabeling searches whose cost table would exceed this many entries.
_MAX_PERM_WORK = 50_000_000


def _as_block(b) -> np.ndarray:
    arr = np.array(b, dtype=np.int64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 0)
    if arr.ndim != 2:
        raise StructuralError(f"block must be 2-D, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise StructuralError("block entries must be 0 or 1")
    out = arr.astype(np.uint8)
    out.setflags(write=False)
    return out


class HierGraph:
    """Immutable latent hierarchy in block form."""

    __slots__ = ("num_measured", "layer_sizes", "blocks", "_parents")

    def __init__(self, num_measured: int, layer_sizes: Sequence[int],
                 blocks: Sequence):
        num_measured = int(num_measured)
        layer_sizes = tuple(int(k) for k in layer_sizes)
        if num_measured < 1:
            raise StructuralError("num_measured must be positive")
        if any(k < 1 for k in layer_sizes):
            raise StructuralError(f"layer sizes must be positive: {layer_sizes}")
        if len(blocks) != len(layer_sizes):
            raise StructuralError(
                f"{len(layer_sizes)} layers need {len(layer_sizes)} blocks, "
                f"got {len(blocks)}")
        blocks = tuple(_as_block(b) for b in blocks)
        below = layer_sizes[1:] + (num_measured,)
        for i, (b, rows, cols) in enumerate(zip(blocks, layer_sizes, below)):
            if b.shape != (rows, cols):
                raise StructuralError(
                    f"block {i} has shape {b.shape}, expected {(rows, cols)}")
        object.__setattr__(self, "num_measured", num_measured)
        object.__setattr__(self, "layer_sizes", layer_sizes)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "_parents", None)

    def __setattr__(self, name, value):
        raise AttributeError("HierGraph is immutable")

    # ------------------------------------------------------------------ basics
    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes)

    @property
    def num_latents(self) -> int:
        return sum(self.layer_sizes)

    @property
    def num_nodes(self) -> int:
        return self.num_latents + self.num_measured

    def num_edges(self) -> int:
        return int(sum(int(b.sum()) for b in self.blocks))

    def __eq__(self, other):
        if not isinstance(other, HierGraph):
            return NotImplemented
        return (self.num_measured == other.num_measured
                and self.layer_sizes == other.layer_sizes
                and all(np.array_equal(a, b)
                        for a, b in zip(self.blocks, other.blocks)))

    def __hash__(self):
        return hash(self.digest())

    def __repr__(self):
        return (f"HierGraph(num_measured={self.num_measured}, "
                f"layer_sizes={list(self.layer_sizes)}, edges={self.num_edges()})")

    def to_dict(self) -> dict:
        return {
            "format_version": GRAPH_FORMAT_VERSION,
            "num_measured": self.num_measured,
            "layer_sizes": list(self.layer_sizes),
            "blocks": [b.astype(int).tolist() for b in self.blocks],
        }

    def digest(self) -> str:
        """sha256 of the canonical JSON encoding."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    # ------------------------------------------------------------- node ids
    def layer_offset(self, layer: int) -> int:
        return sum(self.layer_sizes[:layer])

    def latent_id(self, layer: int, index: int) -> int:
        self._check_latent(layer, index)
        return self.layer_offset(layer) + index

    def measured_id(self, j: int) -> int:
        if not 0 <= j < self.num_measured:
            raise UnknownNodeError(f"no measured variable {j}")
        return self.num_latents + j

    def node_of(self, node_id: int):
        """Inverse of :meth:`latent_id` / :meth:`measured_id`."""
        if node_id >= self.num_latents:
            return (MEASURED, node_id - self.num_latents)
        for layer, k in enumerate(self.layer_sizes):
            if node_id < k:
                return (layer, node_id)
            node_id -= k
        raise UnknownNodeError(node_id)

    def is_latent_id(self, node_id: int) -> bool:
        return node_id < self.num_latents

    def _check_latent(self, layer, index):
        if not (isinstance(layer, (int, np.integer)) and 0 <= layer < self.num_layers
                and 0 <= index < self.layer_sizes[layer]):
            raise UnknownNodeError(f"no latent ({layer}, {index})")

    def adjacency(self) -> np.ndarray:
        """Full binary adjacency over flat node ids (parent row, child column)."""
        n = self.num_nodes
        adj = np.zeros((n, n), dtype=np.uint8)
        for layer, b in enumerate(self.blocks):
            r0 = self.layer_offset(layer)
            c0 = self.layer_offset(layer + 1) if layer + 1 < self.num_layers else self.num_latents
            adj[r0:r0 + b.shape[0], c0:c0 + b.shape[1]] = b
        return adj

    def parents(self) -> list[list[int]]:
        """Parent lists by flat node id (cached)."""
        if self._parents is None:
            adj = self.adjacency()
            object.__setattr__(self, "_parents",
                               [list(np.flatnonzero(adj[:, v])) for v in range(len(adj))])
        return self._parents

    def children(self, node) -> list:
        """Children of ``(layer, i)`` as indices into the next layer (or measured)."""
        layer, i = node
        self._check_latent(layer, i)
        return [int(j) for j in np.flatnonzero(self.blocks[layer][i])]

    def edges(self) -> set[tuple[int, int]]:
        adj = self.adjacency()
        return {(int(a), int(b)) for a, b in zip(*np.nonzero(adj))}


# --------------------------------------------------------------------------
# Condition 1
# --------------------------------------------------------------------------

def pure_child_counts(block: np.ndarray) -> np.ndarray:
    """Per-row count of children whose only parent is that row.

    Evaluates ``|| M_i * prod_{j != i}(1 - M_j) ||_1`` for binary ``M``.
    """
    m = np.asarray(block, dtype=np.int64)
    in_degree = m.sum(axis=0)
    return (m * (in_degree == 1)).sum(axis=1)


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple = ()


def validate_condition1(g: HierGraph) -> ValidationReport:
    """Check that every latent with a child has at least two pure children."""
    bad = []
    for layer, block in enumerate(g.blocks):
        counts = pure_child_counts(block)
        nonzero = block.sum(axis=1) > 0
        for i in np.flatnonzero(nonzero & (counts < 2)):
            bad.append((layer, int(i)))
    return ValidationReport(ok=not bad, violations=tuple(bad))


def pure_children(g: HierGraph, node) -> frozenset:
    layer, i = node
    g._check_latent(layer, i)
    block = g.blocks[layer]
    single = block.sum(axis=0) == 1
    return frozenset(int(j) for j in np.flatnonzero(block[i].astype(bool) & single))


# --------------------------------------------------------------------------
# Random graphs
# --------------------------------------------------------------------------

def random_graph(num_measured: int, num_layers: int, seed, extra_edge_prob: float = 0.3) -> HierGraph:
    """Draw a Condition-1 graph: two dedicated pure children per latent, then
    each remaining (parent, child) slot gets an edge with ``extra_edge_prob``."""
    if num_measured < 4 or num_layers < 1:
        raise FeasibilityError("need num_measured >= 4 and num_layers >= 1")
    if num_measured < 2 ** num_layers:
        raise FeasibilityError(
            f"{num_layers} layers need at least {2 ** num_layers} measured variables")
    rng = np.random.default_rng(seed)

    # sizes bottom-up: layer l (1 = bottom) needs at least 2^(L-l) latents
    sizes_up = []
    below = num_measured
    for level in range(1, num_layers + 1):
        lo = 2 ** (num_layers - level)
        hi = below // 2
        k = int(rng.integers(lo, hi + 1))
        sizes_up.append(k)
        below = k
    layer_sizes = sizes_up[::-1]

    blocks = []
    children_sizes = layer_sizes[1:] + [num_measured]
    for rows, cols in zip(layer_sizes, children_sizes):
        block = np.zeros((rows, cols), dtype=np.uint8)
        order = rng.permutation(cols)
        dedicated = order[:2 * rows]
        for i in range(rows):
            block[i, dedicated[2 * i:2 * i + 2]] = 1
        rest = np.sort(order[2 * rows:])
        if rest.size:
            block[:, rest] = rng.random((rows, rest.size)) < extra_edge_prob
        blocks.append(block)
    return HierGraph(num_measured, layer_sizes, blocks)


# --------------------------------------------------------------------------
# Relabeling and scoring
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Relabeling:
    """Per-layer latent permutations.

    After relabeling, latent ``i`` of layer ``l`` is the old latent
    ``perms[l][i]``.  Measured variables are never moved.
    """
    perms: tuple

    def __post_init__(self):
        perms = tuple(tuple(int(v) for v in p) for p in self.perms)
        for p in perms:
            if sorted(p) != list(range(len(p))):
                raise StructuralError(f"not a permutation: {p}")
        object.__setattr__(self, "perms", perms)

    @classmethod
    def identity(cls, layer_sizes):
        return cls(tuple(tuple(range(k)) for k in layer_sizes))

    def inverse(self) -> "Relabeling":
        return Relabeling(tuple(tuple(int(v) for v in np.argsort(p)) for p in self.perms))

    def apply(self, g: HierGraph) -> HierGraph:
        if tuple(len(p) for p in self.perms) != g.layer_sizes:
            raise StructuralError("relabeling does not match layer sizes")
        blocks = []
        for layer, b in enumerate(g.blocks):
            rows = list(self.perms[layer])
            b = b[rows]
            if layer + 1 < g.num_layers:
                b = b[:, list(self.perms[layer + 1])]
            blocks.append(b)
        return HierGraph(g.num_measured, g.layer_sizes, blocks)

    def to_dict(self):
        return {"perms": [list(p) for p in self.perms]}


@dataclass(frozen=True)
class Metrics:
    shd: int
    f1: float
    best_relabeling: Relabeling
    wall_time_seconds: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        return {"shd": self.shd, "f1": self.f1,
                "best_relabeling": self.best_relabeling.to_dict(),
                "wall_time_seconds": self.wall_time_seconds}


def pad_to(g: HierGraph, layer_sizes: Sequence[int]) -> HierGraph:
    """Embed ``g`` into larger layers, aligned at the bottom, using empty latents.

    Padded layers sit above the existing ones; padded latents have no edges.
    """
    layer_sizes = list(layer_sizes)
    extra = len(layer_sizes) - g.num_layers
    if extra < 0 or any(a < b for a, b in zip(layer_sizes[extra:], g.layer_sizes)):
        raise StructuralError("cannot pad to smaller layers")
    old_sizes = [0] * extra + list(g.layer_sizes)
    old_blocks = [None] * extra + list(g.blocks)
    below = layer_sizes[1:] + [g.num_measured]
    old_below = old_sizes[1:] + [g.num_measured]
    blocks = []
    for size, cols, old_rows, old_cols, b in zip(layer_sizes, below, old_sizes,
                                                 old_below, old_blocks):
        nb = np.zeros((size, cols), dtype=np.uint8)
        if b is not None:
            nb[:old_rows, :old_cols] = b
        blocks.append(nb)
    # padded layers must still be non-empty for HierGraph; sizes come from the
    # union, so they are >= 1 whenever either input has a latent there.
    return HierGraph(g.num_measured, layer_sizes, blocks)


def _common_sizes(a: HierGraph, b: HierGraph) -> list[int]:
    n = max(a.num_layers, b.num_layers)
    sa = [0] * (n - a.num_layers) + list(a.layer_sizes)
    sb = [0] * (n - b.num_layers) + list(b.layer_sizes)
    return [max(x, y) for x, y in zip(sa, sb)]


def best_perm_shd_f1(truth: HierGraph, est: HierGraph) -> Metrics:
    """Minimum SHD over within-layer latent relabelings of ``est``.

    Layers are aligned at the measured variables; the smaller graph is padded
    with edgeless latents.  The coupling between adjacent layers is a chain,
    so the exact minimum is found by dynamic programming over per-layer
    permutations.  F1 is reported for the SHD-minimizing relabeling.
    """
    start = time.perf_counter()
    if truth.num_measured != est.num_measured:
        raise IncomparableError(
            f"measured counts differ: {truth.num_measured} vs {est.num_measured}")
    sizes = _common_sizes(truth, est)
    t = pad_to(truth, sizes)
    e = pad_to(est, sizes)
    L = len(sizes)
    if L == 0:
        return Metrics(0, 1.0, Relabeling(()), time.perf_counter() - start)

    perms = [list(itertools.permutations(range(k))) for k in sizes]
    for l in range(L - 1):
        if len(perms[l]) * len(perms[l + 1]) * sizes[l] * sizes[l + 1] > _MAX_PERM_WORK:
            raise IncomparableError("too many latents for exhaustive relabeling")

    # cost[l][a, b]: mismatches in block l with row perm a and column perm b
    best = np.zeros(len(perms[0]))
    back = []
    for l in range(L - 1):
        T = t.blocks[l].astype(np.int64)
        E = e.blocks[l].astype(np.int64)
        rows = np.array(perms[l])
        cols = np.array(perms[l + 1])
        # E_perm[a, b] = E[rows[a]][:, cols[b]]
        Er = E[rows]                      # (A, r, c)
        Erc = Er[:, :, cols]              # (A, r, B, c)
        cost = np.abs(Erc - T[None, :, None, :]).sum(axis=(1, 3))  # (A, B)
        total = best[:, None] + cost
        arg = np.argmin(total, axis=0)
        back.append(arg)
        best = total[arg, np.arange(total.shape[1])]
    T = t.blocks[-1].astype(np.int64)
    E = e.blocks[-1].astype(np.int64)
    rows = np.array(perms[-1])
    bottom = np.abs(E[rows] - T[None]).sum(axis=(1, 2))
    total = best + bottom
    idx = int(np.argmin(total))
    shd = int(total[idx])

    chosen = [idx]
    for arg in reversed(back):
        chosen.append(int(arg[chosen[-1]]))
    chosen.reverse()
    relabeling = Relabeling(tuple(perms[l][chosen[l]] for l in range(L)))

    e_best = relabeling.apply(e)
    tp = sum(int((tb & eb).sum()) for tb, eb in zip(t.blocks, e_best.blocks))
    n_t, n_e = t.num_edges(), e.num_edges()
    if n_t + n_e == 0:
        f1 = 1.0
    else:
        f1 = 2.0 * tp / (n_t + n_e)
    return Metrics(shd, f1, relabeling, time.perf_counter() - start)


# --------------------------------------------------------------------------
# Graph files
# --------------------------------------------------------------------------

def graph_from_dict(doc: dict) -> HierGraph:
    if not isinstance(doc, dict):
        raise ParseError("graph document must be an object")
    missing = {"format_version", "num_measured", "layer_sizes", "blocks"} - set(doc)
    if missing:
        raise ParseError(f"graph document missing fields: {sorted(missing)}")
    if doc["format_version"] != GRAPH_FORMAT_VERSION:
        raise ParseError(f"unsupported graph format_version {doc['format_version']!r}")
    try:
        return HierGraph(doc["num_measured"], doc["layer_sizes"], doc["blocks"])
    except (StructuralError, TypeError, ValueError) as exc:
        raise ParseError(f"invalid graph: {exc}") from exc


def write_graph(g: HierGraph, path) -> None:
    Path(path).write_text(json.dumps(g.to_dict(), indent=1, sort_keys=True) + "\n")


def read_graph(path) -> HierGraph:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"not valid JSON: {exc.msg}", line=exc.lineno) from exc
    return graph_from_dict(doc)


def from_edge_list(num_measured: int, layer_sizes: Sequence[int], edges) -> HierGraph:
    """Build from ``((layer, i), child)`` pairs; ``child`` indexes the next layer."""
    blocks = [np.zeros((k, c), dtype=np.uint8)
              for k, c in zip(layer_sizes, list(layer_sizes[1:]) + [num_measured])]
    for (layer, i), child in edges:
        blocks[layer][i, child] = 1
    return HierGraph(num_measured, layer_sizes, blocks)
