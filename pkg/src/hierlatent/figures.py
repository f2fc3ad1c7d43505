"""Ground-truth graphs used by the synthetic benchmarks.

Measured variable ``x_k`` of the drawings is measured index ``k - 1``.
Latents are numbered top layer first, left to right, so e.g. in ``fig5a``
``z1 = (0, 0)``, ``z2 = (1, 0)`` and ``z3 = (1, 1)``.
"""
from .graph import HierGraph, from_edge_list


def _build(num_measured, layer_sizes, edges):
    return from_edge_list(num_measured, layer_sizes, edges)


def fig5a() -> HierGraph:
    """Binary tree: z1 -> z2, z3; each with two measured children."""
    return _build(4, [1, 2], [
        ((0, 0), 0), ((0, 0), 1),
        ((1, 0), 0), ((1, 0), 1),
        ((1, 1), 2), ((1, 1), 3),
    ])


def fig5b() -> HierGraph:
    """Tree with a three-way split at the root."""
    return _build(6, [1, 3], [
        ((0, 0), 0), ((0, 0), 1), ((0, 0), 2),
        ((1, 0), 0), ((1, 0), 1),
        ((1, 1), 2), ((1, 1), 3),
        ((1, 2), 4), ((1, 2), 5),
    ])


def fig5c() -> HierGraph:
    """v-structure: x3 is a child of both z2 and z3."""
    return _build(5, [1, 2], [
        ((0, 0), 0), ((0, 0), 1),
        ((1, 0), 0), ((1, 0), 1), ((1, 0), 2),
        ((1, 1), 2), ((1, 1), 3), ((1, 1), 4),
    ])


def fig5d() -> HierGraph:
    """v-structure with a parentless z4 and x7 having three parents."""
    return _build(7, [1, 3], [
        ((0, 0), 0), ((0, 0), 1),
        ((1, 0), 0), ((1, 0), 1), ((1, 0), 6),
        ((1, 1), 2), ((1, 1), 3), ((1, 1), 6),
        ((1, 2), 4), ((1, 2), 5), ((1, 2), 6),
    ])


def fig2() -> HierGraph:
    """Three-layer running example (13 measured, x11 has parents z8 and z9)."""
    return _build(13, [1, 2, 6], [
        ((0, 0), 0), ((0, 0), 1),
        # z2 -> z4, z5, z6 ; z3 -> z6, z7, z8
        ((1, 0), 0), ((1, 0), 1), ((1, 0), 2),
        ((1, 1), 2), ((1, 1), 3), ((1, 1), 4),
        # z4..z9 -> measured
        ((2, 0), 0), ((2, 0), 1),
        ((2, 1), 2), ((2, 1), 3),
        ((2, 2), 4), ((2, 2), 5),
        ((2, 3), 6), ((2, 3), 7),
        ((2, 4), 8), ((2, 4), 9), ((2, 4), 10),
        ((2, 5), 11), ((2, 5), 12), ((2, 5), 10),
    ])


BUILTINS = {
    "fig5a": fig5a,
    "fig5b": fig5b,
    "fig5c": fig5c,
    "fig5d": fig5d,
    "fig2": fig2,
}


def builtin(name: str) -> HierGraph:
    try:
        return BUILTINS[name]()
    except KeyError:
        raise KeyError(f"unknown builtin graph {name!r}; choose from {sorted(BUILTINS)}") from None
