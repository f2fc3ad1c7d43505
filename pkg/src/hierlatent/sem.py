"""Synthetic data from a latent hierarchy.

Every node is ``act(sum_p w_p * parent_p + eps)`` with
``eps ~ Uniform[-alpha, alpha]``; nodes without parents reduce to
``act(eps)``.  Edge weights have magnitude in ``[weight_low, weight_high]``
with a random sign, and each node draws its own ``|alpha|`` from
``[alpha_low, alpha_high]``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, StructuralError
from .graph import HierGraph

ACTIVATIONS = {
    "leakyrelu_0.2": lambda v: np.where(v > 0, v, 0.2 * v),
    "tanh": np.tanh,
    "linear": lambda v: v,
}


@dataclass(frozen=True)
class SemSpec:
    activation: str = "leakyrelu_0.2"
    weight_low: float = 2.0
    weight_high: float = 5.0
    alpha_low: float = 1.0
    alpha_high: float = 3.0
    samples: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if not 0 < self.weight_low < self.weight_high:
            raise ValueError("need 0 < weight_low < weight_high")
        # alpha_low == alpha_high == 0 gives a noiseless SEM
        if not 0 <= self.alpha_low <= self.alpha_high:
            raise ValueError("need 0 <= alpha_low <= alpha_high")
        if self.samples < 1:
            raise ValueError("samples must be positive")


@dataclass(frozen=True)
class SemParams:
    """Edge weights per block (zero where there is no edge) and noise widths."""
    weights: tuple
    latent_alpha: tuple
    measured_alpha: np.ndarray


@dataclass(frozen=True, eq=False)
class Dataset:
    values: np.ndarray
    columns: tuple
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise StructuralError("dataset must be 2-D")
        if not np.isfinite(values).all():
            raise StructuralError("dataset contains non-finite values")
        if len(self.columns) != values.shape[1]:
            raise StructuralError("column names do not match the data width")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def num_rows(self) -> int:
        return self.values.shape[0]

    @property
    def num_columns(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.columns == other.columns and np.array_equal(self.values, other.values)


def column_names(n: int) -> tuple:
    return tuple(f"x_{j}" for j in range(n))


def sample_weights(g: HierGraph, spec: SemSpec, rng: np.random.Generator) -> SemParams:
    weights = []
    for block in g.blocks:
        mag = rng.uniform(spec.weight_low, spec.weight_high, size=block.shape)
        sign = rng.choice((-1.0, 1.0), size=block.shape)
        weights.append(mag * sign * block)
    latent_alpha = tuple(rng.uniform(spec.alpha_low, spec.alpha_high, size=k)
                         for k in g.layer_sizes)
    measured_alpha = rng.uniform(spec.alpha_low, spec.alpha_high, size=g.num_measured)
    return SemParams(tuple(weights), latent_alpha, measured_alpha)


def sample_sem(g: HierGraph, spec: SemSpec, return_latents: bool = False):
    """Draw ``spec.samples`` rows of the measured variables.

    With ``return_latents`` also returns the per-layer latent arrays.
    """
    rng = np.random.default_rng(spec.seed)
    params = sample_weights(g, spec, rng)
    act = ACTIVATIONS[spec.activation]
    n = spec.samples

    def noise(alpha):
        return rng.uniform(-1.0, 1.0, size=(n, len(alpha))) * alpha

    latents = []
    above = None
    for layer, k in enumerate(g.layer_sizes):
        pre = noise(params.latent_alpha[layer])
        if above is not None:
            pre = pre + above @ params.weights[layer - 1]
        above = act(pre)
        latents.append(above)
    pre = noise(params.measured_alpha)
    if above is not None:
        pre = pre + above @ params.weights[-1]
    x = act(pre)

    ds = Dataset(x, column_names(g.num_measured), {
        "graph_hash": g.digest(),
        "sem_spec": asdict(spec),
        "seed": spec.seed,
    })
    if return_latents:
        return ds, latents
    return ds


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------

def provenance_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_dataset(ds: Dataset, path, sidecar: bool = True) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(",".join(ds.columns) + "\n")
        for row in ds.values:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")
    if sidecar:
        provenance_path(path).write_text(
            json.dumps(ds.provenance, indent=1, sort_keys=True) + "\n")


def read_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty dataset file", line=1)
    header = [h.strip() for h in rows[0]]
    if not header or header != list(column_names(len(header))):
        raise ParseError(f"header must be x_0,...,x_n-1; got {rows[0]!r}", line=1)
    width = len(header)
    data = np.empty((len(rows) - 1, width))
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise ParseError(f"expected {width} cells, found {len(row)}", line=lineno)
        try:
            data[lineno - 2] = [float(c) for c in row]
        except ValueError as exc:
            raise ParseError(f"non-numeric cell: {exc}", line=lineno) from None
    if data.shape[0] == 0:
        raise ParseError("dataset has a header but no rows", line=2)
    if not np.isfinite(data).all():
        bad = int(np.argwhere(~np.isfinite(data))[0][0]) + 2
        raise ParseError("non-finite value", line=bad)
    meta = provenance_path(path)
    provenance = json.loads(meta.read_text()) if meta.exists() else {}
    return Dataset(data, tuple(header), provenance)
