import numpy as np
import pytest
from hypothesis import strategies as st

from hierlatent.graph import random_graph


def random_instances(count, seed0=0, sizes=range(7, 14), max_layers=3):
    """Deterministic Condition-1 graphs over the requested size range."""
    out = []
    rng = np.random.default_rng(seed0)
    sizes = list(sizes)
    for k in range(count):
        n = int(rng.choice(sizes))
        layers = int(rng.integers(1, max_layers + 1))
        while n < 2 ** layers:
            layers -= 1
        out.append(random_graph(n, layers, seed0 * 1000 + k))
    return out


@st.composite
def hier_graphs(draw, min_measured=4, max_measured=9, max_layers=2):
    n = draw(st.integers(min_measured, max_measured))
    layers = draw(st.integers(1, max_layers))
    while n < 2 ** layers:
        layers -= 1
    seed = draw(st.integers(0, 2 ** 31 - 1))
    return random_graph(n, layers, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    """Record one acceptance line; printed again in the terminal summary."""
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


# ---------------------------------------------------------------- gradient oracle

FD_STEP = 1e-5
FD_FLOOR = 1e-3


def fd_gradient_error(seed, per_tensor=6, epoch=150):
    """Max relative error of the total-loss gradient against central differences.

    Toy instance: 4 measured variables, one latent layer of 2, batch of 8,
    fixed noise.  All mask logits are checked; other tensors are sampled.
    """
    from hierlatent.learner import Noise, TrainConfig, loss_total, new_state

    state = new_state(4, (2,), TrainConfig(), restarts=1, seed=seed)
    x = np.random.default_rng(seed + 100).normal(size=(8, 4))
    noise = Noise.draw([np.random.default_rng(seed + 200)], 8, 4, (2,))
    _, grads = loss_total(x, state, epoch=epoch, noise=noise)
    rng = np.random.default_rng(seed + 300)
    worst = 0.0
    for name, p in state.params.items():
        flat = p.reshape(-1)
        if name.startswith("mask"):
            picks = range(flat.size)
        else:
            picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        for i in picks:
            keep = flat[i]
            flat[i] = keep + FD_STEP
            up = loss_total(x, state, epoch=epoch, noise=noise)[0]["total"]
            flat[i] = keep - FD_STEP
            down = loss_total(x, state, epoch=epoch, noise=noise)[0]["total"]
            flat[i] = keep
            num = (up - down) / (2 * FD_STEP)
            ana = grads[name].reshape(-1)[i]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), FD_FLOOR))
    return worst
