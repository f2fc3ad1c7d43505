"""Differentiable structure learner: a VAE whose decoder is a masked layered SEM.

The encoder maps measured data to a Gaussian over exogenous noise, one
coordinate per latent slot and per measured variable.  The decoder replays
the hierarchy top down: each node is a small MLP of its masked parents and
its own noise.  Edges are binary-Concrete relaxations of per-entry logits.

The objective adds to the negative ELBO

* a Donsker-Varadhan estimate of the dependence between noise coordinates
  (a critic sees joint samples and column-shuffled ones),
* an L1 penalty on ``sigmoid(gamma)``,
* a squared hinge that vanishes when every nonzero mask row has at least
  two pure children, weighted by a schedule that grows every epoch.

All parameters carry a leading restart axis so independent restarts run as
one batched computation; a selected model simply has one restart.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import (ArgumentError, DiagnosticsError, DivergenceError, ParseError,
                     StructuralError)
from .graph import HierGraph
from .sem import Dataset

CHECKPOINT_FORMAT_VERSION = 1
LEAK = 0.2


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 400
    batch_size: int = 32
    temperature: float = 1.0
    lambda1: float = 10.0
    lambda2: float = 1e-4
    # lambda3(epoch) = lambda3_scale * 10 ** (lambda3_log10_start + epoch * lambda3_log10_rate)
    lambda3_scale: float = 1.0
    lambda3_log10_start: float = -3.0
    lambda3_log10_rate: float = 0.01
    restarts: int = 10
    mine_warmup: int = 100
    threshold: float = 0.5
    seed: int = 0
    encoder_hidden: tuple = (64, 32)
    decoder_hidden: int = 32
    critic_hidden: tuple = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "encoder_hidden", tuple(int(h) for h in self.encoder_hidden))
        object.__setattr__(self, "critic_hidden", tuple(int(h) for h in self.critic_hidden))
        for name in ("lr", "temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs", "batch_size", "restarts", "decoder_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lambda1", "lambda2", "lambda3_scale", "mine_warmup"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must be in (0, 1)")
        if len(self.encoder_hidden) != 2 or min(self.encoder_hidden) < 1:
            raise ValueError("encoder_hidden needs two positive widths")
        if len(self.critic_hidden) != 2 or min(self.critic_hidden) < 1:
            raise ValueError("critic_hidden needs two positive widths")

    def lambda3(self, epoch: int) -> float:
        return self.lambda3_scale * 10.0 ** (self.lambda3_log10_start
                                             + epoch * self.lambda3_log10_rate)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in doc:
            if key not in known:
                raise ParseError(f"unknown config key {key!r}")
        try:
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"invalid config: {exc}") from exc


def write_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


def read_config(path) -> TrainConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"not valid JSON: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(doc, dict):
        raise ParseError("config must be a JSON object")
    return TrainConfig.from_dict(doc)


def capacities(num_measured: int) -> list:
    """Latent layer sizes, top first: ``floor(n / 2**i)`` for ``i = L..1``,
    where ``L`` is the first level whose size is at most one."""
    if num_measured < 2:
        raise ArgumentError("need at least two measured variables")
    sizes = []
    i = 1
    while True:
        k = num_measured // 2 ** i
        sizes.append(k)
        if k <= 1:
            break
        i += 1
    return sizes[::-1]


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------

def _layout(num_measured, caps):
    """Node counts per decoder layer (top first) and the noise offsets."""
    sizes = list(caps) + [num_measured]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return sizes, offsets


def noise_dim(num_measured: int, caps) -> int:
    return int(sum(caps) + num_measured)


def _dense(rng, fan_in, fan_out, gain=2.0):
    return rng.normal(0.0, math.sqrt(gain / fan_in), size=(fan_in, fan_out))


def init_params(num_measured: int, caps, cfg: TrainConfig, rng) -> dict:
    """One restart's parameters (no restart axis)."""
    d = noise_dim(num_measured, caps)
    h1, h2 = cfg.encoder_hidden
    H = cfg.decoder_hidden
    c1, c2 = cfg.critic_hidden
    p = {
        "enc.W1": _dense(rng, num_measured, h1), "enc.b1": np.zeros(h1),
        "enc.W2": _dense(rng, h1, h2), "enc.b2": np.zeros(h2),
        "enc.Wmu": _dense(rng, h2, d, 1.0), "enc.bmu": np.zeros(d),
        "enc.Wlv": _dense(rng, h2, d, 0.1), "enc.blv": np.zeros(d),
    }
    sizes, _ = _layout(num_measured, caps)
    for l, m in enumerate(sizes):
        fan_in = 1 + (sizes[l - 1] if l else 0)
        if l:
            k = sizes[l - 1]
            p[f"dec{l}.Wp"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(m, k, H))
            p[f"mask{l - 1}"] = rng.normal(0.0, 0.01, size=(k, m))
        p[f"dec{l}.Wn"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(m, H))
        p[f"dec{l}.b1"] = np.zeros((m, H))
        p[f"dec{l}.W2"] = rng.normal(0.0, math.sqrt(1.0 / H), size=(m, H))
        p[f"dec{l}.b2"] = np.zeros(m)
    p.update({
        "crit.W1": _dense(rng, d, c1), "crit.b1": np.zeros(c1),
        "crit.W2": _dense(rng, c1, c2), "crit.b2": np.zeros(c2),
        "crit.W3": _dense(rng, c2, 1, 0.1), "crit.b3": np.zeros(1),
    })
    return p


def is_critic(name: str) -> bool:
    return name.startswith("crit.")


def mask_names(caps) -> list:
    return [f"mask{i}" for i in range(len(caps))]


@dataclass
class ModelState:
    """Every learner parameter, stacked over a leading restart axis."""
    num_measured: int
    caps: tuple
    params: dict
    cfg: TrainConfig = field(default_factory=TrainConfig)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0
    rng_states: list = field(default_factory=list)

    @property
    def restarts(self) -> int:
        return next(iter(self.params.values())).shape[0]

    @property
    def gammas(self) -> list:
        return [self.params[n] for n in mask_names(self.caps)]

    def select(self, r: int) -> "ModelState":
        pick = lambda d: {k: v[r:r + 1].copy() for k, v in d.items()}
        return replace(self, params=pick(self.params), adam_m=pick(self.adam_m),
                       adam_v=pick(self.adam_v),
                       rng_states=self.rng_states[r:r + 1])

    def num_parameters(self) -> dict:
        per = {}
        for k, v in self.params.items():
            group = k.split(".")[0]
            per[group] = per.get(group, 0) + int(v[0].size)
        return per


def new_state(num_measured: int, caps=None, cfg: TrainConfig = TrainConfig(),
              restarts: int | None = None, seed: int | None = None) -> ModelState:
    caps = tuple(capacities(num_measured) if caps is None else caps)
    if any(k < 1 for k in caps):
        raise StructuralError(f"capacities must be positive: {caps}")
    R = cfg.restarts if restarts is None else restarts
    seeds = np.random.SeedSequence(cfg.seed if seed is None else seed).spawn(R)
    rngs = [np.random.default_rng(s) for s in seeds]
    per = [init_params(num_measured, caps, cfg, g) for g in rngs]
    params = {k: np.stack([p[k] for p in per]) for k in per[0]}
    return ModelState(num_measured, caps, params, cfg,
                      rng_states=[g.bit_generator.state for g in rngs])


# --------------------------------------------------------------------------
# Model pieces (restart-batched, on autodiff Vars)
# --------------------------------------------------------------------------

def _bias(b, extra_axes=1):
    """Insert batch axes after the restart axis."""
    for _ in range(extra_axes):
        b = ad.expand_dims(b, 1)
    return b


def _encode(P, x):
    h = ad.relu(x @ P["enc.W1"] + _bias(P["enc.b1"]))
    h = ad.relu(h @ P["enc.W2"] + _bias(P["enc.b2"]))
    mu = h @ P["enc.Wmu"] + _bias(P["enc.bmu"])
    logvar = h @ P["enc.Wlv"] + _bias(P["enc.blv"])
    return mu, logvar


def _node_mlp(P, l, parents, eps):
    """Layer ``l`` nodes from masked parent values (R,B,m,k) or None, and noise (R,B,m)."""
    pre = ad.expand_dims(eps, 3) * _bias(P[f"dec{l}.Wn"]) + _bias(P[f"dec{l}.b1"])
    if parents is not None:
        pre = pre + ad.einsum("rbmk,rmkh->rbmh", parents, P[f"dec{l}.Wp"])
    h = ad.leaky_relu(pre, LEAK)
    return ad.einsum("rbmh,rmh->rbm", h, P[f"dec{l}.W2"]) + _bias(P[f"dec{l}.b2"])


def _decode(P, eps, masks, num_measured, caps):
    sizes, off = _layout(num_measured, caps)
    values = []
    z = None
    for l, m in enumerate(sizes):
        e = eps[:, :, off[l]:off[l + 1]]
        if l == 0:
            z = _node_mlp(P, 0, None, e)
        else:
            # masked[r, b, j, k] = M[r, k, j] * z[r, b, k]
            masked = ad.expand_dims(z, 2) * ad.expand_dims(ad.swapaxes(masks[l - 1], 1, 2), 1)
            z = _node_mlp(P, l, masked, e)
        values.append(z)
    return values


def _relaxed(gamma, u, temperature):
    logistic = np.log(u) - np.log1p(-u)
    return ad.sigmoid((gamma + logistic) * (1.0 / temperature))


def _critic(P, e):
    h = ad.relu(e @ P["crit.W1"] + _bias(P["crit.b1"]))
    h = ad.relu(h @ P["crit.W2"] + _bias(P["crit.b2"]))
    return (h @ P["crit.W3"] + _bias(P["crit.b3"]))[:, :, 0]


def _dv(P, joint, perm):
    """Donsker-Varadhan bound per restart; marginals via per-column shuffles."""
    B = joint.shape[1]
    shuffled = ad.take_along(joint, perm, axis=1)
    t_joint = _critic(P, joint)
    t_marg = _critic(P, shuffled)
    return ad.mean(t_joint, axis=1) - (ad.logsumexp(t_marg, axis=1) - math.log(B))


def structure_penalty_terms(masks):
    """Per restart: sum over all rows of relu(|M_i| * (2 - pure_i))."""
    total = None
    for M in masks:
        rowsum = ad.sum(M, axis=2)
        pure = ad.sum(M * ad.prod_except(1.0 - M, axis=1), axis=2)
        hinge = ad.sum(ad.relu(rowsum * (2.0 - pure)), axis=1)
        total = hinge if total is None else total + hinge
    return total


def structure_penalty(masks) -> np.ndarray:
    """Hinge sum for plain (rows x cols) or restart-stacked masks."""
    arrs = [np.asarray(m, dtype=float) for m in masks]
    single = arrs[0].ndim == 2
    vs = [ad.Var(m[None] if single else m) for m in arrs]
    out = structure_penalty_terms(vs).value
    return float(out[0]) if single else out


@dataclass
class Noise:
    """Every random draw one loss evaluation needs."""
    xi: np.ndarray            # (R, B, d) reparameterization noise
    u: list                   # per mask block, (R, a, b) uniforms in (0, 1)
    perm: np.ndarray          # (R, B, d) per-column shuffles for the critic

    @classmethod
    def draw(cls, rngs, batch: int, num_measured: int, caps):
        d = noise_dim(num_measured, caps)
        sizes, _ = _layout(num_measured, caps)
        xi, us, perms = [], [], []
        for g in rngs:
            xi.append(g.standard_normal((batch, d)))
            us.append([g.uniform(1e-12, 1 - 1e-12, size=(sizes[i], sizes[i + 1]))
                       for i in range(len(caps))])
            perms.append(np.stack([g.permutation(batch) for _ in range(d)], axis=1))
        u = [np.stack([us[r][i] for r in range(len(rngs))]) for i in range(len(caps))]
        return cls(np.stack(xi), u, np.stack(perms))


TERMS = ("kl", "recon", "ind", "sparsity", "structure", "total")


def loss_graph(P, x, epoch: int, noise: Noise, cfg: TrainConfig, num_measured, caps,
               independence: bool = True):
    """All loss terms as per-restart Vars of shape (R,)."""
    mu, logvar = _encode(P, x)
    eps = mu + ad.exp(logvar * 0.5) * noise.xi
    masks = [_relaxed(P[n], u, cfg.temperature) for n, u in zip(mask_names(caps), noise.u)]
    xhat = _decode(P, eps, masks, num_measured, caps)[-1]

    kl = ad.mean(ad.sum(ad.square(mu) + ad.exp(logvar) - 1.0 - logvar, axis=2), axis=1) * 0.5
    recon = ad.mean(ad.sum(ad.square(x - xhat), axis=2), axis=1) * 0.5
    ind = _dv(P, eps, noise.perm)
    sparsity = None
    for n in mask_names(caps):
        s = ad.sum(ad.sum(ad.sigmoid(P[n]), axis=2), axis=1)
        sparsity = s if sparsity is None else sparsity + s
    hinge = structure_penalty_terms(masks)
    structure = ad.square(hinge)

    total = kl + recon + sparsity * cfg.lambda2 + structure * cfg.lambda3(epoch)
    if independence:
        total = total + ind * cfg.lambda1
    terms = dict(kl=kl, recon=recon, ind=ind, sparsity=sparsity, structure=structure,
                 total=total)
    return terms, eps


def _as_vars(params):
    return {k: ad.Var(v) for k, v in params.items()}


def _values(terms):
    return {k: v.value.copy() for k, v in terms.items()}


def _batched(x):
    x = np.asarray(x, dtype=float)
    return x[None] if x.ndim == 2 else x


# --------------------------------------------------------------------------
# Public single-model operations
# --------------------------------------------------------------------------

def sample_mask(gamma, temperature: float, rng) -> np.ndarray:
    """Binary-Concrete sample per entry: ``sigmoid((gamma + logit(u)) / t)``."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    gamma = np.asarray(gamma, dtype=float)
    u = rng.uniform(1e-12, 1 - 1e-12, size=gamma.shape)
    return _relaxed(ad.Var(gamma), u, temperature).value


def decode(eps, masks, state: ModelState) -> np.ndarray:
    """Reconstructed measured values from noise ``eps`` and relaxed masks.

    ``eps`` is (B, d) or (R, B, d); ``masks`` follow the same convention.
    """
    eps = np.asarray(eps, dtype=float)
    single = eps.ndim == 2
    eps = _batched(eps)
    d = noise_dim(state.num_measured, state.caps)
    if eps.shape[-1] != d:
        raise StructuralError(f"noise needs {d} coordinates, got {eps.shape[-1]}")
    masks = [np.asarray(m, dtype=float) for m in masks]
    sizes, _ = _layout(state.num_measured, state.caps)
    if len(masks) != len(state.caps):
        raise StructuralError(f"expected {len(state.caps)} masks, got {len(masks)}")
    for i, m in enumerate(masks):
        if m.shape[-2:] != (sizes[i], sizes[i + 1]):
            raise StructuralError(f"mask {i} has shape {m.shape}, "
                                  f"expected {(sizes[i], sizes[i + 1])}")
    masks = [ad.Var(m[None] if m.ndim == 2 else m) for m in masks]
    out = _decode(_as_vars(state.params), ad.Var(eps), masks, state.num_measured,
                  state.caps)[-1].value
    return out[0] if single else out


def loss_total(batch, state: ModelState, epoch: int, noise: Noise | None = None,
               rng=None, cfg: TrainConfig | None = None, independence: bool | None = None):
    """Total loss of a single-restart model and its gradients.

    Returns ``(terms, grads)``: ``terms`` maps each term name to a float and
    ``grads`` maps every parameter name (critic included) to its gradient.
    The independence term counts once ``epoch >= cfg.mine_warmup`` unless
    ``independence`` says otherwise.
    """
    cfg = state.cfg if cfg is None else cfg
    if state.restarts != 1:
        raise ArgumentError("loss_total expects a single-restart state; use select()")
    x = _batched(batch)
    if noise is None:
        rng = np.random.default_rng() if rng is None else rng
        noise = Noise.draw([rng], x.shape[1], state.num_measured, state.caps)
    if independence is None:
        independence = epoch >= cfg.mine_warmup
    P = _as_vars(state.params)
    terms, _ = loss_graph(P, x, epoch, noise, cfg, state.num_measured, state.caps,
                          independence)
    values = {k: float(v.value[0]) for k, v in terms.items()}
    if not all(np.isfinite(v) for v in values.values()):
        raise DiagnosticsError(values)
    names = list(P)
    gs = ad.grad(ad.sum(terms["total"]), [P[n] for n in names])
    return values, dict(zip(names, gs))


def extract_structure(gammas, num_measured: int, threshold: float = 0.5) -> HierGraph:
    """Binary graph from mask logits; latents left without children are dropped."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    blocks = []
    for g in gammas:
        g = np.asarray(g, dtype=float)
        if g.ndim == 3:
            g = g[0]
        blocks.append((1.0 / (1.0 + np.exp(-g)) > threshold).astype(np.uint8))
    # prune bottom up so a parent whose children all vanished goes too
    for l in reversed(range(len(blocks))):
        keep = blocks[l].sum(axis=1) > 0
        blocks[l] = blocks[l][keep]
        if l:
            blocks[l - 1] = blocks[l - 1][:, keep]
    while blocks and blocks[0].shape[0] == 0:
        blocks.pop(0)
    return HierGraph(num_measured, [b.shape[0] for b in blocks], blocks)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    state: ModelState                  # best restart only
    loss: float
    best_restart: int
    final_losses: list                 # per restart, nan when discarded
    diverged: list                     # restart indices discarded
    history: list                      # (epoch, restart, term means) rows
    graph: HierGraph
    wall_time_seconds: float = 0.0
    all_restarts: ModelState | None = None

    def summary(self) -> dict:
        return {"best_restart": self.best_restart, "loss": self.loss,
                "final_losses": [None if not np.isfinite(v) else float(v)
                                 for v in self.final_losses],
                "diverged": self.diverged, "wall_time_seconds": self.wall_time_seconds}


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps

    def update(self, params, grads, m, v, t, alive, sign=-1.0):
        if alive.all():
            for k, g in grads.items():
                m[k] *= self.b1
                m[k] += (1 - self.b1) * g
                v[k] *= self.b2
                v[k] += (1 - self.b2) * g * g
                params[k] = params[k] + sign * self.lr / (1 - self.b1 ** t) * m[k] / (
                    np.sqrt(v[k] / (1 - self.b2 ** t)) + self.eps)
            return
        for k, g in grads.items():
            keep = alive.reshape((-1,) + (1,) * (g.ndim - 1))
            g = np.where(keep, g, 0.0)
            m[k] = np.where(keep, self.b1 * m[k] + (1 - self.b1) * g, m[k])
            v[k] = np.where(keep, self.b2 * v[k] + (1 - self.b2) * g * g, v[k])
            mh = m[k] / (1 - self.b1 ** t)
            vh = v[k] / (1 - self.b2 ** t)
            params[k] = np.where(keep, params[k] + sign * self.lr * mh / (np.sqrt(vh) + self.eps),
                                 params[k])


def standardize(values: np.ndarray):
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (values - mean) / std, mean, std


def train(data, caps=None, cfg: TrainConfig = TrainConfig(), log=None,
          keep_all: bool = False) -> TrainResult:
    """Train ``cfg.restarts`` independent models and keep the lowest final loss.

    The final loss of a restart is its mean total loss over the last epoch.
    A restart whose loss or gradients become non-finite is frozen and
    discarded; :class:`DivergenceError` is raised only if all are.
    ``log(epoch, term_means)`` is called after every epoch when given.
    """
    start = time.perf_counter()
    values = data.values if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    N, n = values.shape
    if N < cfg.batch_size:
        raise ArgumentError(f"{N} rows is fewer than the batch size {cfg.batch_size}")
    X, mean, std = standardize(values)
    state = new_state(n, caps, cfg)
    state.mean, state.std = mean, std
    R = state.restarts
    rngs = []
    for s in state.rng_states:
        g = np.random.default_rng()
        g.bit_generator.state = s
        rngs.append(g)

    params = state.params
    model_keys = [k for k in params if not is_critic(k)]
    critic_keys = [k for k in params if is_critic(k)]
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    adam = _Adam(cfg.lr)
    alive = np.ones(R, dtype=bool)
    steps_per_epoch = N // cfg.batch_size
    history = []
    last_epoch_totals = np.zeros(R)
    t = 0

    for epoch in range(cfg.epochs):
        orders = np.stack([g.permutation(N) for g in rngs])
        sums = {k: np.zeros(R) for k in TERMS}
        independence = epoch >= cfg.mine_warmup
        for step in range(steps_per_epoch):
            idx = orders[:, step * cfg.batch_size:(step + 1) * cfg.batch_size]
            x = X[idx]
            noise = Noise.draw(rngs, cfg.batch_size, n, state.caps)
            P = _as_vars(params)
            with np.errstate(all="ignore"):
                terms, eps = loss_graph(P, x, epoch, noise, cfg, n, state.caps, independence)
                grads = dict(zip(model_keys, ad.grad(ad.sum(terms["total"]),
                                                     [P[k] for k in model_keys])))
                C = {k: P[k] for k in critic_keys}
                dv = _dv(C, ad.Var(eps.value), noise.perm)
                cgrads = dict(zip(critic_keys, ad.grad(ad.sum(dv), [C[k] for k in critic_keys])))
            ok = np.isfinite(terms["total"].value)
            for g in list(grads.values()) + list(cgrads.values()):
                ok &= np.isfinite(g.reshape(R, -1)).all(axis=1)
            newly = alive & ~ok
            if newly.any():
                alive &= ok
                if log is not None:
                    log(epoch, {"diverged": np.flatnonzero(newly).tolist()})
                if not alive.any():
                    raise DivergenceError("every restart diverged")
            t += 1
            adam.update(params, grads, m, v, t, alive, sign=-1.0)
            adam.update(params, cgrads, m, v, t, alive, sign=+1.0)
            for k in TERMS:
                sums[k] += np.where(alive, terms[k].value, 0.0)
        means = {k: s / steps_per_epoch for k, s in sums.items()}
        last_epoch_totals = means["total"]
        for r in range(R):
            if alive[r]:
                history.append({"epoch": epoch, "restart": r,
                                **{k: float(means[k][r]) for k in TERMS}})
        if log is not None:
            log(epoch, means)

    state.params = params
    state.adam_m, state.adam_v, state.step = m, v, t
    state.rng_states = [g.bit_generator.state for g in rngs]
    final = np.where(alive, last_epoch_totals, np.nan)
    best = int(np.nanargmin(final))
    chosen = state.select(best)
    graph = extract_structure(chosen.gammas, n, cfg.threshold)
    return TrainResult(chosen, float(final[best]), best, final.tolist(),
                       np.flatnonzero(~alive).tolist(), history, graph,
                       time.perf_counter() - start, state if keep_all else None)


# --------------------------------------------------------------------------
# Independence estimator on its own
# --------------------------------------------------------------------------

def dv_estimate(critic_params: dict, samples: np.ndarray, rng) -> float:
    """Donsker-Varadhan bound of ``samples`` (N, d) against column-shuffled copies.

    ``critic_params`` carry a restart axis of length one.
    """
    samples = np.asarray(samples, dtype=float)
    N, d = samples.shape
    perm = np.stack([rng.permutation(N) for _ in range(d)], axis=1)[None]
    C = {k: ad.Var(v) for k, v in critic_params.items()}
    return float(_dv(C, ad.Var(samples[None]), perm).value[0])


def fit_independence(samples, steps: int = 2000, batch: int = 256, lr: float = 1e-3,
                     hidden=(64, 64), seed: int = 0, holdout: float = 0.5) -> float:
    """Train a critic on part of ``samples`` and report the bound on the rest."""
    samples = np.asarray(samples, dtype=float)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    cut = int(len(samples) * (1 - holdout))
    fit, held = samples[order[:cut]], samples[order[cut:]]
    d = samples.shape[1]
    c1, c2 = hidden
    params = {"crit.W1": _dense(rng, d, c1)[None], "crit.b1": np.zeros((1, c1)),
              "crit.W2": _dense(rng, c1, c2)[None], "crit.b2": np.zeros((1, c2)),
              "crit.W3": _dense(rng, c2, 1, 0.1)[None], "crit.b3": np.zeros((1, 1))}
    m = {k: np.zeros_like(p) for k, p in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    adam = _Adam(lr)
    alive = np.ones(1, dtype=bool)
    for t in range(1, steps + 1):
        rows = fit[rng.choice(len(fit), size=batch, replace=False)]
        perm = np.stack([rng.permutation(batch) for _ in range(d)], axis=1)[None]
        C = _as_vars(params)
        bound = _dv(C, ad.Var(rows[None]), perm)
        names = list(C)
        grads = dict(zip(names, ad.grad(ad.sum(bound), [C[k] for k in names])))
        adam.update(params, grads, m, v, t, alive, sign=+1.0)
    return dv_estimate(params, held, rng)


# --------------------------------------------------------------------------
# Likelihood diagnostics
# --------------------------------------------------------------------------

_LOG2PI = math.log(2 * math.pi)


def elbo_per_row(state: ModelState, x, masks, samples: int, rng) -> np.ndarray:
    """Monte-Carlo ELBO per row for fixed masks, with all normalizing constants."""
    x = np.asarray(x, dtype=float)
    P = _as_vars(state.params)
    mu, logvar = (a.value[0] for a in _encode(P, ad.Var(x[None])))
    out = np.zeros(len(x))
    for _ in range(samples):
        eps = mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)
        xhat = decode(eps, masks, state)
        out += -0.5 * ((x - xhat) ** 2).sum(axis=1) - 0.5 * x.shape[1] * _LOG2PI
    kl = 0.5 * (mu ** 2 + np.exp(logvar) - 1.0 - logvar).sum(axis=1)
    return out / samples - kl


def log_likelihood_is(state: ModelState, x, masks, samples: int, rng) -> np.ndarray:
    """Importance-sampled log p(x) per row, with the encoder as proposal."""
    x = np.asarray(x, dtype=float)
    P = _as_vars(state.params)
    mu, logvar = (a.value[0] for a in _encode(P, ad.Var(x[None])))
    sd = np.exp(0.5 * logvar)
    logw = np.zeros((samples, len(x)))
    for s in range(samples):
        z = rng.standard_normal(mu.shape)
        eps = mu + sd * z
        xhat = decode(eps, masks, state)
        log_lik = -0.5 * ((x - xhat) ** 2).sum(axis=1) - 0.5 * x.shape[1] * _LOG2PI
        log_prior = -0.5 * (eps ** 2).sum(axis=1) - 0.5 * eps.shape[1] * _LOG2PI
        log_q = (-0.5 * z ** 2 - np.log(sd)).sum(axis=1) - 0.5 * eps.shape[1] * _LOG2PI
        logw[s] = log_lik + log_prior - log_q
    top = logw.max(axis=0)
    return top + np.log(np.exp(logw - top).mean(axis=0))


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(state: ModelState, path) -> None:
    meta = {"format_version": CHECKPOINT_FORMAT_VERSION,
            "num_measured": state.num_measured, "caps": list(state.caps),
            "cfg": state.cfg.to_dict(), "step": state.step,
            "rng_states": state.rng_states}
    arrays = {f"param/{k}": v for k, v in state.params.items()}
    arrays.update({f"adam_m/{k}": v for k, v in state.adam_m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in state.adam_v.items()})
    if state.mean is not None:
        arrays["data/mean"] = state.mean
        arrays["data/std"] = state.std
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> ModelState:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ParseError(f"unsupported checkpoint version {meta.get('format_version')!r}")
        group = lambda pre: {k[len(pre):]: z[k] for k in z.files if k.startswith(pre)}
        params, am, av = group("param/"), group("adam_m/"), group("adam_v/")
        mean = z["data/mean"] if "data/mean" in z.files else None
        std = z["data/std"] if "data/std" in z.files else None
    return ModelState(meta["num_measured"], tuple(meta["caps"]), params,
                      TrainConfig.from_dict(meta["cfg"]), mean, std, am, av,
                      meta["step"], meta["rng_states"])
