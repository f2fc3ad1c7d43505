"""Estimate r(S, T) from data through the rank of the Jacobian of E[y_T | x_S].

The conditional mean is fit with a small smooth MLP on standardized columns;
the Jacobian is taken by central differences at a handful of data rows and
its rank is read off the relative singular-value profile.  A held-out R^2
gate decides the rank-zero case, where the relative profile carries no
information.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.neural_network import MLPRegressor

from .errors import ArgumentError, DegenerateInputError, InsufficientDataError
from .sem import Dataset

MIN_ROWS = 100
# calibrated on fig5a LeakyReLU data; 0.05 confuses rank one with two too often
DEFAULT_TOL = 0.09
CROSSCOV_TOL = 0.05


@dataclass(frozen=True)
class RegressorConfig:
    hidden: tuple = (64, 32)
    activation: str = "tanh"
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    holdout: float = 0.2
    r2_min: float = 0.01

    def __post_init__(self):
        if any(w < 1 for w in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.activation not in ("tanh", "logistic"):
            raise ValueError("activation must be smooth: 'tanh' or 'logistic'")
        if not 0 < self.holdout < 1:
            raise ValueError("holdout must be in (0, 1)")


@dataclass(frozen=True)
class RankDecision:
    rank: int
    spectrum: np.ndarray
    votes: np.ndarray
    cap: int
    heldout_r2: float | None = None
    extra: dict = field(default_factory=dict, compare=False)


def _values(data) -> np.ndarray:
    return data.values if isinstance(data, Dataset) else np.asarray(data, dtype=float)


def _check_sets(S, T):
    S, T = [int(s) for s in S], [int(t) for t in T]
    if not S or not T:
        raise ArgumentError("S and T must be nonempty")
    if set(S) & set(T):
        raise ArgumentError(f"S and T overlap: {sorted(set(S) & set(T))}")
    return sorted(set(S)), sorted(set(T))


def _standardize(cols: np.ndarray, names):
    mean = cols.mean(axis=0)
    std = cols.std(axis=0)
    for j, s in enumerate(std):
        if not s > 1e-12 * max(1.0, abs(mean[j])):
            raise DegenerateInputError(names[j])
    return (cols - mean) / std


class FittedRegressor:
    """MLP approximation of E[y_T | x_S] in standardized coordinates."""

    def __init__(self, model: MLPRegressor, S, T, heldout_r2: float, points: np.ndarray):
        self.model = model
        self.S = tuple(S)
        self.T = tuple(T)
        self.heldout_r2 = heldout_r2
        self.points = points

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = self.model.predict(np.atleast_2d(x))
        return out.reshape(len(np.atleast_2d(x)), -1)

    def parameters(self):
        return [a.copy() for a in self.model.coefs_ + self.model.intercepts_]

    def analytic_jacobian(self, x: np.ndarray) -> np.ndarray:
        """Exact Jacobian of the network at each row of ``x``: (m, |T|, |S|)."""
        act = np.tanh if self.model.activation == "tanh" else (lambda v: 1 / (1 + np.exp(-v)))
        h = np.atleast_2d(x)
        jac = np.broadcast_to(np.eye(h.shape[1]), (h.shape[0], h.shape[1], h.shape[1]))
        W, b = self.model.coefs_, self.model.intercepts_
        for i in range(len(W) - 1):
            pre = h @ W[i] + b[i]
            h = act(pre)
            d = 1 - h ** 2 if self.model.activation == "tanh" else h * (1 - h)
            jac = d[:, :, None] * np.einsum("ji,mjk->mik", W[i], jac)
        return np.einsum("ji,mjk->mik", W[-1], jac)


def fit_conditional_mean(data, S, T, cfg: RegressorConfig = RegressorConfig()) -> FittedRegressor:
    """Regress columns ``T`` on columns ``S`` (both standardized)."""
    S, T = _check_sets(S, T)
    values = _values(data)
    if values.shape[0] < MIN_ROWS:
        raise InsufficientDataError(f"need at least {MIN_ROWS} rows, got {values.shape[0]}")
    X = _standardize(values[:, S], S)
    Y = _standardize(values[:, T], T)

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(X))
    n_hold = int(round(cfg.holdout * len(X)))
    hold, train = order[:n_hold], order[n_hold:]

    model = MLPRegressor(hidden_layer_sizes=tuple(cfg.hidden), activation=cfg.activation,
                         solver="adam", learning_rate_init=cfg.learning_rate,
                         batch_size=min(cfg.batch_size, len(train)), max_iter=cfg.epochs,
                         random_state=cfg.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model.fit(X[train], Y[train] if len(T) > 1 else Y[train, 0])

    pred = model.predict(X[hold]).reshape(n_hold, -1)
    resid = ((Y[hold] - pred) ** 2).sum()
    total = ((Y[hold] - Y[hold].mean(axis=0)) ** 2).sum()
    r2 = float(1.0 - resid / total) if total > 0 else 0.0
    return FittedRegressor(model, S, T, r2, X)


def finite_difference_jacobian(f, points: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of ``f`` at each row of ``points``: (m, d_out, d_in)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    m, d = points.shape
    steps = np.eye(d) * h
    plus = (points[:, None, :] + steps[None]).reshape(m * d, d)
    minus = (points[:, None, :] - steps[None]).reshape(m * d, d)
    fp = np.asarray(f(plus), dtype=float).reshape(m, d, -1)
    fm = np.asarray(f(minus), dtype=float).reshape(m, d, -1)
    return ((fp - fm) / (2 * h)).transpose(0, 2, 1)


def jacobian_rank(regressor, eval_points: np.ndarray, tol: float = DEFAULT_TOL,
                  h: float = 1e-3) -> RankDecision:
    """Majority vote over points of #{k : sigma_k / sigma_1 >= tol}."""
    if not 0 < tol < 1:
        raise ValueError("tol must be in (0, 1)")
    jac = finite_difference_jacobian(regressor, eval_points, h)
    d_out, d_in = jac.shape[1:]
    cap = min(d_out, d_in)
    sv = np.linalg.svd(jac, compute_uv=False)           # (m, cap)
    top = sv[:, :1]
    scale = max(1.0, float(np.abs(top).max()))
    nonzero = top[:, 0] > 1e-10 * scale
    ratios = np.where(nonzero[:, None], sv / np.where(nonzero[:, None], top, 1.0), 0.0)
    votes = np.where(nonzero, (ratios >= tol).sum(axis=1), 0).astype(int)
    counts = np.bincount(votes, minlength=cap + 1)
    # ties go to the smaller rank
    rank = int(min(np.argmax(counts), cap))
    return RankDecision(rank=rank, spectrum=ratios.mean(axis=0), votes=votes, cap=cap)


def _eval_points(fit: FittedRegressor, n_points: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed + 7919)
    idx = rng.choice(len(fit.points), size=min(n_points, len(fit.points)), replace=False)
    return fit.points[np.sort(idx)]


def statistical_r(data, S, T, cfg: RegressorConfig = RegressorConfig(), tol: float = DEFAULT_TOL,
                  n_points: int = 64, cache: dict | None = None) -> RankDecision:
    key = (tuple(sorted(S)), tuple(sorted(T)))
    fit = cache.get(key) if cache is not None else None
    if fit is None:
        fit = fit_conditional_mean(data, S, T, cfg)
        if cache is not None:
            cache[key] = fit
    decision = jacobian_rank(fit, _eval_points(fit, n_points, cfg.seed), tol)
    rank = decision.rank if fit.heldout_r2 >= cfg.r2_min else 0
    return RankDecision(rank=rank, spectrum=decision.spectrum, votes=decision.votes,
                        cap=decision.cap, heldout_r2=fit.heldout_r2)


def cross_covariance_rank(data, S, T, tol: float = CROSSCOV_TOL) -> RankDecision:
    """Rank of the sample cross-correlation between S and T.

    Exact only for linear models.  Besides the relative ``tol`` a singular
    value must clear twice the typical top singular value of a pure-noise
    correlation matrix of the same shape.
    """
    S, T = _check_sets(S, T)
    values = _values(data)
    n = values.shape[0]
    if n <= max(len(S), len(T)):
        raise InsufficientDataError(f"{n} rows cannot support a {len(S)}x{len(T)} rank test")
    X = _standardize(values[:, S], S)
    Y = _standardize(values[:, T], T)
    corr = X.T @ Y / n
    sv = np.linalg.svd(corr, compute_uv=False)
    floor = 2.0 * (np.sqrt(len(S)) + np.sqrt(len(T))) / np.sqrt(n)
    ratios = sv / sv[0] if sv[0] > 0 else np.zeros_like(sv)
    rank = int(((ratios >= tol) & (sv >= floor)).sum())
    return RankDecision(rank=rank, spectrum=ratios, votes=np.array([rank]),
                        cap=min(len(S), len(T)), extra={"floor": floor})


class StatisticalOracle:
    """RankOracle estimated from a dataset; fitted regressors are cached."""

    capped = True

    def __init__(self, data, cfg: RegressorConfig = RegressorConfig(), tol: float | None = None,
                 n_points: int = 64, mode: str = "jacobian"):
        if mode not in ("jacobian", "crosscov"):
            raise ValueError("mode must be 'jacobian' or 'crosscov'")
        self.data = data
        self.cfg = cfg
        self.tol = (DEFAULT_TOL if mode == "jacobian" else CROSSCOV_TOL) if tol is None else tol
        self.n_points = n_points
        self.mode = mode
        self.decisions: dict = {}
        self._fits: dict = {}

    def decide(self, S, T) -> RankDecision:
        key = (frozenset(S), frozenset(T))
        if key not in self.decisions:
            if not key[0] or not key[1]:
                self.decisions[key] = RankDecision(0, np.zeros(0), np.zeros(0, int), 0)
            elif self.mode == "crosscov":
                self.decisions[key] = cross_covariance_rank(self.data, S, T, self.tol)
            else:
                self.decisions[key] = statistical_r(self.data, S, T, self.cfg, self.tol,
                                                    self.n_points, self._fits)
        return self.decisions[key]

    def query(self, S, T) -> int:
        return self.decide(S, T).rank
