"""L2-regularised logistic regression, thresholded decisions and exact AUC."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

__all__ = [
    "TrainConfig",
    "LinearModel",
    "Dataset",
    "LearnerError",
    "fit_logreg",
    "penalized_loss",
    "penalized_gradient",
    "predict_proba",
    "predict_proba_matrix",
    "decide",
    "decide_matrix",
    "auc",
    "auc_with_reason",
    "model_to_text",
    "model_from_text",
]

DEGENERATE_LOGIT = 20.0


class LearnerError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    l2_lambda: float = 1.0
    max_iter: int = 500
    tol: float = 1e-8

    def __post_init__(self):
        if self.l2_lambda < 0:
            raise LearnerError("l2_lambda must be >= 0")
        if self.tol <= 0:
            raise LearnerError("tol must be > 0")


@dataclass(frozen=True)
class LinearModel:
    weights: Mapping[str, float]
    intercept: float
    threshold: float = 0.5
    trained_at: int = 0
    degenerate: bool = False

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise LearnerError("threshold must lie in [0, 1]")
        object.__setattr__(self, "weights", {k: float(v) for k, v in self.weights.items()})
        object.__setattr__(self, "intercept", float(self.intercept))

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(self.weights)

    @property
    def coef(self) -> np.ndarray:
        return np.array(list(self.weights.values()), dtype=float)

    @property
    def threshold_logit(self) -> float:
        """Score s such that sigmoid(s) == threshold."""
        r = self.threshold
        if r <= 0.0:
            return -math.inf
        if r >= 1.0:
            return math.inf
        return math.log(r / (1.0 - r))

    def with_intercept(self, intercept: float) -> "LinearModel":
        return replace(self, intercept=float(intercept))


@dataclass(frozen=True)
class Dataset:
    """Labelled rows restricted to the model features.

    ``labels`` are in {-1, 1}.  ``ids`` and ``periods`` identify the individual
    and the period in which the label was collected (0 = initial data);
    ``sources`` says how the row got in (initial, approved, explored,
    guaranteed).
    """

    feature_names: tuple[str, ...]
    X: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    periods: np.ndarray
    sources: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float).reshape(-1, len(self.feature_names))
        y = np.asarray(self.labels, dtype=int)
        if y.size and not np.isin(y, (-1, 1)).all():
            raise LearnerError("labels must be in {-1, 1}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.int64))
        object.__setattr__(self, "periods", np.asarray(self.periods, dtype=np.int64))
        if not self.sources:
            object.__setattr__(self, "sources", ("initial",) * y.size)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if not (X.shape[0] == y.size == self.ids.size == self.periods.size == len(self.sources)):
            raise LearnerError("dataset columns have inconsistent lengths")

    def __len__(self) -> int:
        return int(self.labels.size)

    @classmethod
    def empty(cls, feature_names: Sequence[str]) -> "Dataset":
        return cls(tuple(feature_names), np.zeros((0, len(feature_names))), np.zeros(0, int),
                   np.zeros(0, np.int64), np.zeros(0, np.int64), ())

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask
        return Dataset(self.feature_names, self.X[idx], self.labels[idx], self.ids[idx],
                       self.periods[idx], tuple(self.sources[i] for i in idx))

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.feature_names, self.X, labels, self.ids, self.periods, self.sources)

    def append(self, X, labels, ids, period: int, sources) -> "Dataset":
        X = np.asarray(X, dtype=float).reshape(-1, len(self.feature_names))
        if isinstance(sources, str):
            sources = (sources,) * X.shape[0]
        return Dataset(self.feature_names, np.vstack([self.X, X]),
                       np.concatenate([self.labels, np.asarray(labels, dtype=int)]),
                       np.concatenate([self.ids, np.asarray(ids, dtype=np.int64)]),
                       np.concatenate([self.periods, np.full(X.shape[0], period, np.int64)]),
                       self.sources + tuple(sources))


# ---------------------------------------------------------------------------
# objective

def _design(X: np.ndarray) -> np.ndarray:
    return np.column_stack([X, np.ones(X.shape[0])])


def penalized_loss(theta: np.ndarray, X: np.ndarray, y01: np.ndarray, lam: float) -> float:
    """Summed negative log-likelihood + lam/2 * ||w||^2 (intercept = last entry, unpenalised)."""
    s = _design(X) @ theta
    nll = np.sum(np.logaddexp(0.0, s) - y01 * s)
    w = theta[:-1]
    return float(nll + 0.5 * lam * w @ w)


def penalized_gradient(theta: np.ndarray, X: np.ndarray, y01: np.ndarray, lam: float) -> np.ndarray:
    A = _design(X)
    g = A.T @ (expit(A @ theta) - y01)
    g[:-1] += lam * theta[:-1]
    return g


def _irls(X, y01, lam, max_iter, tol):
    A = _design(X)
    d = A.shape[1]
    R = lam * np.eye(d)
    R[-1, -1] = 0.0
    theta = np.zeros(d)
    for it in range(max_iter):
        p = expit(A @ theta)
        g = A.T @ (p - y01) + R @ theta
        if np.max(np.abs(g)) <= tol:
            return theta, True
        H = A.T @ (A * (p * (1 - p))[:, None]) + R
        try:
            if np.linalg.cond(H) > 1e12:
                raise np.linalg.LinAlgError("ill-conditioned")
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return theta, False
        # damped Newton: halve until the objective does not increase
        f0 = penalized_loss(theta, X, y01, lam)
        t = 1.0
        while t > 1e-10:
            cand = theta - t * step
            if penalized_loss(cand, X, y01, lam) <= f0 + 1e-12:
                break
            t *= 0.5
        theta = theta - t * step
    g = penalized_gradient(theta, X, y01, lam)
    return theta, bool(np.max(np.abs(g)) <= tol)


def _gradient_descent(X, y01, lam, max_iter, tol, theta=None):
    d = X.shape[1] + 1
    theta = np.zeros(d) if theta is None else theta.copy()
    A = _design(X)
    # Lipschitz bound of the gradient: 0.25 ||A||^2 + lam
    L = 0.25 * np.linalg.norm(A, 2) ** 2 + lam
    lr = 1.0 / max(L, 1e-12)
    for _ in range(max_iter * 100):
        g = penalized_gradient(theta, X, y01, lam)
        if np.max(np.abs(g)) <= tol:
            break
        theta = theta - lr * g
    return theta


def fit_logreg(data: Dataset, cfg: TrainConfig | None = None, trained_at: int = 0,
               threshold: float = 0.5) -> LinearModel:
    """Fit an L2-regularised logistic regression (IRLS, gradient-descent fallback).

    Single-class data has no finite intercept; a constant model is returned
    with ``degenerate=True`` and a warning.
    """
    cfg = cfg or TrainConfig()
    if len(data) == 0:
        raise LearnerError("cannot fit a model on an empty dataset")
    names = data.feature_names
    y01 = (data.labels == 1).astype(float)
    if y01.min() == y01.max():
        warnings.warn("single-class training data: returning a constant model", RuntimeWarning)
        sign = 1.0 if y01[0] == 1 else -1.0
        return LinearModel({k: 0.0 for k in names}, sign * DEGENERATE_LOGIT, threshold,
                           trained_at, degenerate=True)
    theta, ok = _irls(data.X, y01, cfg.l2_lambda, cfg.max_iter, cfg.tol)
    if not ok:
        theta = _gradient_descent(data.X, y01, cfg.l2_lambda, cfg.max_iter, cfg.tol, theta)
    return LinearModel(dict(zip(names, theta[:-1])), theta[-1], threshold, trained_at)


# ---------------------------------------------------------------------------
# prediction

def _vector(m: LinearModel, features: Mapping[str, float]) -> np.ndarray:
    try:
        return np.array([features[k] for k in m.weights], dtype=float)
    except KeyError as exc:
        raise LearnerError(f"missing feature {exc.args[0]!r}") from None


def score(m: LinearModel, features: Mapping[str, float]) -> float:
    return float(_vector(m, features) @ m.coef + m.intercept)


def predict_proba(m: LinearModel, features: Mapping[str, float]) -> float:
    return float(expit(score(m, features)))


def decide(m: LinearModel, features: Mapping[str, float]) -> int:
    """1 iff the predicted probability strictly exceeds the threshold."""
    return 1 if predict_proba(m, features) > m.threshold else -1


def score_matrix(m: LinearModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape[1] != len(m.weights):
        raise LearnerError(f"expected {len(m.weights)} feature columns, got {X.shape[1]}")
    return X @ m.coef + m.intercept


def predict_proba_matrix(m: LinearModel, X: np.ndarray) -> np.ndarray:
    """Row-wise probabilities; columns must follow ``m.feature_names``."""
    return expit(score_matrix(m, X))


def decide_matrix(m: LinearModel, X: np.ndarray) -> np.ndarray:
    """Boolean approvals (True = approve) for each row."""
    return predict_proba_matrix(m, X) > m.threshold


# ---------------------------------------------------------------------------
# AUC

def auc_with_reason(scores: Iterable[float], labels: Iterable[int]) -> tuple[float, str | None]:
    """Mann-Whitney AUC: P(s+ > s-) + 0.5 P(tie), computed exactly from ranks.

    All-identical scores give 0.5 (every pair is a tie), whether or not both
    classes are present.  Otherwise single-class input is undefined and
    returns (nan, reason).
    """
    s = np.asarray(list(scores) if not isinstance(scores, np.ndarray) else scores, dtype=float)
    y = np.asarray(list(labels) if not isinstance(labels, np.ndarray) else labels)
    if s.shape != y.shape:
        raise LearnerError("scores and labels differ in length")
    if s.size == 0:
        return math.nan, "empty input"
    if np.all(s == s[0]):
        return 0.5, None
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan, "single-class labels"
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg)), None


def auc(scores, labels) -> float:
    return auc_with_reason(scores, labels)[0]


# ---------------------------------------------------------------------------
# plain-text snapshots

def model_to_text(m: LinearModel) -> str:
    """key=value lines; floats use repr so they round-trip exactly."""
    lines = [f"weight.{k}={v!r}" for k, v in m.weights.items()]
    lines += [f"intercept={m.intercept!r}", f"threshold={m.threshold!r}",
              f"trained_at={m.trained_at}", f"degenerate={int(m.degenerate)}"]
    return "\n".join(lines) + "\n"


def model_from_text(text: str) -> LinearModel:
    weights: dict[str, float] = {}
    kv: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        if key.startswith("weight."):
            weights[key[len("weight."):]] = float(value)
        else:
            kv[key] = value
    return LinearModel(weights, float(kv["intercept"]), float(kv.get("threshold", 0.5)),
                       int(kv.get("trained_at", 0)), bool(int(kv.get("degenerate", 0))))
