"""Frozen-embedding probes: L-BFGS multinomial logistic regression, kNN
voting, and closed-form SVD ridge regression.

Regularization strengths follow the scale-invariant rule 100/(M*C) where M is
the embedding dimension and C the number of classes (or regression targets).
All probes are deterministic: logistic regression starts from zeros, kNN and
ridge are closed-form.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import ArgumentError, DegenerateFoldError, ShapeError

LBFGS_MAX_ITER = 1000
LBFGS_MEMORY = 10
GRAD_TOL = 1e-6
KNN_DEFAULT_K = 20


def reg_strength(dim: int, n_outputs: int) -> float:
    return 100.0 / (dim * n_outputs)


@dataclass
class LinearProbeModel:
    weights: np.ndarray      # (C, M)
    bias: np.ndarray         # (C,)
    lam: float
    iterations_used: int

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def to_json(self) -> str:
        return json.dumps({
            "kind": "logistic",
            "lambda": self.lam,
            "iterations_used": self.iterations_used,
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
        }, sort_keys=True)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def logistic_objective(params: np.ndarray, X: np.ndarray, y_onehot: np.ndarray,
                       lam: float) -> tuple[float, np.ndarray]:
    """Mean cross-entropy + (lam/2)*||W||_F^2, bias unpenalized; returns
    (value, gradient) with gradient packed like `params` = [W.ravel(), b]."""
    n, m = X.shape
    c = y_onehot.shape[1]
    W = params[:c * m].reshape(c, m)
    b = params[c * m:]
    logits = X @ W.T + b
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    loss = -float((y_onehot * log_probs).sum()) / n + 0.5 * lam * float((W * W).sum())
    probs = np.exp(log_probs)
    delta = (probs - y_onehot) / n
    grad_W = delta.T @ X + lam * W
    grad_b = delta.sum(axis=0)
    return loss, np.concatenate([grad_W.ravel(), grad_b])


def fit_logistic(X: np.ndarray, y: np.ndarray, n_classes: int,
                 max_iter: int = LBFGS_MAX_ITER, tol: float = GRAD_TOL) -> LinearProbeModel:
    """Multinomial logistic probe trained by L-BFGS from zero initialization.

    Stops when the gradient inf-norm falls below `tol` (which implies the
    relative criterion tol*max(1, ||W||_inf)) or after `max_iter` iterations.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ShapeError(f"X {X.shape} and y {y.shape} are incompatible")
    present = np.unique(y)
    missing = sorted(set(range(n_classes)) - set(present.tolist()))
    if missing:
        raise DegenerateFoldError(f"classes {missing} absent from training fold")
    n, m = X.shape
    if n < n_classes:
        raise ArgumentError(f"need at least {n_classes} samples, got {n}")
    lam = reg_strength(m, n_classes)
    y_onehot = np.zeros((n, n_classes), dtype=np.float64)
    y_onehot[np.arange(n), y] = 1.0

    x0 = np.zeros(n_classes * m + n_classes, dtype=np.float64)
    result = minimize(
        logistic_objective, x0, args=(X, y_onehot, lam), jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "maxcor": LBFGS_MEMORY,
                 "gtol": tol, "ftol": 0.0},
    )
    params = result.x
    W = params[:n_classes * m].reshape(n_classes, m)
    b = params[n_classes * m:]
    return LinearProbeModel(weights=W, bias=b, lam=lam,
                            iterations_used=int(result.nit))


def predict_logistic(model: LinearProbeModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax class indices and softmax probabilities (ties -> lowest index)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ShapeError(f"expected (*, {model.dim}) queries, got {X.shape}")
    probs = _softmax_rows(X @ model.weights.T + model.bias)
    return probs.argmax(axis=1), probs


@dataclass
class KnnIndex:
    points: np.ndarray       # (n, M)
    labels: np.ndarray       # (n,)
    k: int = KNN_DEFAULT_K

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2 or self.labels.shape != (self.points.shape[0],):
            raise ShapeError("points and labels are incompatible")
        if not 1 <= self.k <= self.points.shape[0]:
            raise ArgumentError(f"k={self.k} outside [1, {self.points.shape[0]}]")


def knn_predict(index: KnnIndex, X: np.ndarray) -> np.ndarray:
    """Euclidean k-nearest majority vote.

    Tie chain: vote ties go to the class with the smaller summed neighbor
    distance, then the lower class index; equidistant neighbors rank by lower
    row index (stable sort).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != index.points.shape[1]:
        raise ShapeError(f"expected (*, {index.points.shape[1]}) queries, got {X.shape}")
    out = np.empty(X.shape[0], dtype=np.int64)
    for qi, q in enumerate(X):
        dist = np.sqrt(((index.points - q) ** 2).sum(axis=1))
        nearest = np.argsort(dist, kind="stable")[:index.k]
        votes: dict[int, int] = {}
        sums: dict[int, float] = {}
        for row in nearest:
            cls = int(index.labels[row])
            votes[cls] = votes.get(cls, 0) + 1
            sums[cls] = sums.get(cls, 0.0) + float(dist[row])
        out[qi] = min(votes, key=lambda cls: (-votes[cls], sums[cls], cls))
    return out


@dataclass
class RidgeModel:
    weights: np.ndarray      # (M, T)
    bias: np.ndarray         # (T,)
    alpha: float

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def to_json(self) -> str:
        return json.dumps({
            "kind": "ridge",
            "alpha": self.alpha,
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
        }, sort_keys=True)


def fit_ridge(X: np.ndarray, Y: np.ndarray, alpha: float | None = None) -> RidgeModel:
    """Closed-form ridge via thin SVD of the centered design matrix.

    W = V diag(s/(s^2+alpha)) U^T Y_c with alpha = 100/(M*T) by default; the
    bias restores the means. Singular values below 1e-12 * s_max are treated
    as zero, so collinear columns stay finite.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or Y.shape[0] != X.shape[0]:
        raise ShapeError(f"X {X.shape} and Y {Y.shape} are incompatible")
    n, m = X.shape
    t = Y.shape[1]
    if n < 2:
        raise ArgumentError("ridge needs at least 2 samples")
    if alpha is None:
        alpha = reg_strength(m, t)
    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    Yc = Y - y_mean
    U, sigma, Vt = np.linalg.svd(Xc, full_matrices=False)
    if sigma.size and sigma[0] > 0:
        keep = sigma > 1e-12 * sigma[0]
    else:
        keep = np.zeros_like(sigma, dtype=bool)
    factors = np.zeros_like(sigma)
    factors[keep] = sigma[keep] / (sigma[keep] ** 2 + alpha)
    W = Vt.T @ (factors[:, None] * (U.T @ Yc))
    bias = y_mean - x_mean @ W
    return RidgeModel(weights=W, bias=bias, alpha=float(alpha))


def predict_ridge(model: RidgeModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ShapeError(f"expected (*, {model.dim}) queries, got {X.shape}")
    return X @ model.weights + model.bias
