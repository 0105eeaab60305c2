"""Diagonal-covariance Gaussian mixtures: density, posteriors, seeding and EM."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import FormatError, InputError, ShapeError

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_VAR_FLOOR = 1e-6
GMM_VERSION = "gmm-v1"


@dataclass
class GmmModel:
    """Mixture weights ``(K,)``, means ``(K, D)`` and diagonal variances ``(K, D)``."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    var_floor: float = DEFAULT_VAR_FLOOR

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        k = self.weights.size
        if self.means.shape[0] != k or self.variances.shape != self.means.shape:
            raise ShapeError(f"inconsistent GMM shapes: weights {self.weights.shape}, "
                             f"means {self.means.shape}, variances {self.variances.shape}")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise InputError(f"mixture weights must be non-negative and sum to 1, got {self.weights}")
        if np.any(self.variances < self.var_floor):
            raise InputError(f"variances must be >= var_floor={self.var_floor}")

    @property
    def k(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {
            "version": GMM_VERSION,
            "k": self.k,
            "dim": self.dim,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict, var_floor: float = DEFAULT_VAR_FLOOR) -> "GmmModel":
        if doc.get("version") != GMM_VERSION:
            raise FormatError(f"expected version {GMM_VERSION!r}, got {doc.get('version')!r}")
        model = cls(doc["weights"], doc["means"], doc["variances"], var_floor=min(var_floor, np.min(doc["variances"])))
        if model.k != doc["k"] or model.dim != doc["dim"]:
            raise FormatError(f"k/dim fields ({doc['k']}, {doc['dim']}) disagree with arrays ({model.k}, {model.dim})")
        return model


def save_gmm(model: GmmModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2))


def load_gmm(path) -> GmmModel:
    return GmmModel.from_dict(json.loads(Path(path).read_text()))


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def component_log_joint(model: GmmModel, X: np.ndarray) -> np.ndarray:
    """``log lambda_k + log N(x_m; mu_k, diag var_k)`` for every row, shape ``(M, K)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.dim:
        raise ShapeError(f"samples have dimension {X.shape[1]}, model has {model.dim}")
    quad = np.empty((X.shape[0], model.k))
    # centered form per component: the expanded quadratic cancels badly far from the origin
    for j in range(model.k):
        diff = X - model.means[j]
        quad[:, j] = (diff * diff) @ (1.0 / model.variances[j])
    log_norm = -0.5 * (model.dim * LOG_2PI + np.sum(np.log(model.variances), axis=1))
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    return log_w + log_norm - 0.5 * quad


def log_density(model: GmmModel, x) -> float:
    """Log mixture density of a single ``D``-vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != model.dim:
        raise ShapeError(f"expected a {model.dim}-vector, got shape {x.shape}")
    return float(score_samples(model, x[None, :])[0])


def score_samples(model: GmmModel, X) -> np.ndarray:
    return _logsumexp(component_log_joint(model, X), axis=1)


def responsibilities(model: GmmModel, X) -> np.ndarray:
    """Posterior ``p(k | x_m)`` for every row of ``X``; rows sum to one."""
    lj = component_log_joint(model, X)
    return np.exp(lj - _logsumexp(lj, axis=1)[:, None])


def kmeanspp_init(X, k: int, seed: int) -> np.ndarray:
    """K-means++ seeding: uniform first center, then D^2-weighted draws."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    m = X.shape[0]
    if k < 1 or k > m:
        raise InputError(f"need 1 <= K <= M, got K={k}, M={m}")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(m))]
    d2 = np.sum((X - X[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(m, p=d2 / total))
        else:
            # every point coincides with a center already; pick a fresh index
            rest = np.setdiff1d(np.arange(m), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return X[chosen].copy()


@dataclass
class EmDiagnostics:
    log_likelihood: list[float] = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    reseeded: list[tuple[int, int]] = field(default_factory=list)

    def is_monotone(self, slack: float = 1e-9) -> bool:
        ll = np.asarray(self.log_likelihood)
        return bool(np.all(np.diff(ll) >= -slack))


def _m_step(X, resp, var_floor):
    nk = resp.sum(axis=0)
    weights = nk / nk.sum()
    means = (resp.T @ X) / nk[:, None]
    variances = np.empty_like(means)
    for j in range(resp.shape[1]):
        centered = X - means[j]
        variances[j] = (resp[:, j] @ (centered * centered)) / nk[j]
    return weights, means, np.maximum(variances, var_floor)


def em_fit(X, k: int, init=None, max_iter: int = 200, tol: float = 1e-6,
           var_floor: float = DEFAULT_VAR_FLOOR, seed: int = 0) -> tuple[GmmModel, EmDiagnostics]:
    """Fit a diagonal GMM by EM starting from the given centers.

    Initial variances are the per-dimension variance of the whole sample and
    the weights are uniform. Iteration stops once the mean log-likelihood
    improves by less than ``tol`` or after ``max_iter`` M-steps. A component
    whose total responsibility drops below 1e-12 is re-seeded at the point
    farthest from its nearest mean; re-seeding events are listed in the
    diagnostics.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    m, d = X.shape
    if m <= k:
        raise InputError(f"EM needs more samples than components (M={m}, K={k})")
    if tol <= 0:
        raise InputError("tol must be positive")
    centers = kmeanspp_init(X, k, seed) if init is None else np.asarray(init, dtype=np.float64)
    if centers.shape != (k, d):
        raise ShapeError(f"init centers shape {centers.shape} != ({k}, {d})")
    global_var = np.maximum(X.var(axis=0), var_floor)
    model = GmmModel(np.full(k, 1.0 / k), centers.copy(), np.tile(global_var, (k, 1)), var_floor)
    diag = EmDiagnostics()
    prev = -np.inf
    for it in range(max_iter + 1):
        lj = component_log_joint(model, X)
        lse = _logsumexp(lj, axis=1)
        ll = float(np.mean(lse))
        diag.log_likelihood.append(ll)
        if ll - prev < tol:
            diag.converged = True
            break
        if it == max_iter:
            break
        prev = ll
        resp = np.exp(lj - lse[:, None])
        nk = resp.sum(axis=0)
        for j in np.flatnonzero(nk < 1e-12):
            nearest = np.min(((X[:, None, :] - model.means[None]) ** 2).sum(-1), axis=1)
            far = int(np.argmax(nearest))
            resp[:, j] = 0.0
            resp[far, :] = 0.0
            resp[far, j] = 1.0
            diag.reseeded.append((it, int(j)))
            logger.warning("EM iteration %d: component %d empty, re-seeded at sample %d", it, j, far)
        weights, means, variances = _m_step(X, resp, var_floor)
        model = GmmModel(weights / weights.sum(), means, variances, var_floor)
        diag.n_iter = it + 1
    return model, diag


class GaussianMixture(DensityMixin, BaseEstimator):
    """Estimator wrapper around :func:`kmeanspp_init` + :func:`em_fit`.

    Parameters
    ----------
    n_components : int
        Number of mixture components ``K``.
    max_iter, tol : int, float
        EM budget and stopping threshold on the mean log-likelihood gain.
    var_floor : float
        Lower bound applied to every diagonal variance.
    random_state : int
        Seed for k-means++ seeding.
    """

    def __init__(self, n_components=3, max_iter=200, tol=1e-6, var_floor=DEFAULT_VAR_FLOOR, random_state=0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.var_floor = var_floor
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        centers = kmeanspp_init(X, self.n_components, self.random_state)
        self.model_, self.diagnostics_ = em_fit(X, self.n_components, centers, self.max_iter, self.tol,
                                                self.var_floor)
        self.weights_ = self.model_.weights
        self.means_ = self.model_.means
        self.variances_ = self.model_.variances
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return responsibilities(self.model_, check_array(X, dtype=np.float64))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def score_samples(self, X):
        check_is_fitted(self, "model_")
        return score_samples(self.model_, check_array(X, dtype=np.float64))

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))
