"""Batch, layer/instance/group and mixture normalization."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import functional as F
from .exceptions import ConfigurationError, InputError, ShapeError
from .gmm import DEFAULT_VAR_FLOOR, GmmModel, em_fit, kmeanspp_init
from .tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

MODES = ("batch", "layer", "instance", "group", "mixture")
VANISHING_RESPONSIBILITY = 1e-12


@dataclass(frozen=True)
class NormSpec:
    """Which normalizer to use and how.

    ``group_size`` is the number of channels per group, so ``group:C`` is
    layer norm and ``group:1`` is instance norm. ``affine=None`` resolves to
    on for batch norm and off for every other mode.
    """

    mode: str
    group_size: int | None = None
    components: int | None = None
    epsilon: float = 1e-5
    affine: bool | None = None
    momentum: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown norm mode {self.mode!r}; expected one of {MODES}")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be > 0")
        if not 0 < self.momentum <= 1:
            raise ConfigurationError("running-statistics momentum must lie in (0, 1]")
        if self.mode == "group" and (self.group_size is None or self.group_size < 1):
            raise ConfigurationError("group mode needs a positive group size")
        if self.mode == "mixture" and (self.components is None or self.components < 1):
            raise ConfigurationError("mixture mode needs a positive component count")

    @classmethod
    def parse(cls, text: str, **kwargs) -> "NormSpec":
        """Parse ``batch``, ``layer``, ``instance``, ``group:<g>`` or ``mixture:<K>``."""
        text = text.strip().lower()
        head, _, arg = text.partition(":")
        if head in ("group", "mixture"):
            try:
                value = int(arg)
            except ValueError:
                raise ConfigurationError(f"{head} norm needs an integer argument, got {text!r}") from None
            key = "group_size" if head == "group" else "components"
            return cls(head, **{key: value}, **kwargs)
        if arg:
            raise ConfigurationError(f"norm {head!r} takes no argument, got {text!r}")
        return cls(head, **kwargs)

    def __str__(self) -> str:
        if self.mode == "group":
            return f"group:{self.group_size}"
        if self.mode == "mixture":
            return f"mixture:{self.components}"
        return self.mode

    @property
    def use_affine(self) -> bool:
        return self.mode == "batch" if self.affine is None else bool(self.affine)


def _stat_axes(x: Tensor) -> tuple[int, ...]:
    if x.ndim < 2:
        raise ShapeError(f"normalization needs (N, C, ...) input, got {x.shape}")
    return (0,) + tuple(range(2, x.ndim))


def _constant_affine(x: Tensor, mean: np.ndarray, var: np.ndarray, eps: float) -> Tensor:
    scale = 1.0 / np.sqrt(var + eps)
    return F.channel_affine(x, Tensor(scale), Tensor(-mean * scale))


# --------------------------------------------------------------------------
# batch normalization

@dataclass
class BnState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1
    affine: bool = True
    trained_steps: int = 0

    @classmethod
    def create(cls, channels: int, epsilon: float = 1e-5, momentum: float = 0.1, affine: bool = True) -> "BnState":
        return cls(Tensor(np.ones(channels), requires_grad=True), Tensor(np.zeros(channels), requires_grad=True),
                   np.zeros(channels), np.ones(channels), epsilon, momentum, affine)

    @property
    def channels(self) -> int:
        return self.running_mean.size


def bn_forward(x: Tensor, state: BnState, training: bool) -> Tensor:
    """Batch normalization over every axis except channels.

    In training mode the biased batch variance is used, the gradient flows
    through the batch statistics, and the running statistics move towards the
    batch values by ``state.momentum``.
    """
    x = as_tensor(x)
    axes = _stat_axes(x)
    if x.shape[1] != state.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, state has {state.channels}")
    if training:
        m = x.size // x.shape[1]
        if m < 2:
            raise InputError(f"batch norm in training mode needs N*H*W >= 2, got {m}")
        xhat = F.standardize(x, axes, state.epsilon)
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        lam = state.momentum
        state.running_mean = (1.0 - lam) * state.running_mean + lam * mu
        state.running_var = (1.0 - lam) * state.running_var + lam * var
        state.trained_steps += 1
    else:
        xhat = _constant_affine(x, state.running_mean, state.running_var, state.epsilon)
    if state.affine:
        return F.channel_affine(xhat, state.gamma, state.beta)
    return xhat


# --------------------------------------------------------------------------
# per-sample axis normalization

def axis_norm_forward(x: Tensor, spec: NormSpec, gamma: Tensor | None = None, beta: Tensor | None = None) -> Tensor:
    """Standardize each sample over its layer, instance or channel-group set.

    All three modes run through the same grouped reduction, so that
    ``group:C`` and ``group:1`` reproduce layer and instance norm bit for bit.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"axis norm needs (N, C, ...) input, got {x.shape}")
    n, c = x.shape[:2]
    if spec.mode == "layer":
        size = c
    elif spec.mode == "instance":
        size = 1
    elif spec.mode == "group":
        size = spec.group_size
        if c % size:
            raise ConfigurationError(f"group size {size} does not divide {c} channels")
    else:
        raise ConfigurationError(f"axis_norm_forward does not handle mode {spec.mode!r}")
    grouped = F.reshape(x, (n, c // size, -1 if x.size else 0))
    out = F.reshape(F.standardize(grouped, (2,), spec.epsilon), x.shape)
    if gamma is not None:
        out = F.channel_affine(out, gamma, beta)
    return out


# --------------------------------------------------------------------------
# mixture normalization

def to_rows(x: Tensor) -> Tensor:
    """``(N, C, H, W) -> (N*H*W, C)``; rank-2 input passes through."""
    if x.ndim == 2:
        return x
    if x.ndim != 4:
        raise ShapeError(f"expected rank 2 or 4, got {x.shape}")
    n, c, h, w = x.shape
    return F.reshape(F.transpose(x, (0, 2, 3, 1)), (n * h * w, c))


def from_rows(rows: Tensor, shape: tuple[int, ...]) -> Tensor:
    if len(shape) == 2:
        return rows
    n, c, h, w = shape
    return F.transpose(F.reshape(rows, (n, h, w, c)), (0, 3, 1, 2))


def rows_array(x) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if arr.ndim == 4:
        return arr.transpose(0, 2, 3, 1).reshape(-1, arr.shape[1])
    if arr.ndim == 2:
        return arr
    raise ShapeError(f"expected rank 2 or 4, got {arr.shape}")


def gmm_posteriors(rows: Tensor, gmm: GmmModel) -> Tensor:
    """Differentiable ``tau_k(x_m)`` for each row, shape ``(M, K)``."""
    m = rows.shape[0]
    logits = []
    for k in range(gmm.k):
        mu = Tensor(gmm.means[k][None, :])
        diff = rows - F.broadcast_to(mu, rows.shape)
        quad = F.matmul(F.square(diff), Tensor((1.0 / gmm.variances[k])[:, None]))
        const = math.log(gmm.weights[k]) - 0.5 * float(np.sum(np.log(2.0 * math.pi * gmm.variances[k])))
        logits.append(quad * -0.5 + const)
    return F.softmax(F.concat(logits, axis=1), axis=1) if m else Tensor(np.zeros((0, gmm.k)))


@dataclass
class MnState:
    gmm: GmmModel
    running_means: np.ndarray
    running_vars: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1
    gamma: Tensor | None = None
    beta: Tensor | None = None
    inactive: list[int] = field(default_factory=list)

    @classmethod
    def from_gmm(cls, gmm: GmmModel, epsilon: float = 1e-5, momentum: float = 0.1, affine: bool = False) -> "MnState":
        c = gmm.dim
        gamma = Tensor(np.ones(c), requires_grad=True) if affine else None
        beta = Tensor(np.zeros(c), requires_grad=True) if affine else None
        return cls(gmm, gmm.means.copy(), gmm.variances.copy(), epsilon, momentum, gamma, beta)


def mn_forward(x: Tensor, state: MnState, training: bool = True) -> Tensor:
    """Mixture normalizing transform against a frozen GMM over channel space.

    Every activation vector is normalized against each component's
    responsibility-weighted statistics; the per-component results are summed
    with weights ``tau_k(x) / sqrt(lambda_k)``. At inference the running
    per-component statistics replace the batch ones, while the posteriors are
    still evaluated per sample.
    """
    x = as_tensor(x)
    rows = to_rows(x)
    m, d = rows.shape
    gmm = state.gmm
    if d != gmm.dim:
        raise ShapeError(f"input has {d} channels, mixture has dimension {gmm.dim}")
    if m == 0:
        raise InputError("mixture normalization needs a non-empty mini-batch")
    tau = gmm_posteriors(rows, gmm)
    colsum = F.sum(tau, axis=0, keepdims=True)
    active = colsum.data[0] >= VANISHING_RESPONSIBILITY
    state.inactive = [int(k) for k in np.flatnonzero(~active)]
    if state.inactive:
        logger.debug("mixture components %s have vanishing batch responsibility", state.inactive)
    tau_hat = tau / F.broadcast_to(colsum + Tensor(np.where(active, 0.0, 1.0)[None, :]), tau.shape)
    out = None
    for k in range(gmm.k):
        if not active[k]:
            continue
        if training:
            w = F.transpose(tau_hat[:, k:k + 1])
            mean_k = F.matmul(w, rows)
            v = rows - F.broadcast_to(mean_k, rows.shape)
            var_k = F.matmul(w, F.square(v))
            lam = state.momentum
            state.running_means[k] = (1.0 - lam) * state.running_means[k] + lam * mean_k.data[0]
            state.running_vars[k] = (1.0 - lam) * state.running_vars[k] + lam * var_k.data[0]
        else:
            mean_k = Tensor(state.running_means[k][None, :])
            var_k = Tensor(state.running_vars[k][None, :])
            v = rows - F.broadcast_to(mean_k, rows.shape)
        xk = v / F.broadcast_to(F.sqrt(var_k + state.epsilon), rows.shape)
        coef = F.broadcast_to(tau[:, k:k + 1] * (1.0 / math.sqrt(gmm.weights[k])), rows.shape)
        term = coef * xk
        out = term if out is None else out + term
    if out is None:
        out = rows * 0.0
    out = from_rows(out, x.shape)
    if state.gamma is not None:
        out = F.channel_affine(out, state.gamma, state.beta)
    return out


def mn_fit_stage(activations: Iterable, k: int, seed: int, max_iter: int = 200, tol: float = 1e-6,
                 epsilon: float = 1e-5, momentum: float = 0.1, var_floor: float = DEFAULT_VAR_FLOOR,
                 affine: bool = False, min_per_component: int = 100) -> MnState:
    """Stage one of mixture normalization: fit and freeze the GMM.

    ``activations`` yields ``(N, C, H, W)`` (or ``(N, C)``) batches; all
    activation vectors are pooled over channel space before seeding with
    k-means++ and running EM.
    """
    rows = [rows_array(a) for a in activations]
    if not rows:
        raise InputError("no activations supplied for mixture fitting")
    X = np.concatenate(rows, axis=0)
    if X.shape[0] < min_per_component * k:
        raise InputError(f"need at least {min_per_component * k} activation vectors for K={k}, got {X.shape[0]}")
    centers = kmeanspp_init(X, k, seed)
    gmm, diag = em_fit(X, k, centers, max_iter=max_iter, tol=tol, var_floor=var_floor)
    logger.info("mixture stage 1: EM on %d vectors of dim %d, K=%d, %d iterations, final mean log-lik %.6f",
                X.shape[0], X.shape[1], k, diag.n_iter, diag.log_likelihood[-1])
    state = MnState.from_gmm(gmm, epsilon, momentum, affine)
    return state


class MixtureNormalizer(TransformerMixin, BaseEstimator):
    """Two-stage mixture normalization as a transformer.

    ``fit`` estimates the GMM over channel space; ``transform`` normalizes
    ``(N, C, H, W)`` or ``(N, C)`` arrays against it using the statistics of
    the batch being transformed.
    """

    def __init__(self, n_components=3, epsilon=1e-5, max_iter=200, tol=1e-6, random_state=0):
        self.n_components = n_components
        self.epsilon = epsilon
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        self.state_ = mn_fit_stage([X], self.n_components, self.random_state, self.max_iter, self.tol,
                                   self.epsilon, min_per_component=1)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "state_")
        return mn_forward(Tensor(np.asarray(X, dtype=np.float64)), self.state_, training=True).data
