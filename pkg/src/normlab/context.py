"""Context normalization: learned per-context statistics from identifier embeddings.

Each context id ``r`` is one-hot encoded and passed through an affine
identifier embedder; two affine heads map the embedding to a mean vector and
(after a softplus positivity map) a variance vector, which normalize every
sample tagged with ``r``. At inference either the learned statistics are used
directly (``"cn"``) or all contexts are combined through their posteriors as
in mixture normalization (``"cn+"``).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import functional as F
from .exceptions import ConfigurationError, FormatError, InputError, ShapeError
from .gmm import GmmModel, responsibilities
from .norms import VANISHING_RESPONSIBILITY, rows_array
from .tensor import Tensor, as_tensor

SIGMA2_FLOOR = 1e-4
INIT_SCALE = 0.05
PROVENANCES = ("superclass", "dataset", "gmm-component", "day-night", "custom")


def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


class ContextTable:
    """Embedder weights for ``T`` contexts producing ``D``-dimensional statistics.

    ``W_r`` has one row per context, so the identifier embedding of ``r`` is
    ``onehot(r) @ W_r + b_r``.
    """

    BLOCKS = ("W_r", "b_r", "W_mu", "b_mu", "W_sigma", "b_sigma")

    def __init__(self, n_contexts: int, dim: int, embed_dim: int = 64, seed: int = 0,
                 sigma2_floor: float = SIGMA2_FLOOR):
        if n_contexts < 1 or dim < 1 or embed_dim < 1:
            raise ConfigurationError("context table sizes must be positive")
        rng = np.random.default_rng(seed)
        self.sigma2_floor = sigma2_floor
        u = lambda *shape: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)  # noqa: E731
        self.W_r = Tensor(u(n_contexts, embed_dim), requires_grad=True)
        self.b_r = Tensor(np.zeros(embed_dim), requires_grad=True)
        self.W_mu = Tensor(u(embed_dim, dim), requires_grad=True)
        self.b_mu = Tensor(np.zeros(dim), requires_grad=True)
        self.W_sigma = Tensor(u(embed_dim, dim), requires_grad=True)
        # softplus(b_sigma) + floor == 1, so the layer starts as plain standardization
        self.b_sigma = Tensor(np.full(dim, _inv_softplus(1.0 - sigma2_floor)), requires_grad=True)

    @classmethod
    def from_arrays(cls, arrays: dict, sigma2_floor: float = SIGMA2_FLOOR) -> "ContextTable":
        t, e = np.asarray(arrays["W_r"]).shape
        d = np.asarray(arrays["W_mu"]).shape[1]
        table = cls(t, d, e, sigma2_floor=sigma2_floor)
        for name in cls.BLOCKS:
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != getattr(table, name).shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {getattr(table, name).shape}")
            getattr(table, name).data = arr.copy()
        return table

    @property
    def n_contexts(self) -> int:
        return self.W_r.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.W_r.shape[1]

    @property
    def dim(self) -> int:
        return self.W_mu.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.BLOCKS}

    def onehot(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim != 1:
            raise ShapeError(f"context ids must be a vector, got shape {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_contexts):
            raise InputError(f"context ids must lie in [0, {self.n_contexts}), got [{ids.min()}, {ids.max()}]")
        out = np.zeros((ids.size, self.n_contexts))
        out[np.arange(ids.size), ids.astype(np.int64)] = 1.0
        return out

    def embed(self, ids) -> tuple[Tensor, Tensor, Tensor]:
        """``(alpha, mu, sigma2)`` rows for each id, differentiable in all six blocks."""
        alpha = F.dense(Tensor(self.onehot(ids)), self.W_r, self.b_r)
        mu = F.dense(alpha, self.W_mu, self.b_mu)
        sigma2 = F.softplus(F.dense(alpha, self.W_sigma, self.b_sigma)) + self.sigma2_floor
        return alpha, mu, sigma2

    def frozen_statistics(self) -> tuple[np.ndarray, np.ndarray]:
        """Learned ``(mu_r, sigma2_r)`` for every context as plain arrays."""
        _, mu, sigma2 = self.embed(np.arange(self.n_contexts))
        return mu.data.copy(), sigma2.data.copy()


@dataclass
class ContextParams:
    mu: Tensor
    sigma2: Tensor
    alpha: Tensor


@dataclass
class ContextAssignment:
    """One context id per sample."""

    ids: np.ndarray
    n_contexts: int
    provenance: str = "custom"
    model: GmmModel | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if self.provenance not in PROVENANCES:
            raise ConfigurationError(f"unknown context provenance {self.provenance!r}")
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.n_contexts):
            raise InputError(f"context ids must lie in [0, {self.n_contexts})")

    def __len__(self) -> int:
        return self.ids.size

    def subset(self, index) -> "ContextAssignment":
        return ContextAssignment(self.ids[index], self.n_contexts, self.provenance, self.model)


def write_assignment(path, ids) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("index,context\n")
        for i, r in enumerate(np.asarray(ids, dtype=np.int64)):
            fh.write(f"{i},{r}\n")


def read_assignment(path, n_contexts: int | None = None) -> ContextAssignment:
    """Parse an ``index,context`` CSV; every index ``0..N-1`` must appear once."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["index", "context"]:
            raise FormatError(f"{path}: expected header 'index,context', got {header}")
        pairs = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                i, r = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise FormatError(f"{path}:{lineno}: malformed row {row}") from None
            if i in pairs:
                raise FormatError(f"{path}:{lineno}: duplicate index {i}")
            pairs[i] = r
    n = len(pairs)
    if sorted(pairs) != list(range(n)):
        raise FormatError(f"{path}: indices must cover 0..{n - 1} exactly once")
    ids = np.array([pairs[i] for i in range(n)], dtype=np.int64)
    t = int(ids.max()) + 1 if n_contexts is None and n else (n_contexts or 0)
    return ContextAssignment(ids, t, "custom")


# --------------------------------------------------------------------------
# core transforms

def context_params(table: ContextTable, r: int) -> ContextParams:
    if not 0 <= int(r) < table.n_contexts:
        raise InputError(f"context id {r} outside [0, {table.n_contexts})")
    alpha, mu, sigma2 = table.embed(np.array([int(r)]))
    return ContextParams(F.reshape(mu, (table.dim,)), F.reshape(sigma2, (table.dim,)),
                         F.reshape(alpha, (table.embed_dim,)))


def cn_normalize(x, mu, sigma2, epsilon: float = 1e-5) -> Tensor:
    """``(x - mu) / sqrt(sigma2 + epsilon)`` for same-shaped operands."""
    x, mu, sigma2 = as_tensor(x), as_tensor(mu), as_tensor(sigma2)
    if not (x.shape == mu.shape == sigma2.shape):
        raise ShapeError(f"cn_normalize: x {x.shape}, mu {mu.shape}, sigma2 {sigma2.shape} must match")
    return (x - mu) / F.sqrt(sigma2 + epsilon)


def to_patches(x: Tensor, patch: tuple[int, int]) -> Tensor:
    """``(N, C, H, W) -> (N, P, C*ph*pw)`` with non-overlapping, row-major patches."""
    n, c, h, w = x.shape
    ph, pw = patch
    if h % ph or w % pw:
        raise ConfigurationError(f"patch size {patch} does not tile {h}x{w}")
    t = F.reshape(x, (n, c, h // ph, ph, w // pw, pw))
    t = F.transpose(t, (0, 2, 4, 1, 3, 5))
    return F.reshape(t, (n, (h // ph) * (w // pw), c * ph * pw))


def from_patches(p: Tensor, shape: tuple[int, int, int, int], patch: tuple[int, int]) -> Tensor:
    n, c, h, w = shape
    ph, pw = patch
    t = F.reshape(p, (n, h // ph, w // pw, c, ph, pw))
    t = F.transpose(t, (0, 3, 1, 4, 2, 5))
    return F.reshape(t, shape)


def feature_dim(shape, mode: str, patch: tuple[int, int] = (4, 4)) -> int:
    if mode == "channels":
        return shape[1]
    if mode == "patches":
        return shape[1] * patch[0] * patch[1]
    raise ConfigurationError(f"context-norm mode must be 'channels' or 'patches', got {mode!r}")


def cn_layer_forward(x: Tensor, contexts, table: ContextTable, mode: str = "channels",
                     epsilon: float = 1e-5, patch: tuple[int, int] = (4, 4)) -> Tensor:
    """Normalize every sample with the statistics of its own context."""
    x = as_tensor(x)
    ids = contexts.ids if isinstance(contexts, ContextAssignment) else np.asarray(contexts)
    if x.ndim != 4:
        raise ShapeError(f"cn_layer_forward expects (N, C, H, W), got {x.shape}")
    if ids.shape != (x.shape[0],):
        raise ShapeError(f"{ids.size} context ids for a batch of {x.shape[0]}")
    d = feature_dim(x.shape, mode, patch)
    if d != table.dim:
        raise ShapeError(f"{mode} mode needs a table of dimension {d}, got {table.dim}")
    _, mu, sigma2 = table.embed(ids)
    n = x.shape[0]
    if mode == "channels":
        c = x.shape[1]
        mu = F.broadcast_to(F.reshape(mu, (n, c, 1, 1)), x.shape)
        sigma2 = F.broadcast_to(F.reshape(sigma2, (n, c, 1, 1)), x.shape)
        return cn_normalize(x, mu, sigma2, epsilon)
    p = to_patches(x, patch)
    shape = p.shape
    mu = F.broadcast_to(F.reshape(mu, (n, 1, d)), shape)
    sigma2 = F.broadcast_to(F.reshape(sigma2, (n, 1, d)), shape)
    return from_patches(cn_normalize(p, mu, sigma2, epsilon), x.shape, patch)


def context_gmm(table: ContextTable) -> GmmModel:
    """Uniform-prior diagonal mixture whose components are the learned contexts."""
    mu, sigma2 = table.frozen_statistics()
    t = table.n_contexts
    return GmmModel(np.full(t, 1.0 / t), mu, sigma2, var_floor=min(table.sigma2_floor, float(sigma2.min())))


def cn_plus_rows(X: np.ndarray, table: ContextTable, epsilon: float = 1e-5) -> tuple[np.ndarray, list[int]]:
    """CN+ on a batch of feature vectors ``(M, D)``.

    Posteriors come from the uniform-prior mixture of learned contexts; each
    context contributes a standardization against its posterior-weighted
    batch moments, and the results are combined as
    ``sqrt(T) * sum_r tau_r(x) * xhat_r``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != table.dim:
        raise ShapeError(f"expected (M, {table.dim}) feature vectors, got {X.shape}")
    t = table.n_contexts
    tau = responsibilities(context_gmm(table), X)
    totals = tau.sum(axis=0)
    out = np.zeros_like(X)
    skipped = []
    for r in range(t):
        if totals[r] < VANISHING_RESPONSIBILITY:
            skipped.append(r)
            continue
        w = tau[:, r] / totals[r]
        mean = w @ X
        v = X - mean
        var = w @ (v * v)
        out += tau[:, r:r + 1] * (v / np.sqrt(var + epsilon))
    return math.sqrt(t) * out, skipped


def cn_plus_inference(x, table: ContextTable, epsilon: float = 1e-5, mode: str = "channels",
                      patch: tuple[int, int] = (4, 4)) -> np.ndarray:
    """Frozen-table CN+ for ``(M, D)`` vectors or ``(N, C, H, W)`` activations."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if arr.ndim == 2:
        return cn_plus_rows(arr, table, epsilon)[0]
    if arr.ndim != 4:
        raise ShapeError(f"expected rank 2 or 4 input, got {arr.shape}")
    if mode == "channels":
        out, _ = cn_plus_rows(rows_array(arr), table, epsilon)
        n, c, h, w = arr.shape
        return out.reshape(n, h, w, c).transpose(0, 3, 1, 2).copy()
    p = to_patches(Tensor(arr), patch)
    out, _ = cn_plus_rows(p.data.reshape(-1, p.shape[2]), table, epsilon)
    return from_patches(Tensor(out.reshape(p.shape)), arr.shape, patch).data


def style_transfer(x, from_ctx: int, to_ctx: int, table: ContextTable, epsilon: float = 1e-5) -> np.ndarray:
    """Normalize with one context's statistics and denormalize with another's, per channel."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    for r in (from_ctx, to_ctx):
        if not 0 <= int(r) < table.n_contexts:
            raise InputError(f"context id {r} outside [0, {table.n_contexts})")
    if arr.ndim not in (3, 4) or arr.shape[-3] != table.dim:
        raise ShapeError(f"expected (..., {table.dim}, H, W) input, got {arr.shape}")
    mu, sigma2 = table.frozen_statistics()
    sd_a = np.sqrt(sigma2[from_ctx] + epsilon)
    sd_b = np.sqrt(sigma2[to_ctx] + epsilon)
    scale = sd_b / sd_a
    shift = mu[to_ctx] - mu[from_ctx] * scale
    return arr * scale[:, None, None] + shift[:, None, None]
