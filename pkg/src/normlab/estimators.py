"""scikit-learn style classifier wrapping the network builders and training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import functional as F
from .config import ExperimentConfig
from .exceptions import InputError
from .experiment import build_model
from .tensor import Tensor
from .training import DataSplits, Split, batches, train


def check_images(X) -> np.ndarray:
    """Validate ``X`` as ``(N, C, H, W)``; 2-D input is read as ``(N, D, 1, 1)``."""
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim == 2:
        return X[:, :, None, None]
    if X.ndim != 4:
        raise InputError(f"expected (N, C, H, W) or (N, D) input, got shape {X.shape}")
    return X


def check_contexts(contexts, n: int, n_contexts: int | None = None) -> np.ndarray | None:
    if contexts is None:
        return None
    ids = np.asarray(contexts)
    if ids.shape != (n,) or not np.issubdtype(ids.dtype, np.integer):
        raise InputError(f"contexts must be {n} integer ids, got shape {ids.shape} dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or (n_contexts is not None and ids.max() >= n_contexts)):
        raise InputError(f"context ids must lie in [0, {n_contexts})")
    return ids.astype(np.int64)


class NormNetClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier with a selectable normalizer.

    ``norm`` is any norm string (``"batch"``, ``"group:4"``, ``"mixture:3"``
    ...). ``context_input`` adds a context-normalization input layer, in which
    case ``fit`` and ``predict`` take per-sample context ids.

        >>> clf = NormNetClassifier(arch="mlp", hidden="16", epochs=2)
        >>> clf.fit(X, y).score(X, y)  # doctest: +SKIP
    """

    def __init__(self, arch="small", norm="batch", context_input="none", widths="16,32", hidden="64",
                 embed_dim=64, lr=1e-3, weight_decay=0.0, batch_size=64, epochs=10, inference="cn",
                 random_state=0):
        self.arch = arch
        self.norm = norm
        self.context_input = context_input
        self.widths = widths
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.inference = inference
        self.random_state = random_state

    def _config(self) -> ExperimentConfig:
        cfg = ExperimentConfig()
        cfg.model.arch, cfg.model.norm = self.arch, self.norm
        cfg.model.context_input = self.context_input
        cfg.model.widths, cfg.model.hidden = self.widths, self.hidden
        cfg.model.embed_dim = self.embed_dim
        cfg.context.rule = "custom" if self.context_input != "none" else "none"
        cfg.optim.lr, cfg.optim.weight_decay = self.lr, self.weight_decay
        cfg.train.batch_size, cfg.train.epochs = self.batch_size, self.epochs
        cfg.train.seed, cfg.train.inference = int(self.random_state), self.inference
        cfg.train.checkpoint = False
        return cfg.validate()

    def fit(self, X, y, contexts=None):
        X = check_images(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise InputError(f"y must have {X.shape[0]} labels, got shape {y.shape}")
        self.classes_, codes = np.unique(y, return_inverse=True)
        cfg = self._config()
        ids = check_contexts(contexts, X.shape[0])
        if cfg.model.context_input != "none" and ids is None:
            raise InputError("a context input layer needs per-sample contexts")
        self.n_contexts_ = 1 if ids is None else int(ids.max()) + 1
        self.model_ = build_model(cfg, X.shape[1:], len(self.classes_), self.n_contexts_)
        split = Split(X, codes, len(self.classes_), ids)
        self.metrics_ = train(self.model_, DataSplits(split, None, None), cfg)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X, contexts=None):
        check_is_fitted(self, "model_")
        X = check_images(X)
        ids = check_contexts(contexts, X.shape[0], self.n_contexts_)
        if self.model_.uses_contexts and ids is None and self.inference == "cn":
            raise InputError("context normalization with choice 'cn' needs contexts; pass them or use 'cn+'")
        out = []
        for idx in batches(X.shape[0], max(self.batch_size, 2)):
            ctx = None if ids is None else ids[idx]
            out.append(self.model_.forward(Tensor(X[idx]), ctx, training=False, inference=self.inference).data)
        return np.concatenate(out)

    def predict_proba(self, X, contexts=None):
        return F.softmax(Tensor(self.decision_function(X, contexts)), axis=1).data

    def predict(self, X, contexts=None):
        return self.classes_[np.argmax(self.decision_function(X, contexts), axis=1)]

    def score(self, X, y, sample_weight=None, contexts=None):
        return float(np.average(self.predict(X, contexts) == np.asarray(y), weights=sample_weight))
