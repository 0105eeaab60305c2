"""Training and evaluation loops with per-epoch metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import functional as F
from .config import ExperimentConfig
from .context import ContextAssignment
from .data import augment
from .exceptions import DivergedError, InputError
from .nn import Network
from .optim import OptimizerState, rmsprop_step
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "train_loss", "val_loss", "test_acc", "top5_acc", "seconds", "train_acc")
STAGE1_MAX_SAMPLES = 4096


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    contexts: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if isinstance(self.contexts, ContextAssignment):
            self.contexts = self.contexts.ids
        if self.contexts is not None:
            self.contexts = np.asarray(self.contexts, dtype=np.int64)
            if self.contexts.shape != self.labels.shape:
                raise InputError(f"{self.contexts.size} context ids for {self.labels.size} samples")

    def __len__(self) -> int:
        return self.labels.size

    def take(self, index) -> "Split":
        return Split(self.images[index], self.labels[index], self.num_classes,
                     None if self.contexts is None else self.contexts[index])


@dataclass
class DataSplits:
    train: Split
    val: Split | None
    test: Split | None


@dataclass
class RunMetrics:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    top5_acc: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    status: str = "ok"
    message: str = ""

    def append(self, **row) -> None:
        if self.epoch and row["epoch"] <= self.epoch[-1]:
            raise ValueError("epoch indices must increase")
        for key in CSV_COLUMNS:
            getattr(self, key).append(row[key])

    def rows(self):
        for i in range(len(self.epoch)):
            yield {key: getattr(self, key)[i] for key in CSV_COLUMNS}

    def epochs_to_threshold(self, metric: str = "train_acc", threshold: float = 0.95) -> int | None:
        return epochs_to_threshold(self.epoch, getattr(self, metric), threshold)

    def to_csv(self, with_seconds: bool = False) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows():
            out = []
            for key in CSV_COLUMNS:
                v = row[key]
                if key == "seconds" and not with_seconds:
                    v = 0.0
                out.append(v if key == "epoch" else repr(float(v)))
            writer.writerow(out)
        return buf.getvalue()

    def summary(self) -> dict:
        best = int(np.argmin(self.val_loss)) if self.val_loss and np.all(np.isfinite(self.val_loss)) else None
        return {
            "status": self.status,
            "message": self.message,
            "epochs_run": len(self.epoch),
            "final": next(iter(list(self.rows())[-1:]), None),
            "best_val_epoch": None if best is None else self.epoch[best],
            "best_val": None if best is None else dict(list(self.rows())[best]),
            "epochs_to_95_train_acc": self.epochs_to_threshold("train_acc", 0.95),
            "wall_clock_seconds": float(sum(self.seconds)),
        }


def epochs_to_threshold(epochs, values, threshold: float) -> int | None:
    """First epoch whose value reaches ``threshold``."""
    for e, v in zip(epochs, values):
        if v >= threshold:
            return int(e)
    return None


def read_metrics_csv(path) -> RunMetrics:
    out = RunMetrics()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS[:6] if c not in (reader.fieldnames or [])]
        if missing:
            raise InputError(f"{path}: metrics CSV lacks columns {missing}")
        for row in reader:
            out.append(**{k: (int(row[k]) if k == "epoch" else float(row.get(k) or "nan")) for k in CSV_COLUMNS})
    return out


# --------------------------------------------------------------------------

def batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Index batches over ``n`` samples; a trailing batch of one is merged into its predecessor."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] < 2:
        starts.pop()
    for i, s in enumerate(starts):
        end = starts[i + 1] if i + 1 < len(starts) else n
        yield order[s:end]


def _contexts_for(model: Network, split: Split, index, inference: str, training: bool):
    if not model.uses_contexts:
        return None
    if split.contexts is None:
        if training or inference == "cn":
            raise InputError("this model normalizes by context; the 'cn' choice needs a context assignment")
        return None
    return split.contexts[index]


def evaluate(model: Network, split: Split, inference: str = "cn", batch_size: int = 256) -> dict:
    """Frozen-parameter loss, accuracy and top-5 accuracy."""
    if len(split) == 0:
        raise InputError("cannot evaluate on an empty split")
    total_loss, correct, top5 = 0.0, 0, 0
    k = min(5, split.num_classes)
    for idx in batches(len(split), batch_size):
        ctx = _contexts_for(model, split, idx, inference, training=False)
        logits = model.forward(Tensor(split.images[idx]), ctx, training=False, inference=inference).data
        y = split.labels[idx]
        total_loss += float(F.softmax_cross_entropy(Tensor(logits), y).data) * idx.size
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
        # ties broken towards lower class index, like argmax
        rank = np.argsort(-logits, axis=1, kind="stable")[:, :k]
        top5 += int(np.sum(np.any(rank == y[:, None], axis=1)))
    n = len(split)
    return {"loss": total_loss / n, "accuracy": correct / n, "top5": top5 / n}


def fit_mixture_layers(model: Network, split: Split, seed: int, max_iter: int = 200, tol: float = 1e-6,
                       max_samples: int = STAGE1_MAX_SAMPLES, batch_size: int = 256) -> list[str]:
    """Stage one for every unfitted mixture layer: collect activations, run EM, freeze.

    Running statistics of earlier layers are restored afterwards so that the
    collection passes leave the model untouched apart from the new GMMs.
    """
    fitted = []
    for name, layer in model.mixture_layers:
        if layer.mn is not None:
            continue
        snapshot = {k: v.copy() for k, v in model.state_dict().items()}
        order = np.random.default_rng([seed, 7]).permutation(len(split))[:max_samples]
        acts = []
        for idx in batches(order.size, batch_size):
            sel = order[idx]
            ctx = _contexts_for(model, split, sel, "cn", training=True)
            acts.append(model.forward(Tensor(split.images[sel]), ctx, training=True, upto=name).data)
        model.load_state_dict(snapshot)
        logger.info("stage 1: fitting mixture at %s on %d samples", name, order.size)
        layer.fit(acts, seed, max_iter=max_iter, tol=tol)
        fitted.append(name)
    if fitted:
        logger.info("stage 2: training with frozen mixtures at %s", ", ".join(fitted))
    return fitted


def _train_epoch(model, split, opt, rng, cfg: ExperimentConfig) -> float:
    total, seen = 0.0, 0
    for idx in batches(len(split), cfg.train.batch_size, rng):
        x = split.images[idx]
        if cfg.data.flip or cfg.data.crop_pad:
            x = augment(x, rng, flip=cfg.data.flip, crop_pad=cfg.data.crop_pad)
        y = split.labels[idx]
        ctx = _contexts_for(model, split, idx, "cn", training=True)
        with Tape() as tape:
            logits = model.forward(Tensor(x), ctx, training=True)
            loss = F.softmax_cross_entropy(logits, y)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergedError(f"non-finite training loss at step {opt.steps}")
        tape.backward(loss)
        rmsprop_step(model.params, opt)
        model.params.zero_grad()
        total += value * idx.size
        seen += idx.size
    return total / seen


def train(model: Network, data: DataSplits, config: ExperimentConfig, out_dir=None) -> RunMetrics:
    """Train ``model`` and optionally write metrics, summary and checkpoint to ``out_dir``.

    Divergence ends the run with status ``"diverged"`` and whatever epochs
    completed; it is not raised.
    """
    t = config.train
    rng = np.random.default_rng([t.seed, 11])
    opt = OptimizerState(config.optim.lr, config.optim.momentum, config.optim.weight_decay,
                         config.optim.alpha, config.optim.eps)
    metrics = RunMetrics()
    fit_mixture_layers(model, data.train, t.seed, config.context.em_max_iter, config.context.em_tol,
                       batch_size=t.batch_size)
    best, stale = math.inf, 0
    for epoch in range(1, t.epochs + 1):
        start = time.perf_counter()
        try:
            train_loss = _train_epoch(model, data.train, opt, rng, config)
        except DivergedError as exc:
            metrics.status, metrics.message = "diverged", str(exc)
            logger.warning("epoch %d diverged: %s", epoch, exc)
            break
        # frozen-parameter accuracy on the training split, the quantity thresholds are taken on
        train_acc = evaluate(model, data.train, "cn", t.batch_size)["accuracy"]
        val = evaluate(model, data.val, t.inference, t.batch_size) if data.val is not None and len(data.val) \
            else {"loss": train_loss}
        test = evaluate(model, data.test, t.inference, t.batch_size) if data.test is not None \
            else {"accuracy": float("nan"), "top5": float("nan")}
        metrics.append(epoch=epoch, train_loss=train_loss, val_loss=val["loss"], test_acc=test["accuracy"],
                       top5_acc=test["top5"], seconds=time.perf_counter() - start, train_acc=train_acc)
        logger.info("epoch %d: train_loss %.4f train_acc %.4f val_loss %.4f test_acc %.4f",
                    epoch, train_loss, train_acc, val["loss"], test["accuracy"])
        if not math.isfinite(val["loss"]):
            metrics.status, metrics.message = "diverged", f"non-finite validation loss at epoch {epoch}"
            break
        if t.patience:
            if val["loss"] < best:
                best, stale = val["loss"], 0
            else:
                stale += 1
                if stale >= t.patience:
                    metrics.message = f"early stop after epoch {epoch}"
                    break
    if out_dir is not None:
        write_artifacts(out_dir, metrics, config, model)
    return metrics


def write_artifacts(out_dir, metrics: RunMetrics, config: ExperimentConfig, model: Network | None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics.to_csv(config.train.wallclock_in_csv))
    summary = metrics.summary()
    summary["config"] = config.to_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=float))
    if model is not None and config.train.checkpoint and metrics.status == "ok":
        checkpoint.save(out / "model.ckpt", model.state_dict())
