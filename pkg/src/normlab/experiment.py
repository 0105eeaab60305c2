"""Assemble datasets and models from an :class:`ExperimentConfig` and run them."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, int_list
from .context import ContextAssignment, write_assignment
from .data import (LabeledImageSet, SyntheticMixtureSpec, assign_contexts, channel_stats, gen_synthetic_mixture,
                   load_named, make_blended, save_stats, standardize_images, train_val_split)
from .exceptions import ConfigurationError
from .gmm import save_gmm
from .nn import ContextInput, Network, build_convnet, build_mlp, build_patchnet, small_convnet_spec, cifar_convnet_spec
from .norms import NormSpec
from .training import DataSplits, RunMetrics, Split, train

logger = logging.getLogger(__name__)


@dataclass
class PreparedData:
    splits: DataSplits
    shape: tuple[int, int, int]
    num_classes: int
    n_contexts: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    train_assignment: ContextAssignment | None = None
    test_assignment: ContextAssignment | None = None


def synthetic_spec(cfg: ExperimentConfig) -> SyntheticMixtureSpec:
    d = cfg.data
    return SyntheticMixtureSpec(n_contexts=d.n_contexts, samples_per_context=d.samples_per_context,
                                n_classes=d.n_classes, channels=d.channels, size=d.image_size,
                                separation=d.separation, pixel_noise=d.pixel_noise, seed=d.data_seed)


def _source_dir(cfg: ExperimentConfig, name: str) -> str:
    path = getattr(cfg.data, f"{name}_dir", "")
    if not path:
        raise ConfigurationError(f"[data] {name}_dir must point at the {name} files")
    return path


def _load_raw(cfg: ExperimentConfig):
    d = cfg.data
    if d.dataset == "synthetic":
        spec = synthetic_spec(cfg)
        train_set, train_ctx = gen_synthetic_mixture(spec, "train")
        test_set, test_ctx = gen_synthetic_mixture(spec, "test", d.test_per_context)
        return train_set, test_set, train_ctx, test_ctx
    names = [s.strip() for s in d.sources.split(",") if s.strip()] if d.dataset == "blend" else [d.dataset]
    trains = [load_named(n, _source_dir(cfg, n), "train") for n in names]
    tests = [load_named(n, _source_dir(cfg, n), "test") for n in names]
    if d.dataset == "blend":
        return make_blended(trains), make_blended(tests), None, None
    return trains[0], tests[0], None, None


def _head(dataset: LabeledImageSet, n: int, seed: int, generated=None):
    if not n or n >= len(dataset):
        return dataset, generated
    keep = np.sort(np.random.default_rng([seed, 5]).permutation(len(dataset))[:n])
    return dataset.subset(keep), None if generated is None else generated.subset(keep)


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    d, c = cfg.data, cfg.context
    train_set, test_set, train_gen, test_gen = _load_raw(cfg)
    train_set, train_gen = _head(train_set, d.subset, d.data_seed, train_gen)
    test_set, test_gen = _head(test_set, d.test_subset, d.data_seed + 1, test_gen)
    mean = std = None
    if d.standardize:
        mean, std = channel_stats(train_set.images)
        train_set.images = standardize_images(train_set.images, mean, std)
        test_set.images = standardize_images(test_set.images, mean, std)

    train_assign = test_assign = None
    if c.rule == "synthetic":
        if train_gen is None:
            raise ConfigurationError("[context] rule 'synthetic' needs dataset = synthetic")
        train_assign, test_assign = train_gen, test_gen
    elif c.rule == "gmm":
        train_assign = assign_contexts(train_set, "gmm", k=c.gmm_components, seed=cfg.train.seed,
                                       max_iter=c.em_max_iter, tol=c.em_tol)
        test_assign = assign_contexts(test_set, "gmm", gmm=train_assign.model)
    elif c.rule == "custom":
        train_assign = assign_contexts(train_set, "custom", path=c.assignment_file)
        if c.test_assignment_file:
            test_assign = assign_contexts(test_set, "custom", path=c.test_assignment_file)
    elif c.rule != "none":
        train_assign = assign_contexts(train_set, c.rule)
        test_assign = assign_contexts(test_set, c.rule)
    n_contexts = c.n_contexts or (train_assign.n_contexts if train_assign is not None else 1)
    if train_assign is not None and train_assign.n_contexts > n_contexts:
        raise ConfigurationError(f"[context] n_contexts={n_contexts} but the rule yields {train_assign.n_contexts}")

    tr, va = train_val_split(len(train_set), d.val_fraction, d.data_seed)
    ids = None if train_assign is None else train_assign.ids
    full = Split(train_set.images, train_set.labels, train_set.num_classes, ids)
    test = Split(test_set.images, test_set.labels, test_set.num_classes,
                 None if test_assign is None else test_assign.ids)
    splits = DataSplits(full.take(tr), full.take(va) if va.size else None, test)
    return PreparedData(splits, train_set.shape, train_set.num_classes, n_contexts, mean, std,
                        train_assign, test_assign)


def build_model(cfg: ExperimentConfig, shape, num_classes: int, n_contexts: int = 1) -> Network:
    m = cfg.model
    norm = NormSpec.parse(m.norm, epsilon=m.epsilon, momentum=m.momentum)
    ci = None
    if m.context_input != "none":
        ci = ContextInput(n_contexts, m.context_input, m.embed_dim, m.epsilon, (m.patch_size, m.patch_size))
    seed = cfg.train.seed
    if m.arch == "cifar":
        if tuple(shape) != (3, 32, 32):
            raise ConfigurationError(f"the cifar network expects 3x32x32 inputs, got {tuple(shape)}")
        return build_convnet(cifar_convnet_spec(num_classes, norm, m.mixture_slot or "conv3", ci), seed)
    if m.arch == "small":
        c, h, w = shape
        if h != w:
            raise ConfigurationError(f"the small network expects square inputs, got {h}x{w}")
        spec = small_convnet_spec(num_classes, c, h, int_list(m.widths), norm, m.mixture_slot or "conv2", ci)
        return build_convnet(spec, seed)
    if m.arch == "mlp":
        return build_mlp(shape, int_list(m.hidden), num_classes, seed, norm=m.norm, context_input=ci)
    return build_patchnet(shape, num_classes, (m.patch_size, m.patch_size), m.embed_dim, seed, context_input=ci)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> tuple[RunMetrics, Network, PreparedData]:
    data = prepare_data(cfg)
    model = build_model(cfg, data.shape, data.num_classes, data.n_contexts)
    logger.info("model with %d parameters on %d training samples", model.params.count(), len(data.splits.train))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if data.mean is not None:
            save_stats(out / "dataset_stats.json", data.mean, data.std)
        if data.train_assignment is not None:
            write_assignment(out / "contexts_train.csv", data.train_assignment.ids)
            if data.train_assignment.model is not None:
                save_gmm(data.train_assignment.model, out / "context_gmm.json")
    metrics = train(model, data.splits, cfg, out_dir)
    return metrics, model, data
