"""Dataset ingestion, synthetic mixtures, context assignment and preprocessing."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .context import ContextAssignment, read_assignment
from .exceptions import ConfigurationError, FormatError, InputError
from .gmm import GaussianMixture, responsibilities

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_PIXELS = 3 * 32 * 32


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (N, C, H, W) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str = "unnamed"
    superclass: np.ndarray | None = None
    num_superclasses: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise InputError(f"{self.name}: images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"{self.name}: labels must lie in [0, {self.num_classes})")
        if self.superclass is not None:
            self.superclass = np.asarray(self.superclass, dtype=np.int64)
            if self.superclass.max(initial=0) >= (self.num_superclasses or 0):
                raise InputError(f"{self.name}: superclass ids must lie in [0, {self.num_superclasses})")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "LabeledImageSet":
        return replace(self, images=self.images[index], labels=self.labels[index],
                       superclass=None if self.superclass is None else self.superclass[index])


@dataclass
class BlendedSet(LabeledImageSet):
    origin: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    label_offsets: tuple[int, ...] = ()
    source_names: tuple[str, ...] = ()

    def subset(self, index) -> "BlendedSet":
        out = super().subset(index)
        out.origin = self.origin[index]
        return out

    def source_label(self, unified) -> tuple[int, int]:
        """Invert the unified label space into ``(source index, source label)``."""
        unified = int(unified)
        offsets = np.asarray(self.label_offsets)
        src = int(np.searchsorted(offsets, unified, side="right") - 1)
        return src, unified - int(offsets[src])


# --------------------------------------------------------------------------
# binary formats

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def _idx_header(blob: bytes, expected_magic: int, ndim: int, what: str) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(blob) < need:
        raise FormatError(f"{what}: header truncated ({len(blob)} bytes, need {need})", offset=len(blob))
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise FormatError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    dims = struct.unpack(f">{ndim}I", blob[4:need])
    expected = need + int(np.prod(dims))
    if len(blob) != expected:
        raise FormatError(f"{what}: payload is {len(blob) - need} bytes, dims {dims} need {expected - need}",
                          offset=min(len(blob), expected))
    return dims


def load_idx(images_path, labels_path, num_classes: int = 10, name: str = "mnist") -> LabeledImageSet:
    """Read an IDX image/label pair; pixels are scaled to ``[0, 1]``."""
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)
    n, rows, cols = _idx_header(img, IDX_IMAGES_MAGIC, 3, str(images_path))
    (m,) = _idx_header(lab, IDX_LABELS_MAGIC, 1, str(labels_path))
    if m != n:
        raise FormatError(f"{labels_path}: {m} labels for {n} images", offset=4)
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise FormatError(f"{labels_path}: label {labels.max()} >= {num_classes}", offset=8 + int(labels.argmax()))
    return LabeledImageSet(pixels / 255.0, labels, num_classes, name)


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels_u8: np.ndarray) -> None:
    n, rows, cols = images_u8.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols)
                                  + np.ascontiguousarray(images_u8, dtype=np.uint8).tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels_u8.size)
                                  + np.ascontiguousarray(labels_u8, dtype=np.uint8).tobytes())


def load_cifar_binary(paths, variant: str = "cifar10") -> LabeledImageSet:
    """Read one or more CIFAR binary batch files.

    CIFAR-10 records are ``<label><3072 pixels>``; CIFAR-100 records are
    ``<coarse><fine><3072 pixels>`` and populate the superclass ids.
    """
    if variant not in ("cifar10", "cifar100"):
        raise ConfigurationError(f"unknown CIFAR variant {variant!r}")
    paths = [paths] if isinstance(paths, (str, Path)) else list(paths)
    n_label = 1 if variant == "cifar10" else 2
    record = n_label + CIFAR_PIXELS
    chunks = []
    for p in paths:
        blob = _read_bytes(p)
        if len(blob) % record:
            raise FormatError(f"{p}: size {len(blob)} is not a multiple of the {record}-byte record",
                              offset=len(blob) - len(blob) % record)
        chunks.append(np.frombuffer(blob, dtype=np.uint8).reshape(-1, record))
    rows = np.concatenate(chunks) if chunks else np.zeros((0, record), dtype=np.uint8)
    images = rows[:, n_label:].reshape(-1, 3, 32, 32) / 255.0
    if variant == "cifar10":
        return LabeledImageSet(images, rows[:, 0], 10, "cifar10")
    return LabeledImageSet(images, rows[:, 1], 100, "cifar100", superclass=rows[:, 0], num_superclasses=20)


def write_cifar_binary(path, images_u8: np.ndarray, labels, coarse=None) -> None:
    n = images_u8.shape[0]
    cols = [np.asarray(labels, dtype=np.uint8).reshape(n, 1)]
    if coarse is not None:
        cols.insert(0, np.asarray(coarse, dtype=np.uint8).reshape(n, 1))
    body = np.concatenate(cols + [images_u8.reshape(n, -1).astype(np.uint8)], axis=1)
    Path(path).write_bytes(body.tobytes())


def load_named(name: str, root, split: str) -> LabeledImageSet:
    """Load a standard dataset from a directory using the canonical file names."""
    root = Path(root)
    if name == "cifar10":
        files = [root / f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else [root / "test_batch.bin"]
        return load_cifar_binary(files, "cifar10")
    if name == "cifar100":
        return load_cifar_binary(root / ("train.bin" if split == "train" else "test.bin"), "cifar100")
    if name == "mnist":
        stem = "train" if split == "train" else "t10k"

        def pick(kind):
            for cand in (root / f"{stem}-{kind}-idx{3 if kind == 'images' else 1}-ubyte",):
                for p in (cand, cand.with_name(cand.name + ".gz")):
                    if p.exists():
                        return p
            return cand

        return load_idx(pick("images"), pick("labels"))
    raise ConfigurationError(f"unknown dataset {name!r}")


# --------------------------------------------------------------------------
# preprocessing

def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return images.mean(axis=(0, 2, 3)), np.maximum(images.std(axis=(0, 2, 3)), 1e-12)


def standardize_images(images: np.ndarray, mean, std) -> np.ndarray:
    return (images - np.asarray(mean)[None, :, None, None]) / np.asarray(std)[None, :, None, None]


def save_stats(path, mean, std) -> None:
    Path(path).write_text(json.dumps({"mean": list(map(float, mean)), "std": list(map(float, std))}))


def load_stats(path) -> tuple[np.ndarray, np.ndarray]:
    doc = json.loads(Path(path).read_text())
    return np.asarray(doc["mean"], dtype=np.float64), np.asarray(doc["std"], dtype=np.float64)


def augment(images: np.ndarray, rng: np.random.Generator, flip: bool = True, crop_pad: int = 0) -> np.ndarray:
    """Random horizontal flip and random crop from a zero-padded border."""
    out = images.copy()
    n, _, h, w = images.shape
    if flip:
        mask = rng.random(n) < 0.5
        out[mask] = out[mask, :, :, ::-1]
    if crop_pad:
        padded = np.pad(out, ((0, 0), (0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad)))
        dy = rng.integers(0, 2 * crop_pad + 1, size=n)
        dx = rng.integers(0, 2 * crop_pad + 1, size=n)
        for i in range(n):
            out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out


# --------------------------------------------------------------------------
# blending and contexts

def _fit_geometry(images: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    n, ci, hi, wi = images.shape
    if ci != c:
        if ci != 1:
            raise InputError(f"cannot map {ci} channels onto {c}")
        images = np.repeat(images, c, axis=1)
    top, left = (h - hi) // 2, (w - wi) // 2
    out = np.zeros((n, c, h, w))
    out[:, :, top:top + hi, left:left + wi] = images
    return out


def make_blended(sets) -> BlendedSet:
    """Concatenate datasets on a common geometry with dataset-of-origin contexts.

    Grayscale sources are replicated over channels and smaller images are
    centered on a zero canvas. Labels are offset so the label spaces do not
    overlap.
    """
    sets = list(sets)
    if len(sets) < 2:
        raise InputError("blending needs at least two datasets")
    for s in sets:
        if len(s) == 0:
            raise InputError(f"source {s.name!r} is empty")
    c = max(s.shape[0] for s in sets)
    h = max(s.shape[1] for s in sets)
    w = max(s.shape[2] for s in sets)
    images, labels, origin, offsets = [], [], [], []
    offset = 0
    for r, s in enumerate(sets):
        images.append(_fit_geometry(s.images, c, h, w))
        labels.append(s.labels + offset)
        origin.append(np.full(len(s), r, dtype=np.int64))
        offsets.append(offset)
        offset += s.num_classes
    name = "+".join(s.name for s in sets)
    return BlendedSet(np.concatenate(images), np.concatenate(labels), offset, name,
                      origin=np.concatenate(origin), label_offsets=tuple(offsets),
                      source_names=tuple(s.name for s in sets))


def assign_contexts(dataset: LabeledImageSet, rule: str, k: int = 3, seed: int = 0, path=None,
                    gmm=None, max_iter: int = 200, tol: float = 1e-6) -> ContextAssignment:
    """Give every sample exactly one context id.

    ``gmm`` rules fit a diagonal mixture to the flattened images (unless an
    already fitted :class:`~normlab.gmm.GmmModel` is passed, e.g. to label a
    test split consistently) and use the most probable component.
    """
    if rule == "superclass":
        if dataset.superclass is None:
            raise InputError(f"{dataset.name} has no superclass ids")
        return ContextAssignment(dataset.superclass, dataset.num_superclasses, "superclass")
    if rule == "dataset":
        if not isinstance(dataset, BlendedSet):
            raise InputError("the dataset rule needs a blended dataset")
        return ContextAssignment(dataset.origin, len(dataset.source_names), "dataset")
    if rule == "gmm":
        X = dataset.images.reshape(len(dataset), -1)
        if gmm is None:
            gmm = GaussianMixture(k, max_iter=max_iter, tol=tol, random_state=seed).fit(X).model_
        ids = np.argmax(responsibilities(gmm, X), axis=1)
        return ContextAssignment(ids, gmm.k, "gmm-component", model=gmm)
    if rule == "custom":
        if path is None:
            raise ConfigurationError("custom context rule needs an assignment file")
        out = read_assignment(path)
        if len(out) != len(dataset):
            raise InputError(f"assignment file has {len(out)} rows for {len(dataset)} samples")
        return out
    raise ConfigurationError(f"unknown context rule {rule!r}")


# --------------------------------------------------------------------------
# synthetic mixtures

@dataclass
class SyntheticMixtureSpec:
    """Channel-statistics mixture: each context applies its own per-channel affine map.

    A latent code ``u`` (one value per channel) plus pixel noise forms a
    latent image ``z``; context ``r`` renders it as ``mean[r] + std[r] * z``.
    The class is ``argmax(A @ u)`` for a seeded matrix ``A``, so it depends
    on the latent only.
    """

    n_contexts: int = 3
    samples_per_context: int = 2000
    n_classes: int = 4
    channels: int = 3
    size: int = 8
    separation: float = 4.0
    std_range: tuple[float, float] = (0.3, 3.0)
    pixel_noise: float = 0.5
    means: np.ndarray | None = None
    stds: np.ndarray | None = None
    seed: int = 0

    def context_statistics(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, 0])
        if self.means is not None:
            means = np.asarray(self.means, dtype=np.float64)
        else:
            means = np.zeros((self.n_contexts, self.channels))
            for r in range(self.n_contexts):
                for _ in range(1000):
                    cand = rng.uniform(-1.0, 1.0, self.channels) * self.separation * self.n_contexts / 2
                    if all(np.linalg.norm(cand - means[q]) >= self.separation for q in range(r)):
                        break
                means[r] = cand
        if self.stds is not None:
            stds = np.asarray(self.stds, dtype=np.float64)
        else:
            lo, hi = np.log(self.std_range[0]), np.log(self.std_range[1])
            stds = np.exp(rng.uniform(lo, hi, (self.n_contexts, self.channels)))
        return means, stds

    def class_matrix(self) -> np.ndarray:
        return np.random.default_rng([self.seed, 1]).normal(size=(self.n_classes, self.channels))

    def separation_ratio(self) -> float:
        """Smallest pairwise distance between context means over the largest context std."""
        means, stds = self.context_statistics()
        if self.n_contexts < 2:
            return float("inf")
        d = min(np.linalg.norm(means[a] - means[b])
                for a in range(self.n_contexts) for b in range(a + 1, self.n_contexts))
        return float(d / stds.max())


def gen_synthetic_mixture(spec: SyntheticMixtureSpec, split: str = "train",
                          n_per_context: int | None = None) -> tuple[LabeledImageSet, ContextAssignment]:
    means, stds = spec.context_statistics()
    a = spec.class_matrix()
    n_per = spec.samples_per_context if n_per_context is None else n_per_context
    rng = np.random.default_rng([spec.seed, 2, {"train": 0, "test": 1, "val": 2}[split]])
    t, c, s = spec.n_contexts, spec.channels, spec.size
    ids = np.repeat(np.arange(t), n_per)
    u = rng.normal(size=(ids.size, c))
    z = u[:, :, None, None] + spec.pixel_noise * rng.normal(size=(ids.size, c, s, s))
    images = means[ids][:, :, None, None] + stds[ids][:, :, None, None] * z
    labels = np.argmax(u @ a.T, axis=1)
    order = rng.permutation(ids.size)
    data = LabeledImageSet(images[order], labels[order], spec.n_classes, f"synthetic-{split}")
    return data, ContextAssignment(ids[order], t, "custom")


def train_val_split(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng([seed, 3]).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])
