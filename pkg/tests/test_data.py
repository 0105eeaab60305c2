import gzip
import itertools
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from normlab.data import (LabeledImageSet, SyntheticMixtureSpec, assign_contexts, augment, channel_stats,
                          gen_synthetic_mixture, load_cifar_binary, load_idx, load_named, load_stats,
                          make_blended, save_stats, standardize_images, train_val_split, write_cifar_binary,
                          write_idx)
from normlab.context import write_assignment
from normlab.exceptions import FormatError, InputError


def _u8(rng, *shape):
    return rng.integers(0, 256, size=shape, dtype=np.uint8)


def test_idx_round_trip(tmp_path, rng):
    imgs, labs = _u8(rng, 5, 28, 28), rng.integers(0, 10, 5).astype(np.uint8)
    write_idx(tmp_path / "i", tmp_path / "l", imgs, labs)
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.images.shape == (5, 1, 28, 28)
    np.testing.assert_array_equal(ds.images[:, 0], imgs / 255.0)
    np.testing.assert_array_equal(ds.labels, labs)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_idx_gzip(tmp_path, rng):
    write_idx(tmp_path / "i", tmp_path / "l", _u8(rng, 2, 4, 4), np.array([1, 2], np.uint8))
    for name in ("i", "l"):
        (tmp_path / f"{name}.gz").write_bytes(gzip.compress((tmp_path / name).read_bytes()))
    assert len(load_idx(tmp_path / "i.gz", tmp_path / "l.gz")) == 2


def test_idx_truncation_and_magic(tmp_path, rng):
    write_idx(tmp_path / "i", tmp_path / "l", _u8(rng, 3, 4, 4), np.array([1, 2, 3], np.uint8))
    blob = (tmp_path / "i").read_bytes()
    (tmp_path / "i").write_bytes(blob[:-5])
    with pytest.raises(FormatError) as info:
        load_idx(tmp_path / "i", tmp_path / "l")
    assert info.value.offset == len(blob) - 5
    (tmp_path / "i").write_bytes(b"\x00\x00\x08\x01" + blob[4:])
    with pytest.raises(FormatError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_cifar10_and_100_layouts(tmp_path, rng):
    imgs = _u8(rng, 4, 3, 32, 32)
    write_cifar_binary(tmp_path / "c10.bin", imgs, [0, 3, 9, 1])
    ds = load_cifar_binary(tmp_path / "c10.bin", "cifar10")
    np.testing.assert_array_equal(ds.images, imgs / 255.0)
    np.testing.assert_array_equal(ds.labels, [0, 3, 9, 1])
    write_cifar_binary(tmp_path / "c100.bin", imgs, [5, 99, 0, 42], coarse=[1, 19, 0, 7])
    ds = load_cifar_binary(tmp_path / "c100.bin", "cifar100")
    np.testing.assert_array_equal(ds.labels, [5, 99, 0, 42])
    np.testing.assert_array_equal(ds.superclass, [1, 19, 0, 7])
    assert ds.num_superclasses == 20


def test_cifar_truncated_record(tmp_path, rng):
    write_cifar_binary(tmp_path / "c.bin", _u8(rng, 2, 3, 32, 32), [0, 1])
    (tmp_path / "c.bin").write_bytes((tmp_path / "c.bin").read_bytes()[:-1])
    with pytest.raises(FormatError) as info:
        load_cifar_binary(tmp_path / "c.bin")
    assert info.value.offset == 3073


def test_missing_file_is_input_error(tmp_path):
    with pytest.raises(InputError):
        load_named("cifar100", tmp_path, "train")


def test_blending_geometry_and_labels(rng):
    a = LabeledImageSet(rng.random((3, 3, 32, 32)), np.array([0, 99, 5]), 100, "cifar100")
    b = LabeledImageSet(rng.random((2, 1, 28, 28)), np.array([0, 9]), 10, "mnist")
    blend = make_blended([a, b])
    assert blend.images.shape == (5, 3, 32, 32) and blend.num_classes == 110
    np.testing.assert_array_equal(blend.labels, [0, 99, 5, 100, 109])
    np.testing.assert_array_equal(blend.origin, [0, 0, 0, 1, 1])
    for ch in range(3):
        np.testing.assert_array_equal(blend.images[3, ch, 2:30, 2:30], b.images[0, 0])
    assert blend.images[3, :, :2].sum() == 0.0
    assert blend.source_label(109) == (1, 9) and blend.source_label(99) == (0, 99)
    ctx = assign_contexts(blend, "dataset")
    assert ctx.n_contexts == 2 and ctx.provenance == "dataset"
    assert assign_contexts(blend.subset([3, 0]), "dataset").ids.tolist() == [1, 0]


def test_superclass_rule(rng):
    ds = LabeledImageSet(rng.random((3, 3, 2, 2)), np.array([0, 1, 2]), 100, "cifar100",
                         superclass=np.array([4, 4, 19]), num_superclasses=20)
    ctx = assign_contexts(ds, "superclass")
    assert ctx.ids.tolist() == [4, 4, 19] and ctx.n_contexts == 20
    with pytest.raises(InputError):
        assign_contexts(LabeledImageSet(ds.images, ds.labels, 100, "x"), "superclass")


def test_gmm_rule_recovers_clusters():
    rng = np.random.default_rng(0)
    truth = np.repeat(np.arange(3), 200)
    centers = rng.normal(size=(3, 3 * 4 * 4)) * 3
    images = (centers[truth] + rng.normal(size=(600, 48))).reshape(600, 3, 4, 4)
    ctx = assign_contexts(LabeledImageSet(images, np.zeros(600, int), 2, "x"), "gmm", k=3, seed=0)
    best = max(np.mean(np.array(p)[ctx.ids] == truth) for p in itertools.permutations(range(3)))
    assert best >= 0.99 and ctx.provenance == "gmm-component"
    again = assign_contexts(LabeledImageSet(images, np.zeros(600, int), 2, "x"), "gmm", gmm=ctx.model)
    np.testing.assert_array_equal(again.ids, ctx.ids)


def test_custom_rule(tmp_path, rng):
    ds = LabeledImageSet(rng.random((3, 1, 2, 2)), np.array([0, 1, 0]), 2, "x")
    write_assignment(tmp_path / "a.csv", [1, 0, 1])
    assert assign_contexts(ds, "custom", path=tmp_path / "a.csv").ids.tolist() == [1, 0, 1]
    write_assignment(tmp_path / "b.csv", [1, 0])
    with pytest.raises(InputError):
        assign_contexts(ds, "custom", path=tmp_path / "b.csv")


def test_stats_sidecar(tmp_path, rng):
    x = rng.normal(3, 2, size=(50, 3, 4, 4))
    mean, std = channel_stats(x)
    save_stats(tmp_path / "s.json", mean, std)
    m2, s2 = load_stats(tmp_path / "s.json")
    np.testing.assert_array_equal(m2, mean)
    z = standardize_images(x, m2, s2)
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=(0, 2, 3)), 1, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 999), st.booleans(), st.integers(0, 2))
def test_augment_preserves_shape_and_pixels(seed, flip, pad):
    x = np.random.default_rng(seed).random((4, 2, 5, 5))
    out = augment(x, np.random.default_rng(seed), flip, pad)
    assert out.shape == x.shape
    if not pad:
        # a flip only permutes pixels within each row
        np.testing.assert_allclose(np.sort(out, axis=3), np.sort(x, axis=3))


def test_synthetic_mixture_contract():
    spec = SyntheticMixtureSpec(n_contexts=3, samples_per_context=50, seed=1)
    train, ctx = gen_synthetic_mixture(spec, "train")
    test, _ = gen_synthetic_mixture(spec, "test", 20)
    assert len(train) == 150 and len(test) == 60 and ctx.n_contexts == 3
    again, _ = gen_synthetic_mixture(spec, "train")
    np.testing.assert_array_equal(again.images, train.images)
    assert not np.array_equal(test.images[:20], train.images[:20])
    means, stds = spec.context_statistics()
    assert np.all(stds >= 0.3) and np.all(stds <= 3.0)
    assert spec.separation_ratio() > 1.0


def test_train_val_split_partitions():
    tr, va = train_val_split(100, 0.1, 0)
    assert va.size == 10 and sorted(np.concatenate([tr, va]).tolist()) == list(range(100))


# checks against the real datasets run only when their directories are provided

@pytest.mark.skipif(not os.environ.get("NORMLAB_CIFAR10_DIR"), reason="NORMLAB_CIFAR10_DIR not set")
def test_real_cifar10_sizes():
    root = os.environ["NORMLAB_CIFAR10_DIR"]
    assert len(load_named("cifar10", root, "train")) == 50000
    assert len(load_named("cifar10", root, "test")) == 10000


@pytest.mark.skipif(not os.environ.get("NORMLAB_CIFAR100_DIR"), reason="NORMLAB_CIFAR100_DIR not set")
def test_real_cifar100_superclasses():
    ds = load_named("cifar100", os.environ["NORMLAB_CIFAR100_DIR"], "train")
    assert len(ds) == 50000 and len(np.unique(ds.superclass)) == 20 and len(np.unique(ds.labels)) == 100


@pytest.mark.skipif(not os.environ.get("NORMLAB_MNIST_DIR"), reason="NORMLAB_MNIST_DIR not set")
def test_real_mnist_sizes():
    root = os.environ["NORMLAB_MNIST_DIR"]
    assert load_named("mnist", root, "train").images.shape == (60000, 1, 28, 28)
    assert len(load_named("mnist", root, "test")) == 10000
