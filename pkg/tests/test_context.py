import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from normlab.context import (SIGMA2_FLOOR, ContextAssignment, ContextTable, cn_layer_forward, cn_plus_inference,
                             cn_plus_rows, context_gmm, context_params, from_patches, read_assignment,
                             style_transfer, to_patches, write_assignment)
from normlab.exceptions import FormatError, InputError, ShapeError
from normlab.norms import MnState, mn_forward
from normlab.tensor import Tensor

EPS = 1e-5


def table_with(mu, sigma2):
    """Table whose embedder reproduces the given per-context statistics exactly."""
    mu, sigma2 = np.asarray(mu, float), np.asarray(sigma2, float)
    t, d = mu.shape
    pre = np.log(np.expm1(sigma2 - SIGMA2_FLOOR))
    return ContextTable.from_arrays({"W_r": np.eye(t), "b_r": np.zeros(t), "W_mu": mu, "b_mu": np.zeros(d),
                                     "W_sigma": pre, "b_sigma": np.zeros(d)})


def test_embedder_reproduces_statistics():
    mu, s2 = [[1.0, -2.0], [3.0, 0.5]], [[0.5, 2.0], [4.0, 1.0]]
    got_mu, got_s2 = table_with(mu, s2).frozen_statistics()
    np.testing.assert_allclose(got_mu, mu, atol=1e-12)
    np.testing.assert_allclose(got_s2, s2, atol=1e-12)


def test_initial_variance_is_one():
    _, s2 = ContextTable(4, 3, 8, seed=0).frozen_statistics()
    np.testing.assert_allclose(s2, 1.0, atol=0.05)
    p = context_params(ContextTable(2, 3, 8), 1)
    assert p.mu.shape == (3,) and p.alpha.shape == (8,)


def test_channels_mode_matches_loop(rng):
    mu, s2 = rng.normal(size=(3, 2)), 0.5 + rng.random((3, 2))
    table = table_with(mu, s2)
    x = rng.normal(size=(5, 2, 3, 3))
    ids = np.array([0, 2, 1, 2, 0])
    out = cn_layer_forward(Tensor(x), ids, table, "channels", EPS).data
    for i, r in enumerate(ids):
        for c in range(2):
            np.testing.assert_allclose(out[i, c], (x[i, c] - mu[r, c]) / np.sqrt(s2[r, c] + EPS), atol=1e-12)


def test_patches_mode_matches_loop(rng):
    d = 2 * 2 * 2
    mu, s2 = rng.normal(size=(2, d)), 0.5 + rng.random((2, d))
    table = table_with(mu, s2)
    x = rng.normal(size=(2, 2, 4, 4))
    ids = np.array([1, 0])
    out = cn_layer_forward(Tensor(x), ids, table, "patches", EPS, (2, 2)).data
    for i, r in enumerate(ids):
        for py in range(2):
            for px in range(2):
                block = x[i, :, 2 * py:2 * py + 2, 2 * px:2 * px + 2].reshape(-1)
                got = out[i, :, 2 * py:2 * py + 2, 2 * px:2 * px + 2].reshape(-1)
                np.testing.assert_allclose(got, (block - mu[r]) / np.sqrt(s2[r] + EPS), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.sampled_from([(2, 2), (4, 2), (1, 4)]), st.integers(0, 999))
def test_patch_round_trip(c, patch, seed):
    x = np.random.default_rng(seed).normal(size=(2, c, 4, 4))
    p = to_patches(Tensor(x), patch)
    assert p.shape == (2, 16 // (patch[0] * patch[1]), c * patch[0] * patch[1])
    np.testing.assert_array_equal(from_patches(p, x.shape, patch).data, x)


def test_cn_shape_and_id_errors(rng):
    table = ContextTable(2, 3, 4)
    with pytest.raises(InputError):
        cn_layer_forward(Tensor(rng.normal(size=(2, 3, 2, 2))), [0, 2], table)
    with pytest.raises(ShapeError):
        cn_layer_forward(Tensor(rng.normal(size=(2, 4, 2, 2))), [0, 1], table)
    with pytest.raises(ShapeError):
        cn_layer_forward(Tensor(rng.normal(size=(2, 3, 2, 2))), [0], table)


def test_cn_plus_equals_mixture_transform(rng):
    table = table_with(rng.normal(size=(3, 2)) * 2, 0.5 + rng.random((3, 2)))
    X = rng.normal(size=(40, 2)) * 2
    got, skipped = cn_plus_rows(X, table, EPS)
    ref = mn_forward(Tensor(X), MnState.from_gmm(context_gmm(table), EPS), training=True).data
    assert skipped == []
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_cn_plus_single_context_is_batch_standardization(rng):
    table = table_with([[0.3, -0.1]], [[2.0, 0.7]])
    X = rng.normal(size=(30, 2))
    got = cn_plus_inference(X, table, EPS)
    np.testing.assert_allclose(got, (X - X.mean(0)) / np.sqrt(X.var(0) + EPS), atol=1e-12)


def test_cn_plus_4d_channels_layout(rng):
    table = table_with(rng.normal(size=(2, 3)), 1 + rng.random((2, 3)))
    x = rng.normal(size=(2, 3, 2, 2))
    out = cn_plus_inference(x, table, EPS)
    rows = x.transpose(0, 2, 3, 1).reshape(-1, 3)
    np.testing.assert_allclose(out.transpose(0, 2, 3, 1).reshape(-1, 3), cn_plus_rows(rows, table, EPS)[0])


def test_style_transfer_identity_and_inverse(rng):
    table = table_with(rng.normal(size=(3, 3)), 0.2 + rng.random((3, 3)))
    x = rng.random((3, 5, 5))
    np.testing.assert_allclose(style_transfer(x, 1, 1, table), x, atol=1e-15)
    there = style_transfer(x, 0, 2, table)
    np.testing.assert_allclose(style_transfer(there, 2, 0, table), x, atol=1e-12)


def test_style_transfer_maps_statistics():
    # a low-brightness "night" context and a bright "day" context
    table = table_with([[0.2, 0.2, 0.3]] + [[0.7, 0.7, 0.6]], [[0.01] * 3, [0.04] * 3])
    night = np.random.default_rng(0).normal(0.2, 0.1, size=(3, 64, 64))
    day = style_transfer(night, 0, 1, table, epsilon=0.0)
    expected = np.array([0.7, 0.7, 0.6]) + (night.mean(axis=(1, 2)) - [0.2, 0.2, 0.3]) * 2
    np.testing.assert_allclose(day.mean(axis=(1, 2)), expected, atol=1e-12)
    assert day.mean() > night.mean() + 0.3


def test_assignment_csv_round_trip(tmp_path):
    ids = np.array([2, 0, 1, 1])
    write_assignment(tmp_path / "a.csv", ids)
    back = read_assignment(tmp_path / "a.csv")
    np.testing.assert_array_equal(back.ids, ids)
    assert back.n_contexts == 3


@pytest.mark.parametrize("body", ["idx,ctx\n0,1\n", "index,context\n0,1\n0,2\n", "index,context\n0,1\n2,0\n",
                                  "index,context\n0,x\n"])
def test_assignment_csv_rejects(tmp_path, body):
    (tmp_path / "a.csv").write_text(body)
    with pytest.raises(FormatError):
        read_assignment(tmp_path / "a.csv")


def test_assignment_validates_ids():
    with pytest.raises(InputError):
        ContextAssignment([0, 3], 3)
