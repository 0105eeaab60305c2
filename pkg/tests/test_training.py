import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from normlab import functional as F
from normlab.config import ExperimentConfig
from normlab.exceptions import InputError
from normlab.nn import ContextInput, build_mlp
from normlab.optim import OptimizerState, rmsprop_step
from normlab.tensor import Tape, Tensor
from normlab.training import (DataSplits, RunMetrics, Split, batches, epochs_to_threshold, evaluate,
                              read_metrics_csv, train)


def blobs(seed, n=200, d=4, k=2, spread=4.0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(k, d)) * spread
    y = rng.integers(k, size=n)
    x = centers[y] + rng.normal(size=(n, d))
    return Split(x[:, :, None, None], y, k)


def config(**train):
    cfg = ExperimentConfig()
    cfg.optim.lr = train.pop("lr", 0.01)
    cfg.optim.weight_decay = 0.0
    cfg.train.batch_size = train.pop("batch_size", 32)
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg.validate()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 300), st.integers(1, 64))
def test_batches_cover_without_singletons(n, bs):
    got = list(batches(n, bs, np.random.default_rng(0)))
    flat = np.concatenate(got).tolist() if got else []
    assert sorted(flat) == list(range(n))
    if n >= 2 and bs >= 2:
        assert all(b.size >= 2 for b in got)


def test_epochs_to_threshold_first_crossing():
    assert epochs_to_threshold([1, 2, 3, 4], [0.5, 0.96, 0.9, 0.97], 0.95) == 2
    assert epochs_to_threshold([1, 2], [0.5, 0.6], 0.95) is None


def test_separable_data_is_learned():
    data = blobs(0)
    m = train(build_mlp((4, 1, 1), [16], 2, seed=0), DataSplits(data, None, data), config(epochs=50))
    assert m.epochs_to_threshold("train_acc", 1.0) is not None
    assert m.train_loss[-1] < m.train_loss[0]


def test_zero_learning_rate_keeps_metrics_constant():
    data = blobs(1)
    m = train(build_mlp((4, 1, 1), [8], 2, seed=0), DataSplits(data, data, data), config(epochs=3, lr=0.0))
    assert len(set(m.val_loss)) == 1 and len(set(m.test_acc)) == 1 and len(set(m.train_acc)) == 1
    np.testing.assert_allclose(m.train_loss, m.train_loss[0], rtol=1e-12)


def test_runs_are_deterministic(tmp_path):
    data = blobs(2)
    csvs = []
    for i in range(2):
        train(build_mlp((4, 1, 1), [8], 2, seed=3, norm="batch"), DataSplits(data, data, data),
              config(epochs=3, seed=3), tmp_path / str(i))
        csvs.append((tmp_path / str(i) / "metrics.csv").read_bytes())
    assert csvs[0] == csvs[1]
    back = read_metrics_csv(tmp_path / "0" / "metrics.csv")
    assert back.epoch == [1, 2, 3] and back.seconds == [0.0] * 3


def test_divergence_is_reported(tmp_path):
    data = blobs(3)
    m = train(build_mlp((4, 1, 1), [8], 2, seed=0), DataSplits(data, None, None), config(epochs=5, lr=1e300),
              tmp_path)
    assert m.status == "diverged"
    assert not (tmp_path / "model.ckpt").exists()
    assert '"status": "diverged"' in (tmp_path / "summary.json").read_text()


def test_untrained_model_is_at_chance():
    rng = np.random.default_rng(4)
    split = Split(rng.normal(size=(4000, 6, 1, 1)), rng.integers(4, size=4000), 4)
    res = evaluate(build_mlp((6, 1, 1), [16], 4, seed=0), split)
    assert 0.2 < res["accuracy"] < 0.3
    assert res["top5"] == 1.0


def test_small_step_decreases_loss():
    for seed in range(10):
        data = blobs(seed, n=64)
        net = build_mlp((4, 1, 1), [8], 2, seed=seed)
        x = Tensor(data.images)

        def loss():
            return F.softmax_cross_entropy(net.forward(x, training=True), data.labels)

        with Tape() as tape:
            before = loss()
        tape.backward(before)
        rmsprop_step(net.params, OptimizerState(lr=1e-5, momentum=0.0))
        assert float(loss().data) < float(before.data)


def test_early_stopping():
    data = blobs(5)
    m = train(build_mlp((4, 1, 1), [8], 2), DataSplits(data, data, None), config(epochs=10, lr=0.0, patience=2))
    assert m.epoch == [1, 2, 3] and "early stop" in m.message


def test_mixture_training_logs_two_stages(caplog):
    data = blobs(6, n=400)
    with caplog.at_level(logging.INFO, logger="normlab"):
        train(build_mlp((4, 1, 1), [8], 2, norm="mixture:2"), DataSplits(data, None, None), config(epochs=1))
    msgs = [r.getMessage() for r in caplog.records]
    first = lambda word: next(i for i, m in enumerate(msgs) if m.startswith(word))  # noqa: E731
    assert first("stage 1") < first("mixture stage 1") < first("stage 2") < first("epoch 1")


def test_context_model_needs_contexts_for_cn():
    data = blobs(7, n=40)
    net = build_mlp((4, 1, 1), [8], 2, context_input=ContextInput(2, "channels", 4))
    with pytest.raises(InputError):
        evaluate(net, data, "cn")
    assert 0.0 <= evaluate(net, data, "cn+")["accuracy"] <= 1.0
    ctx = Split(data.images, data.labels, 2, np.arange(40) % 2)
    assert evaluate(net, ctx, "cn")["loss"] > 0


def test_run_metrics_rejects_repeated_epoch():
    m = RunMetrics()
    row = dict(epoch=1, train_loss=1.0, val_loss=1.0, test_acc=0.5, top5_acc=1.0, seconds=0.1, train_acc=0.5)
    m.append(**row)
    with pytest.raises(ValueError):
        m.append(**row)
