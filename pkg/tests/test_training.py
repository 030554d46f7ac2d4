import dataclasses

import numpy as np
import pytest

from manetl import functional as F
from manetl.checkpoint import load_checkpoint, save_checkpoint
from manetl.config import ModelConfig, TrainConfig
from manetl.exceptions import CheckpointError, ConfigurationError, NumericalError
from manetl.model import MANETL
from manetl.optim import SGD
from manetl.tensor import Parameter, Tensor
from manetl.training import (METRIC_FIELDS, Trainer, ablation_table, append_metrics, batches,
                             evaluate, metrics_csv, run_ablation, train_epoch)

TINY = ModelConfig(num_classes=2, input_size=16, stem_channels=4, branch_channels=8,
                   aux_channels=4, aux_hidden=8)


def _toy_data(n=12, classes=2, seed=0, size=16):
    """Class c lights up a distinct horizontal band, plus noise."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    images = rng.random((n, 1, size, size)).astype(np.float32) * 0.2
    band = size // classes
    for i, c in enumerate(labels):
        images[i, 0, c * band:(c + 1) * band] += 0.8
    return images, labels


def _params(model):
    return {name: p.data.copy() for name, p in model.named_parameters()}


def _strip_time(history):
    return [dataclasses.replace(r, seconds=0.0) for r in history]


class TestOptimizer:
    def test_zero_learning_rate_is_noop(self):
        images, labels = _toy_data()
        model = MANETL(TINY, seed=0)
        before = _params(model)
        config = TrainConfig(learning_rate=0.0, batch_size=4)
        trainer = Trainer(model, config)
        trainer.fit(images, labels, epochs=1)
        after = _params(model)
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)

    def test_scalar_sgd_oracle(self):
        p = Parameter(np.array([1.0, -2.0]), dtype=np.float64)
        opt = SGD([("p", p)], lr=0.1, momentum=0.9, weight_decay=0.0)
        expected, v = np.array([1.0, -2.0]), np.zeros(2)
        for _ in range(3):
            loss = (p * p).sum() * 0.5  # gradient is p itself
            loss.backward()
            v = 0.9 * v + expected
            expected = expected - 0.1 * v
            opt.step()
            opt.zero_grad()
            np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-15)

    def test_weight_decay_shrinkage(self):
        p = Parameter(np.array([3.0, -1.5]), dtype=np.float64)
        opt = SGD([("p", p)], lr=0.1, momentum=0.0, weight_decay=0.01)
        opt.step()
        np.testing.assert_allclose(p.data, np.array([3.0, -1.5]) * (1 - 0.1 * 0.01))

    def test_zero_gradient_without_decay_is_noop(self):
        p = Parameter(np.array([3.0, -1.5]), dtype=np.float64)
        opt = SGD([("p", p)], lr=0.5, momentum=0.9, weight_decay=0.0)
        p.grad = np.zeros(2)
        opt.step()
        assert p.data.tolist() == [3.0, -1.5]


def test_trailing_singleton_batch_is_merged():
    order = np.arange(9)
    assert [len(b) for b in batches(9, 4, order)] == [4, 5]
    assert [len(b) for b in batches(8, 4, order[:8])] == [4, 4]


def test_same_seed_same_stream():
    images, labels = _toy_data()
    runs = []
    for _ in range(2):
        trainer = Trainer(MANETL(TINY, seed=3), TrainConfig(seed=3, batch_size=4))
        history = trainer.fit(images, labels, images, labels, epochs=2)
        runs.append((_strip_time(history), _params(trainer.model)))
    assert runs[0][0] == runs[1][0]
    assert all(runs[0][1][k].tobytes() == runs[1][1][k].tobytes() for k in runs[0][1])


def test_non_finite_loss_names_batch():
    images, labels = _toy_data(8)
    images[5] = np.nan
    model = MANETL(TINY, seed=0)
    config = TrainConfig(batch_size=4)
    trainer = Trainer(model, config)
    with pytest.raises(NumericalError, match=r"batch \d"):
        train_epoch(model, trainer.optimizer, images, labels, config, 0)


class TestEvaluate:
    def test_uniform_logits_give_chance(self):
        k = 4
        config = dataclasses.replace(TINY, num_classes=k)
        model = MANETL(config, seed=0)
        model.head.fc.weight.data[:] = 0
        model.head.fc.bias.data[:] = 0
        images, labels = _toy_data(40, k)
        _, acc = evaluate(model, images, labels)
        assert acc == pytest.approx(1 / k)

    def test_hand_set_head_separates(self):
        model = MANETL(TINY, seed=0).eval()
        images, labels = _toy_data(2)
        fused, _ = model.features(Tensor(images))
        pooled = F.global_avg_pool(model.attention(fused)).data
        mid = pooled.mean(axis=0)
        # logit_k = (f_k - mid) . (f - mid) puts each sample on its own side
        model.head.fc.weight.data[:] = pooled - mid
        model.head.fc.bias.data[:] = -(pooled - mid) @ mid
        loss, acc = evaluate(model, images, labels)
        assert acc == 1.0
        assert evaluate(model, images, labels) == (loss, acc)

    def test_empty_split(self):
        with pytest.raises(ConfigurationError):
            evaluate(MANETL(TINY, seed=0), np.zeros((0, 1, 16, 16)), np.zeros(0, int))


class TestCheckpoint:
    @pytest.fixture
    def trained(self):
        images, labels = _toy_data()
        trainer = Trainer(MANETL(TINY, seed=1), TrainConfig(seed=1, batch_size=4))
        trainer.fit(images, labels, epochs=1)
        return trainer

    def test_round_trip_bit_exact(self, trained):
        blob = save_checkpoint(trained.checkpoint())
        again = load_checkpoint(blob)
        assert save_checkpoint(again) == blob
        for name, p in trained.model.named_parameters():
            assert again.tensors[name].tobytes() == p.data.tobytes()
        assert again.epoch == 1 and again.model_config == TINY

    def test_flipped_magic(self, trained):
        blob = bytearray(save_checkpoint(trained.checkpoint()))
        blob[0] ^= 0xFF
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(bytes(blob))

    def test_version_checked_first(self, trained):
        blob = bytearray(save_checkpoint(trained.checkpoint()))
        blob[8:12] = (99).to_bytes(4, "little")
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(bytes(blob[:16]))

    @pytest.mark.parametrize("cut", [4, 13, 200, -3])
    def test_truncation(self, trained, cut):
        blob = save_checkpoint(trained.checkpoint())
        with pytest.raises(CheckpointError, match=r"\[section: \w+\]"):
            load_checkpoint(blob[:cut])

    def test_resume_equivalence(self):
        images, labels = _toy_data()
        config = TrainConfig(seed=2, batch_size=4)

        def augmenter(epoch):
            rng = np.random.default_rng([7, epoch])
            return images + rng.normal(0, 0.01, images.shape).astype(np.float32)

        straight = Trainer(MANETL(TINY, seed=2), config, augmenter)
        full = straight.fit(images, labels, images, labels, epochs=3)

        first = Trainer(MANETL(TINY, seed=2), config, augmenter)
        head = first.fit(images, labels, images, labels, epochs=2)
        resumed = Trainer.from_checkpoint(load_checkpoint(save_checkpoint(first.checkpoint())),
                                          augmenter)
        tail = resumed.fit(images, labels, images, labels, epochs=1)

        assert _strip_time(full) == _strip_time(head + tail)
        a, b = _params(straight.model), _params(resumed.model)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_overfits_tiny_set():
    images, labels = _toy_data(8, 2, seed=4)
    trainer = Trainer(MANETL(TINY, seed=0), TrainConfig(batch_size=4, augment=False))
    for _ in range(200):
        trainer.fit(images, labels, epochs=1)
        if evaluate(trainer.model, images, labels)[1] == 1.0:
            break
    assert trainer.epoch <= 200
    assert evaluate(trainer.model, images, labels)[1] == 1.0


def test_metrics_files(tmp_path):
    images, labels = _toy_data()
    history = Trainer(MANETL(TINY, seed=0), TrainConfig(batch_size=4)).fit(
        images, labels, images, labels, epochs=2)
    text = metrics_csv(history)
    assert text.splitlines()[0] == ",".join(METRIC_FIELDS)
    path = tmp_path / "m.csv"
    for record in history:
        append_metrics(path, record)
    assert path.read_text() == text
    assert [r.epoch for r in history] == [1, 2]
    assert all(0 <= r.train_accuracy <= 1 and 0 <= r.eval_accuracy <= 1 for r in history)


def test_ablation_table_rows():
    images, labels = _toy_data()
    results = run_ablation(images, labels, images, labels, TINY,
                           TrainConfig(epochs=1, batch_size=4))
    assert list(results) == ["ensemble", "inception", "residual"]
    lines = ablation_table(results).splitlines()
    assert len(lines) == 4
    for line, variant in zip(lines[1:], results):
        assert line.startswith(variant)
        assert 0.0 <= float(line.split()[-1]) <= 1.0
