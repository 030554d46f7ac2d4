"""Deterministic training, evaluation and the three-variant ablation.

Every source of randomness is derived from ``(seed, epoch)``: the shuffle
order, dropout masks and rotation augmentation. Training ``e + k`` epochs in
one go therefore matches training ``e`` epochs, checkpointing, and resuming
for ``k`` more.
"""

import csv
import dataclasses
import io
import logging
import time
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .config import VARIANTS
from .exceptions import ConfigurationError, NumericalError
from .functional import log_softmax_array
from .model import MANETL, total_loss
from .optim import SGD
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "train_loss", "train_accuracy", "eval_loss", "eval_accuracy")


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    eval_loss: float
    eval_accuracy: float
    seconds: float = 0.0

    def row(self):
        return [str(self.epoch)] + [repr(float(getattr(self, f))) for f in METRIC_FIELDS[1:]]


def batches(n, batch_size, order):
    """Split ``order`` into batches; a trailing batch of one joins its predecessor."""
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def epoch_rng(seed, epoch, stream):
    return np.random.default_rng([seed, epoch, stream])


def build_optimizer(model, config):
    return SGD(model.named_parameters(), config.learning_rate, config.momentum,
               config.weight_decay)


def train_epoch(model, optimizer, images, labels, config, epoch):
    """One pass over the training set; returns (mean total loss, accuracy)."""
    n = len(images)
    if n == 0:
        raise ConfigurationError("training split is empty")
    if n < 2:
        raise ConfigurationError("training split needs at least 2 samples (batch normalization)")
    order = epoch_rng(config.seed, epoch, 0).permutation(n)
    model.train()
    model.dropout_rng = epoch_rng(config.seed, epoch, 1)
    loss_sum, correct = 0.0, 0
    for index, idx in enumerate(batches(n, config.batch_size, order)):
        x = Tensor(images[idx])
        y = labels[idx]
        logits, aux = model(x)
        loss = total_loss(logits, aux, y, config.aux_weight)
        value = float(loss.item())
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss at epoch {epoch}, batch {index}")
        loss.backward()
        optimizer.step()
        optimizer.zero_grad()
        loss_sum += value * len(idx)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return loss_sum / n, correct / n


def predict_logits(model, images, batch_size=256):
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits, _ = model(Tensor(images[start:start + batch_size]))
            out.append(logits.data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def evaluate(model, images, labels, batch_size=256):
    """Eval-mode (loss, accuracy): dropout off, running BN stats, no aux heads."""
    if len(images) == 0:
        raise ConfigurationError("evaluation split is empty")
    logits = predict_logits(model, images, batch_size).astype(np.float64)
    logp = log_softmax_array(logits)
    labels = np.asarray(labels)
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    accuracy = float((logits.argmax(axis=1) == labels).mean())
    return loss, accuracy


class Trainer:
    """Owns a model, its optimizer and the epoch counter."""

    def __init__(self, model, config, augmenter=None):
        self.model = model
        self.config = config
        self.optimizer = build_optimizer(model, config)
        self.augmenter = augmenter
        self.epoch = 0
        self.history = []

    def fit(self, train_images, train_labels, eval_images=None, eval_labels=None, epochs=None,
            on_epoch=None):
        epochs = self.config.epochs if epochs is None else epochs
        for _ in range(epochs):
            start = time.perf_counter()
            images = train_images
            if self.augmenter is not None:
                images = self.augmenter(self.epoch)
            train_loss, train_acc = train_epoch(self.model, self.optimizer, images, train_labels,
                                                self.config, self.epoch)
            if eval_images is not None and len(eval_images):
                eval_loss, eval_acc = evaluate(self.model, eval_images, eval_labels)
            else:
                eval_loss, eval_acc = float("nan"), float("nan")
            self.epoch += 1
            record = MetricsRecord(self.epoch, train_loss, train_acc, eval_loss, eval_acc,
                                   time.perf_counter() - start)
            self.history.append(record)
            logger.info("epoch %d train_loss=%.4f train_acc=%.4f eval_acc=%.4f",
                        record.epoch, train_loss, train_acc, eval_acc)
            if on_epoch is not None:
                on_epoch(record)
        return self.history

    def checkpoint(self):
        return Checkpoint(
            model_config=self.model.config,
            train_config=self.config,
            tensors=self.model.state_dict(),
            optimizer=self.optimizer.state_dict(),
            epoch=self.epoch,
            rng_state={"seed": self.config.seed, "next_epoch": self.epoch,
                       "dropout": self.model.dropout_rng.bit_generator.state},
        )

    @classmethod
    def from_checkpoint(cls, ckpt, augmenter=None):
        model = MANETL(ckpt.model_config, seed=ckpt.train_config.seed)
        model.load_state_dict(ckpt.tensors)
        trainer = cls(model, ckpt.train_config, augmenter)
        trainer.optimizer.load_state_dict(ckpt.optimizer)
        trainer.epoch = ckpt.epoch
        dropout_state = ckpt.rng_state.get("dropout")
        if dropout_state:
            model.dropout_rng.bit_generator.state = dropout_state
        return trainer


def metrics_csv(records):
    """Deterministic metrics text: fixed header, one record per line."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for r in records:
        writer.writerow(r.row())
    return buf.getvalue()


def append_metrics(path, record):
    """Append one record, writing the header when the file is new."""
    import os

    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(METRIC_FIELDS)
        writer.writerow(record.row())


def run_ablation(train_images, train_labels, eval_images, eval_labels, model_config,
                 train_config, augmenter=None, variants=VARIANTS, on_epoch=None):
    """Train every variant under identical seeds and budgets.

    Returns ``{variant: [MetricsRecord, ...]}``.
    """
    results = {}
    for variant in variants:
        config = dataclasses.replace(model_config, variant=variant)
        model = MANETL(config, seed=train_config.seed)
        trainer = Trainer(model, train_config, augmenter)
        callback = None
        if on_epoch is not None:
            def callback(record, _v=variant):
                on_epoch(_v, record)
        results[variant] = trainer.fit(train_images, train_labels, eval_images, eval_labels,
                                       on_epoch=callback)
    return results


VARIANT_LABELS = {
    "inception": "inception branch only",
    "residual": "residual branch only",
    "ensemble": "ensemble (fusion + attention)",
}


def ablation_table(results):
    lines = [f"{'variant':<12} {'description':<32} {'eval_accuracy':>13}"]
    for variant, history in results.items():
        acc = history[-1].eval_accuracy if history else float("nan")
        lines.append(f"{variant:<12} {VARIANT_LABELS.get(variant, ''):<32} {acc:>13.4f}")
    return "\n".join(lines)
