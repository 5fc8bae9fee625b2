"""Mini-batch training with a held-out validation split, plateau LR halving,
early stopping, and best-epoch restoration."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DataError
from .layers import cross_entropy
from .network import Network
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    initial_lr: float = 0.002
    plateau_factor: float = 2.0
    plateau_patience: int = 5
    early_stop_patience: int = 15
    max_epochs: int = 200
    batch_size: int = 64
    l2: float = 1e-5
    val_fraction: float = 0.15
    seed: int = 0
    restore_best: bool = True

    def validate(self):
        for name in ("initial_lr", "plateau_factor", "plateau_patience", "early_stop_patience",
                     "max_epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"training.{name} must be positive, got {getattr(self, name)}")
        if self.l2 < 0:
            raise ConfigError(f"training.l2 must be non-negative, got {self.l2}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"training.val_fraction must lie in (0, 1), got {self.val_fraction}")
        return self


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


@dataclass
class TrainingHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    stopped_early: bool = False

    @property
    def lrs(self):
        return [e.lr for e in self.epochs]

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.epochs:
                fh.write(record.to_json() + "\n")


def validation_split(labels, fraction, seed, groups=None, n_classes=None):
    """Per-class seeded split; returns (train_idx, val_idx).

    With ``groups`` (e.g. recording ids), whole groups are held out so the
    patches of one recording never straddle the split.  Each class keeps at
    least one group on the training side and, when it has two or more
    groups and ``fraction > 0``, puts at least one on the validation side.
    """
    labels = np.asarray(labels)
    groups = np.arange(len(labels)) if groups is None else np.asarray(groups)
    rng = np.random.default_rng(seed)
    classes = np.unique(labels) if n_classes is None else np.arange(n_classes)
    val_mask = np.zeros(len(labels), dtype=bool)
    for k in classes:
        members = np.flatnonzero(labels == k)
        if len(members) == 0:
            raise DataError(f"class {k} has no training samples")
        # first-seen order keeps the split independent of how groups sort
        uniq = list(dict.fromkeys(groups[members].tolist()))
        n_val = int(round(fraction * len(uniq)))
        if fraction > 0:
            n_val = max(n_val, 1)
        n_val = min(n_val, len(uniq) - 1)
        if n_val <= 0:
            continue
        chosen = set(uniq[i] for i in rng.permutation(len(uniq))[:n_val])
        val_mask[members] = [g in chosen for g in groups[members]]
    return np.flatnonzero(~val_mask), np.flatnonzero(val_mask)


def evaluate(network: Network, x, labels, batch_size=128):
    """(mean cross-entropy + L2 penalty, accuracy) in inference mode."""
    probs = network.predict_proba(x, batch_size)
    loss = cross_entropy(probs, labels) + network.l2_penalty()
    return loss, float(np.mean(probs.argmax(axis=1) == labels))


def train(network: Network, patches, labels, config: TrainingConfig = TrainingConfig(),
          groups=None, history_path=None):
    """Fit ``network`` in place; returns ``(network, TrainingHistory)``."""
    config.validate()
    x = np.asarray(patches)
    labels = np.asarray(labels).astype(np.int64)
    n_classes = network.config.classes
    if x.shape[0] != labels.shape[0]:
        raise DataError(f"{x.shape[0]} patches but {labels.shape[0]} labels")
    missing = sorted(set(range(n_classes)) - set(labels.tolist()))
    if missing:
        raise DataError(f"classes {missing} missing from training data")
    if config.l2 != network.config.l2:
        network.set_l2(config.l2)

    tr_idx, va_idx = validation_split(labels, config.val_fraction, config.seed, groups, n_classes)
    if len(va_idx) == 0:
        raise DataError("validation split is empty; need at least two recordings in some class")
    x_tr, y_tr = x[tr_idx], labels[tr_idx]
    x_va, y_va = x[va_idx], labels[va_idx]
    rng = np.random.default_rng([config.seed, 1])
    optimizer = Adam()
    params = dict(network.named_params())
    lr = config.initial_lr
    history = TrainingHistory()
    best_state = network.state_dict()
    plateau_wait = stop_wait = 0
    sink = open(history_path, "w", encoding="utf-8") if history_path else None
    try:
        for epoch in range(config.max_epochs):
            order = rng.permutation(len(y_tr))
            total_loss = correct = 0.0
            for s in range(0, len(order), config.batch_size):
                batch = order[s:s + config.batch_size]
                loss, _ = network.loss_and_gradients(x_tr[batch], y_tr[batch])
                correct += np.sum(network.last_probs.argmax(axis=1) == y_tr[batch])
                total_loss += loss * len(batch)
                optimizer.step(params, dict(network.named_grads()), lr)
            val_loss, val_acc = evaluate(network, x_va, y_va)
            record = EpochRecord(epoch, lr, total_loss / len(order), correct / len(order), val_loss, val_acc)
            history.epochs.append(record)
            if sink:
                sink.write(record.to_json() + "\n")
                sink.flush()
            log.info("epoch %d lr %.3g loss %.4f acc %.3f val_loss %.4f val_acc %.3f",
                     epoch, lr, record.train_loss, record.train_accuracy, val_loss, val_acc)
            if val_loss < history.best_val_loss:
                history.best_val_loss, history.best_epoch = val_loss, epoch
                best_state = network.state_dict()
                plateau_wait = stop_wait = 0
                continue
            plateau_wait += 1
            stop_wait += 1
            if stop_wait >= config.early_stop_patience:
                history.stopped_early = True
                break
            if plateau_wait >= config.plateau_patience:
                lr /= config.plateau_factor
                plateau_wait = 0
    finally:
        if sink:
            sink.close()
    if config.restore_best:
        network.load_state_dict(best_state)
    return network, history
