"""Mini-batch training: the shared epoch primitive and the centralized loop."""
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import lstm
from .evalstats import evaluate_predictions
from .exceptions import EmptyDataset

log = logging.getLogger(__name__)

CLIP_NORM = 5.0


@dataclass
class Hyperparams:
    batch_size: int = 64
    window_steps: int = 5
    hidden_units: int = 50
    learning_rate: float = 1e-3

    def __post_init__(self):
        if min(self.batch_size, self.window_steps, self.hidden_units) <= 0 or self.learning_rate < 0:
            raise ValueError(f"hyperparameters must be positive: {self}")


@dataclass
class TrainConfig:
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    epochs: int = 50
    seed: int = 0
    patience: float = 5
    clip_norm: float = CLIP_NORM

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_metrics: object = None

    def to_dict(self):
        m = self.val_metrics
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_f1_avg": None if m is None else m.average_f1,
            "val_acc_weighted": None if m is None else m.weighted_accuracy,
        }


def data_fingerprint(X, y):
    """64-bit digest of a training shard's contents."""
    h = hashlib.blake2b(digest_size=8)
    h.update(np.ascontiguousarray(X, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(y, dtype=np.int64).tobytes())
    return int.from_bytes(h.digest(), "little")


def pass_rng(seed, pass_index, fingerprint):
    """Shuffling stream for one pass over one shard.

    Keying on the shard contents (rather than on who owns it) means a
    single federated client holding the pooled data draws exactly the
    shuffles that centralized training draws.
    """
    return np.random.default_rng([int(seed), int(pass_index), int(fingerprint)])


def train_epoch(params, adam_state, X, y, hyperparams, rng, clip_norm=CLIP_NORM):
    """One shuffled pass of mini-batch Adam; returns ``(params, state, mean_loss)``.

    The last short batch is kept.  The returned loss is the sample-weighted
    mean of the per-batch losses, each measured before its update.
    """
    n = len(y)
    if n == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    order = rng.permutation(n)
    bs = int(hyperparams.batch_size)
    lr = float(hyperparams.learning_rate)
    total = 0.0
    for start in range(0, n, bs):
        idx = order[start:start + bs]
        batch_loss, grads = lstm.loss_and_grad(params, X[idx], y[idx])
        grads = lstm.clip_by_global_norm(grads, clip_norm)
        params, adam_state = lstm.adam_step(params, grads, adam_state, lr)
        total += batch_loss * len(idx)
    return params, adam_state, total / n


def predict(params, X):
    return np.argmax(lstm.predict_proba(params, X), axis=1)


def evaluate(params, X, y):
    if len(y) == 0:
        return None
    return evaluate_predictions(predict(params, X), y)


def mean_loss(params, X, y):
    return lstm.loss(lstm.predict_proba(params, X), y)


class EarlyStopping:
    """Track the best validation score and decide when to stop."""

    def __init__(self, patience=math.inf):
        self.patience = math.inf if patience is None else patience
        self.best_score = -math.inf
        self.best_epoch = None
        self.since_best = 0

    def update(self, epoch, score):
        """Record an epoch; returns True when it is a new best."""
        if score > self.best_score:
            self.best_score, self.best_epoch, self.since_best = score, epoch, 0
            return True
        self.since_best += 1
        return False

    @property
    def should_stop(self):
        return self.since_best >= self.patience


def train_centralized(config, train, val, params=None, on_epoch=None):
    """Train on pooled data with early stopping on validation average F1.

    Returns ``(best_params, reports)``.  ``train`` and ``val`` are
    WindowSets (anything with ``X`` and ``y``).  Without validation data
    the final epoch's parameters are returned.
    """
    hp = config.hyperparams
    if params is None:
        params = lstm.init_params(hp.hidden_units, train.X.shape[2], config.seed)
    state = lstm.AdamState.zeros(params.flat.size)
    fingerprint = data_fingerprint(train.X, train.y)
    stopper = EarlyStopping(config.patience)
    best = params
    reports = []
    for epoch in range(1, config.epochs + 1):
        rng = pass_rng(config.seed, epoch - 1, fingerprint)
        params, state, loss = train_epoch(params, state, train.X, train.y, hp, rng,
                                          config.clip_norm)
        metrics = evaluate(params, val.X, val.y) if val is not None and len(val) else None
        report = EpochReport(epoch, loss, metrics)
        reports.append(report)
        if on_epoch is not None:
            on_epoch(report, params)
        if metrics is None:
            best = params
            continue
        if stopper.update(epoch, metrics.average_f1):
            best = params
        log.debug("epoch %d loss %.5f val f1 %.4f", epoch, loss, metrics.average_f1)
        if stopper.should_stop:
            log.info("early stop after epoch %d (best %d)", epoch, stopper.best_epoch)
            break
    return best, reports


def write_jsonl(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
