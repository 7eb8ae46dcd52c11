"""Federated averaging over simulated vehicle clients.

The server side (``run_federated``, ``aggregate``) only ever sees
``ClientUpdate`` values: a parameter vector and a sample count.  Window
data stays inside ``Client`` objects.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import lstm, trainer
from .exceptions import EmptyShard, EmptyUpdateList, KTooLarge, LengthMismatch

log = logging.getLogger(__name__)

ALL = "all"
OPTIMIZER_MODES = ("reset", "persistent")


@dataclass
class RoundConfig:
    clients_per_round: object = ALL
    local_epochs: int = 1
    rounds: int = 100
    hyperparams: trainer.Hyperparams = field(default_factory=trainer.Hyperparams)
    seed: int = 0
    clip_norm: float = trainer.CLIP_NORM
    # "reset": fresh Adam state every round (canonical FedAvg);
    # "persistent": each client keeps its Adam state between its rounds
    client_optimizer: str = "reset"

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.client_optimizer not in OPTIMIZER_MODES:
            raise ValueError(f"client_optimizer must be one of {OPTIMIZER_MODES}")
        if self.clients_per_round != ALL and int(self.clients_per_round) < 1:
            raise ValueError("clients_per_round must be positive or 'all'")


@dataclass
class ClientUpdate:
    vehicle_id: str
    params: np.ndarray
    n_samples: int
    mean_loss: float = float("nan")


@dataclass
class RoundReport:
    round: int
    participants: list
    test_metrics: object = None
    mean_local_loss: float = float("nan")

    def to_dict(self):
        m = self.test_metrics
        return {
            "round": self.round,
            "participants": list(self.participants),
            "test_acc_weighted": None if m is None else m.weighted_accuracy,
            "test_f1_avg": None if m is None else m.average_f1,
            "mean_local_loss": self.mean_local_loss,
        }


def select_clients(client_ids, k, round_idx, seed):
    """Uniform sample of ``k`` distinct ids from a (seed, round) stream.

    ``k == ALL`` returns every id.  The result is sorted.
    """
    ids = sorted(client_ids)
    if k == ALL or k is None:
        return ids
    k = int(k)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(ids):
        raise KTooLarge(f"cannot select {k} of {len(ids)} clients")
    rng = np.random.default_rng([int(seed), int(round_idx)])
    picked = rng.choice(len(ids), size=k, replace=False)
    return [ids[i] for i in sorted(picked)]


def local_train(global_params, X, y, local_epochs, hyperparams, seed, round_idx,
                adam_state=None, fingerprint=None, clip_norm=trainer.CLIP_NORM):
    """Run ``local_epochs`` of trainer.train_epoch starting from the global model.

    Returns ``(new_params, adam_state, mean_loss_of_last_epoch)``.  A fresh
    Adam state is used when ``adam_state`` is None.
    """
    if len(y) == 0:
        raise EmptyShard("client has no training samples")
    if fingerprint is None:
        fingerprint = trainer.data_fingerprint(X, y)
    params = global_params.copy()
    state = adam_state if adam_state is not None else lstm.AdamState.zeros(params.flat.size)
    loss = float("nan")
    for j in range(local_epochs):
        rng = trainer.pass_rng(seed, round_idx * local_epochs + j, fingerprint)
        params, state, loss = trainer.train_epoch(params, state, X, y, hyperparams, rng,
                                                  clip_norm)
    return params, state, loss


class Client:
    """One vehicle: its private training shard and optimizer state."""

    def __init__(self, vehicle_id, X, y):
        self.vehicle_id = vehicle_id
        self._X = X
        self._y = y
        self._fingerprint = trainer.data_fingerprint(X, y) if len(y) else None
        self._adam = None

    @classmethod
    def from_dataset(cls, client_dataset):
        return cls(client_dataset.vehicle_id, client_dataset.train.X, client_dataset.train.y)

    @property
    def n_samples(self):
        return len(self._y)

    def train_round(self, global_params, round_idx, config):
        """Local training for one round; only a ClientUpdate leaves the client."""
        state = self._adam if config.client_optimizer == "persistent" else None
        params, state, loss = local_train(
            global_params, self._X, self._y, config.local_epochs, config.hyperparams,
            config.seed, round_idx, adam_state=state, fingerprint=self._fingerprint,
            clip_norm=config.clip_norm,
        )
        if config.client_optimizer == "persistent":
            self._adam = state
        return ClientUpdate(self.vehicle_id, params.flat, self.n_samples, loss)


def aggregate(updates):
    """Sample-weighted coordinate-wise mean of the client vectors.

    Each weighted term ``(n_k / N) * w_k`` is rounded once and the terms
    are then added with ``math.fsum``, so every coordinate is the correctly
    rounded sum of the terms.  The result is therefore independent of the
    update order, and averaging identical models returns them to within an
    ulp.
    """
    updates = [u for u in updates if u.n_samples > 0]
    if not updates:
        raise EmptyUpdateList("no client updates to aggregate")
    size = len(updates[0].params)
    if any(len(u.params) != size for u in updates):
        raise LengthMismatch("client parameter vectors differ in length")
    updates = sorted(updates, key=lambda u: u.vehicle_id)
    total = sum(int(u.n_samples) for u in updates)
    terms = np.stack([(u.n_samples / total) * np.asarray(u.params, dtype=np.float64)
                      for u in updates])
    if len(updates) == 1:
        return terms[0]
    return np.array([math.fsum(col) for col in terms.T.tolist()], dtype=np.float64)


def _train_client(client, global_params, round_idx, config):
    return client, client.train_round(global_params, round_idx, config)


def run_federated(config, clients, test=None, params=None, n_features=None,
                  n_jobs=1, on_round=None):
    """The FedAvg loop: select, train locally, aggregate, evaluate.

    ``clients`` holds ``Client`` objects (or ClientDatasets, which are
    wrapped).  Returns ``(final_params, reports)``.
    """
    clients = [c if isinstance(c, Client) else Client.from_dataset(c) for c in clients]
    if not clients:
        raise ValueError("federation needs at least one client")
    by_id = {c.vehicle_id: c for c in clients}
    hp = config.hyperparams
    if params is None:
        if n_features is None:
            n_features = next(c._X.shape[2] for c in clients if c.n_samples)
        params = lstm.init_params(hp.hidden_units, n_features, config.seed)
    reports = []
    for r in range(config.rounds):
        chosen = select_clients(by_id, config.clients_per_round, r, config.seed)
        active = [by_id[v] for v in chosen if by_id[v].n_samples]
        for v in chosen:
            if not by_id[v].n_samples:
                log.warning("round %d: client %s has an empty shard; skipped", r, v)
        if n_jobs == 1:
            results = [_train_client(c, params, r, config) for c in active]
        else:
            from joblib import Parallel, delayed

            results = Parallel(n_jobs=n_jobs)(
                delayed(_train_client)(c, params, r, config) for c in active)
            # client objects come back from workers with their updated state
            for c, _ in results:
                by_id[c.vehicle_id] = c
        updates = [u for _, u in results]
        if updates:
            params = lstm.ModelParams(aggregate(updates), params.hidden_units, params.n_features)
        metrics = trainer.evaluate(params, test.X, test.y) if test is not None and len(test) else None
        losses = [u.mean_loss for u in updates]
        report = RoundReport(r + 1, chosen, metrics,
                             float(np.mean(losses)) if losses else float("nan"))
        reports.append(report)
        if on_round is not None:
            on_round(report, params)
        if metrics is not None:
            log.debug("round %d acc %.4f f1 %.4f", r + 1, metrics.weighted_accuracy,
                      metrics.average_f1)
    return params, reports
