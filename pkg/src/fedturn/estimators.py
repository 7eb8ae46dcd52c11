"""scikit-learn style wrappers around the training loops.

``X`` is always a 3-D array of windows ``(n_samples, window_steps,
n_features)`` and ``y`` holds class indices (0 off, 1 left, 2 right).
"""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import fedavg, lstm, trainer
from .dataset import SCALED, apply_normalization, fit_normalization, invert_normalization
from .evalstats import evaluate_predictions

CLASSES = np.array([0, 1, 2])


def check_windows(X, y=None, n_features=None):
    """Validate a window tensor (and labels); returns float64 copies."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
    if X.ndim != 3:
        raise ValueError(f"expected a 3-D array of windows, got shape {X.shape}")
    if n_features is not None and X.shape[2] != n_features:
        raise ValueError(f"X has {X.shape[2]} features, estimator expects {n_features}")
    if y is None:
        return X
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != len(X):
        raise ValueError(f"y must be 1-D with {len(X)} entries, got shape {y.shape}")
    if not np.isin(y, CLASSES).all():
        raise ValueError("labels must be 0 (off), 1 (left) or 2 (right)")
    return X, y.astype(np.int64)


class WindowScaler(TransformerMixin, BaseEstimator):
    """Z-score the continuous feature columns of window tensors.

    Statistics are pooled over every row of every training window.
    Columns with a (near) zero spread map to 0.
    """

    def __init__(self, scaled=None):
        self.scaled = scaled

    def fit(self, X, y=None):
        X = check_windows(X)
        mask = SCALED if self.scaled is None else np.asarray(self.scaled, bool)
        if len(mask) != X.shape[2]:
            raise ValueError("scaled mask length must equal the number of features")
        self.stats_ = fit_normalization(X, mask)
        self.n_features_in_ = X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return apply_normalization(self.stats_, check_windows(X, n_features=self.n_features_in_))

    def inverse_transform(self, X):
        check_is_fitted(self, "stats_")
        return invert_normalization(self.stats_, check_windows(X, n_features=self.n_features_in_))


class _LSTMBase(ClassifierMixin, BaseEstimator):

    def _hyperparams(self, window_steps):
        return trainer.Hyperparams(self.batch_size, window_steps, self.hidden_units,
                                   self.learning_rate)

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        return lstm.predict_proba(self.params_, check_windows(X, n_features=self.n_features_in_))

    def predict(self, X):
        return CLASSES[np.argmax(self.predict_proba(X), axis=1)]

    def evaluate(self, X, y):
        """Confusion-based metrics (accuracy, per-class and macro F1)."""
        X, y = check_windows(X, y, self.n_features_in_)
        return evaluate_predictions(self.predict(X), y)


class LSTMTurnSignalClassifier(_LSTMBase):
    """Centrally trained LSTM with early stopping on validation macro F1."""

    def __init__(self, hidden_units=50, batch_size=64, learning_rate=1e-3, epochs=50,
                 patience=5, clip_norm=trainer.CLIP_NORM, random_state=0):
        self.hidden_units = hidden_units
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.patience = patience
        self.clip_norm = clip_norm
        self.random_state = random_state

    def fit(self, X, y, eval_set=None):
        X, y = check_windows(X, y)
        val = None
        if eval_set is not None:
            Xv, yv = check_windows(*eval_set, n_features=X.shape[2])
            val = _Data(Xv, yv)
        config = trainer.TrainConfig(self._hyperparams(X.shape[1]), self.epochs,
                                     self.random_state, self.patience, self.clip_norm)
        self.params_, self.history_ = trainer.train_centralized(config, _Data(X, y), val)
        self.classes_ = CLASSES
        self.n_features_in_ = X.shape[2]
        self.window_steps_ = X.shape[1]
        return self


class FederatedLSTMClassifier(_LSTMBase):
    """LSTM trained with FedAvg; ``groups`` assigns each window to a client."""

    def __init__(self, hidden_units=50, batch_size=64, learning_rate=1e-3,
                 clients_per_round=fedavg.ALL, local_epochs=1, rounds=100,
                 client_optimizer="reset", clip_norm=trainer.CLIP_NORM, random_state=0,
                 n_jobs=1):
        self.hidden_units = hidden_units
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.clients_per_round = clients_per_round
        self.local_epochs = local_epochs
        self.rounds = rounds
        self.client_optimizer = client_optimizer
        self.clip_norm = clip_norm
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y, groups, eval_set=None):
        X, y = check_windows(X, y)
        groups = np.asarray(groups)
        if groups.shape != y.shape:
            raise ValueError("groups must hold one client id per window")
        clients = [fedavg.Client(str(g), X[groups == g], y[groups == g])
                   for g in sorted(set(groups.tolist()), key=str)]
        test = None
        if eval_set is not None:
            test = _Data(*check_windows(*eval_set, n_features=X.shape[2]))
        config = fedavg.RoundConfig(
            self.clients_per_round, self.local_epochs, self.rounds,
            self._hyperparams(X.shape[1]), self.random_state, self.clip_norm,
            self.client_optimizer,
        )
        self.params_, self.history_ = fedavg.run_federated(
            config, clients, test, n_features=X.shape[2], n_jobs=self.n_jobs)
        self.classes_ = CLASSES
        self.n_features_in_ = X.shape[2]
        self.window_steps_ = X.shape[1]
        return self


class _Data:
    def __init__(self, X, y):
        self.X, self.y = X, y

    def __len__(self):
        return len(self.y)
