"""Federated LSTM turn-signal classification on simulated vehicle fleets."""
from .estimators import FederatedLSTMClassifier, LSTMTurnSignalClassifier, WindowScaler
from .evalstats import Metrics, paired_t_test
from .exceptions import FedTurnError

__version__ = "0.1.0"

__all__ = [
    "FederatedLSTMClassifier",
    "FedTurnError",
    "LSTMTurnSignalClassifier",
    "Metrics",
    "WindowScaler",
    "paired_t_test",
]
