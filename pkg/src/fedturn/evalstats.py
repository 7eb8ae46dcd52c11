"""Classification metrics, the paired t-test and the hyperparameter grid."""
import csv
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .exceptions import EmptyMatrix, LengthMismatch, NTooSmall

log = logging.getLogger(__name__)

N_CLASSES = 3
CLASS_NAMES = ("off", "left", "right")

CENTRAL_GRID = {
    "batch_size": [64, 128, 256],
    "window_steps": [5, 10, 15, 20, 30, 40],
    "hidden_units": [50, 100, 150],
    "learning_rate": [1e-3, 1e-4, 1e-5],
}
FEDERATED_GRID = {
    "batch_size": [64, 128],
    "window_steps": [5],
    "hidden_units": [50],
    "learning_rate": [1e-3, 1e-4, 1e-5],
    "clients_per_round": [10, 25, "all"],
    "rounds": [100],
    "local_epochs": [1, 5, 10],
}
# federated cells are compared with central cells sharing these values
PAIR_KEYS = ("batch_size", "learning_rate")
PAIR_FILTER = {"window_steps": 5, "hidden_units": 50}


# --- metrics --------------------------------------------------------------

def confusion(predictions, labels):
    """3x3 counts; rows are true classes, columns predicted classes."""
    predictions = np.asarray(predictions, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if predictions.shape != labels.shape:
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels")
    for name, arr in (("predictions", predictions), ("labels", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= N_CLASSES):
            raise ValueError(f"{name} must be class indices in 0..{N_CLASSES - 1}")
    return np.bincount(labels * N_CLASSES + predictions,
                       minlength=N_CLASSES * N_CLASSES).reshape(N_CLASSES, N_CLASSES)


@dataclass
class Metrics:
    per_class_accuracy: np.ndarray
    weighted_accuracy: float
    per_class_f1: np.ndarray
    average_f1: float
    confusion: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        out = {"weighted_accuracy": self.weighted_accuracy, "average_f1": self.average_f1}
        for k, name in enumerate(CLASS_NAMES):
            out[f"accuracy_{name}"] = float(self.per_class_accuracy[k])
            out[f"f1_{name}"] = float(self.per_class_f1[k])
        if self.confusion is not None:
            out["confusion"] = np.asarray(self.confusion).tolist()
        return out


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def metrics_from_confusion(cm):
    """Recall per class, trace/total accuracy, per-class and macro F1.

    A class that never occurs and is never predicted scores F1 = 0.
    """
    cm = np.asarray(cm, dtype=np.int64)
    if cm.shape != (N_CLASSES, N_CLASSES):
        raise ValueError(f"confusion matrix must be {N_CLASSES}x{N_CLASSES}")
    total = cm.sum()
    if total <= 0:
        raise EmptyMatrix("confusion matrix has no samples")
    tp = np.diag(cm).astype(np.float64)
    recall = _ratio(tp, cm.sum(axis=1).astype(np.float64))
    precision = _ratio(tp, cm.sum(axis=0).astype(np.float64))
    f1 = _ratio(2 * precision * recall, precision + recall)
    return Metrics(recall, float(tp.sum() / total), f1, float(f1.mean()), cm)


def evaluate_predictions(predictions, labels):
    return metrics_from_confusion(confusion(predictions, labels))


# --- Student t distribution ----------------------------------------------

def _betacf(a, b, x, max_iter=500, tol=1e-15):
    # modified Lentz evaluation of the incomplete beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a, b, x):
    """Regularized incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t, df):
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(x, y):
    """Paired t-test on ``x - y``; returns ``(t, two-sided p)``.

    All-zero differences give ``(0.0, 1.0)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise LengthMismatch(f"paired samples differ in length: {x.shape} vs {y.shape}")
    n = x.size
    if n < 2:
        raise NTooSmall(f"paired t-test needs at least 2 pairs, got {n}")
    d = x - y
    if not d.any():
        return 0.0, 1.0
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        return math.copysign(math.inf, mean), 0.0
    t = float(mean / (sd / math.sqrt(n)))
    return t, t_two_sided_p(t, n - 1)


# --- grid search ------------------------------------------------------------

def expand_grid(grid):
    """Cartesian product of a ``{name: [values]}`` grid, in key order."""
    keys = list(grid)
    if not keys or any(len(grid[k]) == 0 for k in keys):
        raise ValueError("grid must have at least one value per hyperparameter")
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


@dataclass
class GridResult:
    assignment: dict
    metrics: Metrics = None
    seed: int = 0
    wall_time_s: float = 0.0
    error: str = None
    index: int = 0


def _run_cell(runner, index, assignment, seed):
    start = time.perf_counter()
    try:
        metrics = runner(dict(assignment), seed)
        error = None
    except Exception as exc:  # a failed cell is recorded, not fatal
        log.warning("grid cell %d %s failed: %s", index, assignment, exc)
        metrics, error = None, f"{type(exc).__name__}: {exc}"
    return GridResult(assignment, metrics, seed, time.perf_counter() - start, error, index)


def grid_search(grid, runner, seed=0, n_jobs=1):
    """Run ``runner(assignment, seed) -> Metrics`` once per grid cell.

    Results come back sorted by average F1 (best first), ties and failed
    cells ordered by cell index, so execution order never matters.
    """
    cells = expand_grid(grid)
    if n_jobs == 1:
        results = [_run_cell(runner, i, a, seed) for i, a in enumerate(cells)]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(
            delayed(_run_cell)(runner, i, a, seed) for i, a in enumerate(cells))
    return sort_results(results)


def sort_results(results):
    def key(r):
        if r.metrics is None:
            return (1, 0.0, r.index)
        return (0, -r.metrics.average_f1, r.index)

    return sorted(results, key=key)


GRID_METRIC_COLUMNS = ("weighted_accuracy", "f1_off", "f1_left", "f1_right", "average_f1")


def write_grid_csv(results, path):
    keys = []
    for r in results:
        keys += [k for k in r.assignment if k not in keys]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(keys + list(GRID_METRIC_COLUMNS) + ["seed", "runtime_s", "error"])
        for r in results:
            m = r.metrics.to_dict() if r.metrics is not None else {}
            writer.writerow(
                [r.assignment.get(k, "") for k in keys]
                + [repr(m[c]) if c in m else "" for c in GRID_METRIC_COLUMNS]
                + [r.seed, f"{r.wall_time_s:.3f}", r.error or ""]
            )


def _parse_cell(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_grid_csv(path):
    """Rows of a grid CSV as dicts with numbers parsed; failed rows skipped."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row.get("error") or not row.get("average_f1"):
                continue
            rows.append({k: _parse_cell(v) for k, v in row.items()})
    return rows


def pair_results(central_rows, federated_rows, keys=PAIR_KEYS, where=PAIR_FILTER):
    """Match grid rows on ``keys`` after restricting both sides to ``where``.

    Several federated cells share a key (they differ in clients per round
    and local epochs); the best of them by average F1 represents the key,
    and likewise on the central side.
    """
    def best_by_key(rows):
        best = {}
        for row in rows:
            if any(k in row and row[k] != v for k, v in where.items()):
                continue
            key = tuple(row[k] for k in keys)
            if key not in best or row["average_f1"] > best[key]["average_f1"]:
                best[key] = row
        return best

    central = best_by_key(central_rows)
    federated = best_by_key(federated_rows)
    common = sorted(set(central) & set(federated))
    return [(central[k], federated[k]) for k in common]


def ttest_report(central_rows, federated_rows, metrics=("weighted_accuracy", "average_f1")):
    pairs = pair_results(central_rows, federated_rows)
    report = []
    for metric in metrics:
        x = [c[metric] for c, _ in pairs]
        y = [f[metric] for _, f in pairs]
        t, p = paired_t_test(x, y)
        report.append({"metric": metric, "n_pairs": len(pairs), "t": t, "p": p})
    return report


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
