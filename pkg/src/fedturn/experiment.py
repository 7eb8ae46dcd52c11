"""Central vs federated experiments on synthetic fleets."""
import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import dataset, fedavg, lstm, synthgen, trainer
from .ingest import CLASS_NAMES, OFF

log = logging.getLogger(__name__)


@dataclass
class PreparedData:
    data: dataset.Dataset
    probe: dataset.WindowSet
    fleet: synthgen.Fleet
    report: dict


def prepare(spec, window_steps=dataset.DEFAULT_WINDOW, fractions=dataset.DEFAULT_FRACTIONS,
            split_seed=None, max_gap_s=5.0):
    """Generate a fleet and turn it into a normalized, partitioned dataset.

    Trips whose driver forgot to signal cannot yield turn events; their
    full-trip windows are returned separately as the probe set.
    """
    fleet = synthgen.generate_fleet(spec)
    uniform, events, report = dataset.process_trips(fleet.trips, max_gap_s)
    seed = spec.seed if split_seed is None else split_seed
    data = dataset.split_and_partition(events, window_steps, fractions, seed)
    probe = forget_probe(fleet.meta, uniform, data.stats, window_steps)
    report = dict(report, probe_trips=int(len(set(probe.trip.tolist()))))
    return PreparedData(data, probe, fleet, report)


def forget_probe(metas, uniform_trips, stats, window_steps):
    parts = []
    for meta in metas:
        if not meta.forget:
            continue
        trip = uniform_trips.get((meta.vehicle_id, meta.trip_id))
        if trip is None:
            continue
        parts.append(dataset.probe_windows(trip, meta.maneuver_start_s, meta.maneuver_end_s,
                                           window_steps, stats))
    return dataset.WindowSet.concat(parts, window_steps)


def forget_detection(params, probe):
    """Share of forgotten-signal trips where some prediction inside the
    maneuver interval is not Off.  Returns ``(rate, n_trips)``."""
    inside = probe.aux == 1
    if not inside.any():
        return float("nan"), 0
    sub = probe.subset(inside)
    pred = trainer.predict(params, sub.X)
    trips = sorted(set(sub.trip.tolist()))
    hit = sum(bool((pred[sub.trip == t] != OFF).any()) for t in trips)
    return hit / len(trips), len(trips)


@dataclass
class ParityResult:
    seed: int
    central: object
    federated: object
    central_reports: list = field(repr=False, default_factory=list)
    federated_reports: list = field(repr=False, default_factory=list)
    forget_rate: float = float("nan")
    forget_trips: int = 0
    central_params: object = field(repr=False, default=None)
    federated_params: object = field(repr=False, default=None)
    seconds: float = 0.0

    @property
    def gap(self):
        return self.central.weighted_accuracy - self.federated.weighted_accuracy


def run_parity(prepared, seed, hyperparams=None, epochs=50, patience=5, rounds=30,
               local_epochs=5, clients_per_round=fedavg.ALL, n_jobs=1):
    """Train central and federated models on the same split and test set."""
    start = time.perf_counter()
    hp = hyperparams or trainer.Hyperparams(window_steps=prepared.data.window_steps)
    ds = prepared.data
    c_params, c_reports = trainer.train_centralized(
        trainer.TrainConfig(hp, epochs, seed, patience), ds.train, ds.val)
    f_params, f_reports = fedavg.run_federated(
        fedavg.RoundConfig(clients_per_round, local_epochs, rounds, hp, seed),
        ds.clients, ds.test, n_jobs=n_jobs)
    rate, n = forget_detection(f_params, prepared.probe)
    return ParityResult(
        seed, trainer.evaluate(c_params, ds.test.X, ds.test.y),
        trainer.evaluate(f_params, ds.test.X, ds.test.y), c_reports, f_reports, rate, n,
        c_params, f_params, time.perf_counter() - start,
    )


def write_curve_csv(reports, path, label=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["round", "test_acc_weighted", "test_f1_avg", "mean_local_loss", "participants"]
        w.writerow((["run"] if label is not None else []) + head)
        for r in reports:
            d = r.to_dict()
            row = [d["round"], d["test_acc_weighted"], d["test_f1_avg"], d["mean_local_loss"],
                   len(d["participants"])]
            w.writerow(([label] if label is not None else []) + row)


def write_traces_csv(params, windows, path, batch_size=4096):
    """Per-timestep predictions for plotting against ground truth."""
    probs = lstm.predict_proba(params, windows.X, batch_size)
    pred = np.argmax(probs, axis=1)
    order = np.lexsort((windows.end, windows.trip, windows.vehicle))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vehicle_id", "trip_id", "step", "label", "predicted"]
                   + [f"p_{c}" for c in CLASS_NAMES] + ["in_maneuver"])
        for i in order:
            w.writerow([windows.vehicle[i], windows.trip[i], int(windows.end[i]),
                        int(windows.y[i]), int(pred[i])]
                       + [f"{p:.6f}" for p in probs[i]] + [int(windows.aux[i])])
