"""Feature windows, normalization, train/val/test splits and client shards."""
import json
import logging
import math
import os
import warnings
import zlib
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ingest
from .exceptions import GapTooLarge, FedTurnError, TooShort, VehicleTooSmall
from .ingest import METERS_PER_DEG_LAT, REFERENCE_LAT_DEG

log = logging.getLogger(__name__)

FEATURE_NAMES = (
    "steering_wheel_angle", "vehicle_speed", "accel_pedal_pos", "brake_status",
    "heading_sin", "heading_cos", "gps_d_north_m", "gps_d_east_m",
    "signal_off", "signal_left", "signal_right",
)
N_FEATURES = len(FEATURE_NAMES)
# z-scored columns; brake and the signal one-hot pass through unscaled
SCALED = np.array([1, 1, 1, 0, 1, 1, 1, 1, 0, 0, 0], dtype=bool)
STD_FLOOR = 1e-8
DEFAULT_WINDOW = 5
DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)
MIN_EVENTS_PER_VEHICLE = 3
SPLITS = ("train", "val", "test", "probe")

WindowSample = namedtuple("WindowSample", "features label vehicle_id trip_id end_step")


def featurize_trip(trip):
    """Per-step feature matrix ``(T, 11)`` for a whole UniformTrip."""
    ch = trip.channels
    T = trip.duration_s
    heading = np.radians(ch[ingest.HEADING])
    north = np.zeros(T)
    east = np.zeros(T)
    north[1:] = np.diff(ch[ingest.GPS_LAT]) * METERS_PER_DEG_LAT
    east[1:] = np.diff(ch[ingest.GPS_LON]) * (
        METERS_PER_DEG_LAT * math.cos(math.radians(REFERENCE_LAT_DEG)))
    onehot = np.zeros((T, 3))
    onehot[np.arange(T), trip.labels] = 1.0
    cols = [
        ch[ingest.STEERING], ch[ingest.SPEED], ch[ingest.ACCEL_PEDAL], ch[ingest.BRAKE],
        np.sin(heading), np.cos(heading), north, east,
    ]
    return np.column_stack(cols + [onehot])


def featurize(event):
    """Feature rows for the padded span of one TurnEvent."""
    return featurize_trip(event.trip)[event.start:event.stop + 1]


def build_windows(features, labels, window_steps):
    """All ``T - W`` windows and the label that follows each one.

    Window ``i`` covers rows ``[i, i + W)`` and is labelled ``labels[i + W]``.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    T = len(features)
    if window_steps < 1:
        raise ValueError("window_steps must be positive")
    if T < window_steps + 1:
        raise TooShort(f"need at least {window_steps + 1} steps for window {window_steps}, got {T}")
    X = sliding_window_view(features[:-1], window_steps, axis=0).transpose(0, 2, 1)
    return np.ascontiguousarray(X), labels[window_steps:].copy()


@dataclass
class WindowSet:
    """Column store of WindowSamples.

    ``end`` is the trip step of each label; ``aux`` is a free per-window
    flag (probe windows use it to mark steps inside the true maneuver).
    """

    X: np.ndarray
    y: np.ndarray
    vehicle: np.ndarray
    trip: np.ndarray
    end: np.ndarray
    aux: np.ndarray = None

    def __post_init__(self):
        if self.aux is None:
            self.aux = np.zeros(len(self.y), dtype=np.int8)

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i):
        return WindowSample(self.X[i], int(self.y[i]), str(self.vehicle[i]),
                            str(self.trip[i]), int(self.end[i]))

    @property
    def window_steps(self):
        return self.X.shape[1]

    @classmethod
    def empty(cls, window_steps, n_features=N_FEATURES):
        return cls(np.zeros((0, window_steps, n_features)), np.zeros(0, np.int64),
                   np.zeros(0, dtype=object), np.zeros(0, dtype=object),
                   np.zeros(0, np.int64))

    @classmethod
    def concat(cls, parts, window_steps=DEFAULT_WINDOW):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty(window_steps)
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("X", "y", "vehicle", "trip", "end", "aux")))

    def subset(self, index):
        return WindowSet(self.X[index], self.y[index], self.vehicle[index],
                         self.trip[index], self.end[index], self.aux[index])

    def with_features(self, X):
        return WindowSet(X, self.y, self.vehicle, self.trip, self.end, self.aux)

    def class_histogram(self):
        return np.bincount(self.y, minlength=3).tolist()


def event_windows(event, window_steps):
    X, y = build_windows(featurize(event), event.labels, window_steps)
    n = len(y)
    return WindowSet(
        X, y,
        np.full(n, event.trip.vehicle_id, dtype=object),
        np.full(n, event.trip.trip_id, dtype=object),
        event.start + window_steps + np.arange(n),
    )


# --- normalization --------------------------------------------------------

@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    scaled: np.ndarray

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "scaled": self.scaled.astype(int).tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], np.float64), np.asarray(d["std"], np.float64),
                   np.asarray(d["scaled"], bool))


def fit_normalization(X, scaled=SCALED):
    """Per-feature mean/std over every row of every training window."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) < 2:
        raise ValueError("normalization needs at least 2 training samples")
    rows = X.reshape(-1, X.shape[-1])
    scaled = np.asarray(scaled, bool)
    mean = np.where(scaled, rows.mean(axis=0), 0.0)
    std = np.where(scaled, rows.std(axis=0), 1.0)
    return NormalizationStats(mean, std, scaled.copy())


def apply_normalization(stats, X):
    X = np.asarray(X, dtype=np.float64)
    safe = np.where(stats.std < STD_FLOOR, 1.0, stats.std)
    out = (X - stats.mean) / safe
    # constant features collapse to 0
    out[..., stats.scaled & (stats.std < STD_FLOOR)] = 0.0
    return out


def invert_normalization(stats, X):
    safe = np.where(stats.std < STD_FLOOR, 0.0, stats.std)
    return np.asarray(X, np.float64) * safe + stats.mean


# --- splits ---------------------------------------------------------------

@dataclass
class ClientDataset:
    vehicle_id: str
    train: WindowSet
    val: WindowSet
    test: WindowSet

    @property
    def held_out(self):
        return WindowSet.concat([self.val, self.test], self.train.window_steps)


@dataclass
class Dataset:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    clients: list
    stats: NormalizationStats
    window_steps: int
    excluded_vehicles: list = field(default_factory=list)
    info: dict = field(default_factory=dict)


def stable_key(text):
    return zlib.crc32(str(text).encode("utf-8"))


def split_counts(n, fractions):
    """Floor the val/test shares; the remainder goes to train."""
    n_val = math.floor(n * fractions[1])
    n_test = math.floor(n * fractions[2])
    return n - n_val - n_test, n_val, n_test


def _split_units(events):
    # events whose padded spans overlap in one trip must share a split
    units = []
    for ev in sorted(events, key=lambda e: (e.trip.trip_id, e.start)):
        last = units[-1][-1] if units else None
        if last is not None and last.trip is ev.trip and ev.start <= last.stop:
            units[-1].append(ev)
        else:
            units.append([ev])
    return units


def split_and_partition(events_by_vehicle, window_steps=DEFAULT_WINDOW,
                        fractions=DEFAULT_FRACTIONS, seed=0, normalize=True):
    """Event-level split per vehicle, then one ClientDataset per vehicle.

    The pooled train/val/test sets are the unions of the client sets taken
    in sorted vehicle order.  Normalization statistics come from the
    pooled train set and are applied everywhere.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"split fractions must be 3 positive values summing to 1, got {fractions}")
    clients, excluded = [], []
    for vid in sorted(events_by_vehicle):
        units = _split_units(events_by_vehicle[vid])
        if len(units) < MIN_EVENTS_PER_VEHICLE:
            warnings.warn(f"vehicle {vid!r} has {len(units)} usable events; excluded",
                          VehicleTooSmall, stacklevel=2)
            excluded.append(vid)
            continue
        rng = np.random.default_rng([int(seed), stable_key(vid)])
        order = rng.permutation(len(units))
        n_train, n_val, _ = split_counts(len(units), fractions)
        parts = [order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]]
        sets = [
            WindowSet.concat([event_windows(ev, window_steps)
                              for k in sorted(idx) for ev in units[k]], window_steps)
            for idx in parts
        ]
        clients.append(ClientDataset(vid, *sets))

    train = WindowSet.concat([c.train for c in clients], window_steps)
    val = WindowSet.concat([c.val for c in clients], window_steps)
    test = WindowSet.concat([c.test for c in clients], window_steps)
    stats = fit_normalization(train.X) if normalize else NormalizationStats(
        np.zeros(N_FEATURES), np.ones(N_FEATURES), np.zeros(N_FEATURES, bool))
    if normalize:
        train, val, test = (normalize_set(stats, s) for s in (train, val, test))
        clients = [ClientDataset(c.vehicle_id, *(normalize_set(stats, s)
                                                 for s in (c.train, c.val, c.test)))
                   for c in clients]
    return Dataset(train, val, test, clients, stats, window_steps, excluded)


def normalize_set(stats, ws):
    return ws.with_features(apply_normalization(stats, ws.X))


# --- end-to-end preprocessing --------------------------------------------

def process_trips(raw_trips, max_gap_s=ingest.MAX_GAP_S):
    """Continuity check, resampling and segmentation for a batch of trips.

    Returns ``(uniform_trips, events_by_vehicle, report)``; trips that fail
    any step are excluded and counted in the report.
    """
    report = {"trips": 0, "excluded_gap": 0, "excluded_invalid": 0,
              "events": 0, "dropped_candidates": 0}
    uniform, events = {}, {}
    for raw in raw_trips:
        report["trips"] += 1
        try:
            ingest.validate_continuity(raw, max_gap_s)
            trip = ingest.resample_to_1hz(raw)
        except GapTooLarge as exc:
            log.info("excluding trip %s: %s", raw.trip_id, exc)
            report["excluded_gap"] += 1
            continue
        except FedTurnError as exc:
            log.warning("excluding trip %s: %s", raw.trip_id, exc)
            report["excluded_invalid"] += 1
            continue
        uniform[(raw.vehicle_id, raw.trip_id)] = trip
        found, dropped = ingest.segment_turn_events(trip)
        report["events"] += len(found)
        report["dropped_candidates"] += dropped
        events.setdefault(raw.vehicle_id, []).extend(found)
    return uniform, events, report


def probe_windows(trip, maneuver_start_s, maneuver_end_s, window_steps, stats=None):
    """Windows over a whole trip; ``aux`` marks labels inside the maneuver."""
    X, y = build_windows(featurize_trip(trip), trip.labels, window_steps)
    end = window_steps + np.arange(len(y))
    t = trip.start_s + end
    aux = ((t >= maneuver_start_s) & (t <= maneuver_end_s)).astype(np.int8)
    if stats is not None:
        X = apply_normalization(stats, X)
    n = len(y)
    return WindowSet(X, y, np.full(n, trip.vehicle_id, dtype=object),
                     np.full(n, trip.trip_id, dtype=object), end, aux)


# --- serialization --------------------------------------------------------

def save_dataset(dataset, out_dir, probe=None, extra_info=None):
    """Write ``windows.npz`` plus a JSON manifest describing it."""
    os.makedirs(out_dir, exist_ok=True)
    sets = [dataset.train, dataset.val, dataset.test]
    if probe is not None:
        sets.append(probe)
    allw = WindowSet.concat(sets, dataset.window_steps)
    split = np.concatenate([np.full(len(s), k, np.int8) for k, s in enumerate(sets)])
    np.savez_compressed(
        os.path.join(out_dir, "windows.npz"),
        X=allw.X, y=allw.y, vehicle=allw.vehicle.astype(str), trip=allw.trip.astype(str),
        end=allw.end, aux=allw.aux, split=split,
    )
    manifest = {
        "format": "fedturn-dataset/1",
        "feature_names": list(FEATURE_NAMES),
        "window_steps": dataset.window_steps,
        "normalization": dataset.stats.to_dict(),
        "window_counts": {name: len(s) for name, s in zip(SPLITS, sets)},
        "class_histogram": {name: s.class_histogram() for name, s in zip(SPLITS, sets)},
        "clients": [
            {"vehicle_id": c.vehicle_id, "train": len(c.train), "val": len(c.val),
             "test": len(c.test)}
            for c in dataset.clients
        ],
        "excluded_vehicles": list(dataset.excluded_vehicles),
    }
    manifest.update(dataset.info)
    if extra_info:
        manifest.update(extra_info)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(out_dir):
    """Inverse of save_dataset; returns ``(Dataset, probe WindowSet, manifest)``."""
    with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    with np.load(os.path.join(out_dir, "windows.npz")) as z:
        allw = WindowSet(z["X"], z["y"], z["vehicle"].astype(object),
                         z["trip"].astype(object), z["end"], z["aux"])
        split = z["split"]
    W = int(manifest["window_steps"])
    sets = [allw.subset(split == k) for k in range(len(SPLITS))]
    clients = []
    for entry in manifest["clients"]:
        vid = entry["vehicle_id"]
        clients.append(ClientDataset(vid, *(s.subset(s.vehicle == vid) for s in sets[:3])))
    stats = NormalizationStats.from_dict(manifest["normalization"])
    ds = Dataset(sets[0], sets[1], sets[2], clients, stats, W,
                 manifest.get("excluded_vehicles", []))
    return ds, sets[3], manifest
