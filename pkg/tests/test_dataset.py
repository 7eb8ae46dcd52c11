import warnings
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fedturn import dataset, ingest
from fedturn.dataset import WindowSet
from fedturn.exceptions import TooShort, VehicleTooSmall

from conftest import raw_trip, uniform_trip


def event_with(labels, **channels):
    labels = np.asarray(labels)
    t = np.arange(len(labels), dtype=float)
    trip = ingest.resample_to_1hz(raw_trip(t, labels.astype(float), **channels))
    events, _ = ingest.segment_turn_events(trip)
    return events[0]


LABELS = [0] * 45 + [1] * 6 + [0] * 12


# --- featurize ------------------------------------------------------------

def test_featurize_heading_encoding():
    n = len(LABELS)
    heading = np.where(np.arange(n) < 50, 0.0, 90.0)
    F = dataset.featurize(event_with(LABELS, **{ingest.HEADING: heading}))
    assert F.shape == (56, 11)
    # step 0 of the event is trip step 5 (heading 0), the last is heading 90
    np.testing.assert_allclose(F[0, 4:6], [0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(F[-1, 4:6], [1.0, 0.0], atol=1e-12)


def test_featurize_stationary_has_zero_displacement():
    n = len(LABELS)
    F = dataset.featurize(event_with(LABELS, **{ingest.GPS_LAT: np.full(n, 42.3),
                                                 ingest.GPS_LON: np.full(n, -83.0)}))
    assert not F[:, 6:8].any()


def test_featurize_one_hot_signal():
    ev = event_with(LABELS)
    F = dataset.featurize(ev)
    assert len(F) == len(ev) == 40 + 6 + 10
    np.testing.assert_array_equal(F[40, 8:], [0.0, 1.0, 0.0])
    np.testing.assert_array_equal(F[0, 8:], [1.0, 0.0, 0.0])


def test_featurize_displacement_in_meters():
    n = len(LABELS)
    lat = 42.3 + np.arange(n) * 1e-4
    F = dataset.featurize(event_with(LABELS, **{ingest.GPS_LAT: lat,
                                                 ingest.GPS_LON: np.full(n, -83.0)}))
    np.testing.assert_allclose(F[1:, 6], 1e-4 * ingest.METERS_PER_DEG_LAT, rtol=1e-6)


# --- windows ----------------------------------------------------------------

def test_build_windows_single():
    X, y = dataset.build_windows(np.arange(12.0).reshape(6, 2), [0, 0, 0, 0, 0, 2], 5)
    assert X.shape == (1, 5, 2) and y.tolist() == [2]


def test_build_windows_too_short():
    with pytest.raises(TooShort):
        dataset.build_windows(np.zeros((5, 3)), np.zeros(5, int), 5)


def test_build_windows_count():
    X, y = dataset.build_windows(np.zeros((55, 11)), np.zeros(55, int), 5)
    assert len(X) == len(y) == 50


@given(st.integers(1, 12), st.integers(0, 40), st.integers(1, 4))
def test_build_windows_rows_and_labels(W, extra, F):
    T = W + 1 + extra
    feats = np.arange(T * F, dtype=float).reshape(T, F)
    labels = np.arange(T) % 3
    X, y = dataset.build_windows(feats, labels, W)
    assert len(X) == T - W
    for i in range(len(X)):
        np.testing.assert_array_equal(X[i], feats[i:i + W])
        assert y[i] == labels[i + W]


def test_event_windows_count_and_position(small_events):
    _, events, _ = small_events
    for ev in [e for evs in events.values() for e in evs][:20]:
        ws = dataset.event_windows(ev, 5)
        assert len(ws) == len(ev) - 5
        np.testing.assert_array_equal(ws.y, ev.trip.labels[ws.end])
        assert ws.end[0] == ev.start + 5 and ws.end[-1] == ev.stop


def test_window_sample_access():
    ws = dataset.event_windows(event_with(LABELS), 5)
    s = ws[0]
    assert s.features.shape == (5, 11)
    assert (s.vehicle_id, s.trip_id, s.label) == ("v0", "t0", 0)


# --- normalization ------------------------------------------------------------

def test_normalization_two_values():
    X = np.array([0.0, 10.0]).reshape(2, 1, 1)
    stats = dataset.fit_normalization(X, scaled=[True])
    assert (stats.mean[0], stats.std[0]) == (5.0, 5.0)
    np.testing.assert_array_equal(dataset.apply_normalization(stats, X).ravel(), [-1.0, 1.0])


def test_normalization_constant_feature_maps_to_zero():
    X = np.full((4, 3, 1), 7.0)
    stats = dataset.fit_normalization(X, scaled=[True])
    assert not dataset.apply_normalization(stats, X).any()


def test_normalization_train_mean_maps_to_zero():
    rng = np.random.default_rng(0)
    X = rng.normal(3.0, 2.0, size=(50, 5, 11))
    stats = dataset.fit_normalization(X)
    probe = np.broadcast_to(stats.mean, (1, 5, 11))
    out = dataset.apply_normalization(stats, probe)
    assert not out[..., dataset.SCALED].any()


def test_normalization_leaves_binary_columns():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(20, 5, 11))
    X[..., 3] = rng.integers(0, 2, size=(20, 5))
    out = dataset.apply_normalization(dataset.fit_normalization(X), X)
    np.testing.assert_array_equal(out[..., ~dataset.SCALED], X[..., ~dataset.SCALED])


@given(arrays(np.float64, (6, 3, 11), elements=st.floats(-1e3, 1e3)))
def test_normalization_round_trip(X):
    stats = dataset.fit_normalization(X)
    back = dataset.invert_normalization(stats, dataset.apply_normalization(stats, X))
    varying = stats.std >= dataset.STD_FLOOR
    np.testing.assert_allclose(back[..., varying], X[..., varying], rtol=0, atol=1e-9)


def test_normalization_stats_serialize():
    stats = dataset.fit_normalization(np.random.default_rng(2).normal(size=(10, 5, 11)))
    again = dataset.NormalizationStats.from_dict(stats.to_dict())
    np.testing.assert_array_equal(again.mean, stats.mean)
    np.testing.assert_array_equal(again.std, stats.std)


# --- splits -------------------------------------------------------------------

def test_split_counts_ten_events():
    assert dataset.split_counts(10, (0.8, 0.1, 0.1)) == (8, 1, 1)


@given(st.integers(3, 500), st.floats(0.05, 0.4), st.floats(0.05, 0.4))
def test_split_counts_partition(n, f_val, f_test):
    fr = (1 - f_val - f_test, f_val, f_test)
    n_train, n_val, n_test = dataset.split_counts(n, fr)
    assert n_train + n_val + n_test == n
    assert n_train >= n - n_val - n_test and min(n_val, n_test) >= 0


def synthetic_events(n_events, vehicle="v0"):
    events = []
    for k in range(n_events):
        trip = uniform_trip(LABELS, trip_id=f"{vehicle}_t{k}", vehicle_id=vehicle)
        events += ingest.segment_turn_events(trip)[0]
    return events


def test_split_ten_events_per_vehicle():
    data = dataset.split_and_partition({"v0": synthetic_events(10)}, 5, seed=0)
    c = data.clients[0]
    per_event = len(LABELS) - 7 - 5
    assert (len(c.train), len(c.val), len(c.test)) == (8 * per_event, per_event, per_event)


def test_split_deterministic(small_events):
    _, events, _ = small_events
    a = dataset.split_and_partition(events, 5, seed=4)
    b = dataset.split_and_partition(events, 5, seed=4)
    for name in ("train", "val", "test"):
        np.testing.assert_array_equal(getattr(a, name).X, getattr(b, name).X)
        np.testing.assert_array_equal(getattr(a, name).trip, getattr(b, name).trip)


def test_union_of_client_train_is_central(small_dataset):
    central = Counter(zip(small_dataset.train.trip, small_dataset.train.end))
    clients = Counter()
    for c in small_dataset.clients:
        assert set(c.train.vehicle) <= {c.vehicle_id}
        clients.update(zip(c.train.trip, c.train.end))
    assert central == clients
    stacked = np.concatenate([c.train.X for c in small_dataset.clients])
    np.testing.assert_array_equal(stacked, small_dataset.train.X)


def test_no_step_shared_between_splits(small_dataset):
    W = small_dataset.window_steps

    def covered(ws):
        return {(t, s) for t, e in zip(ws.trip, ws.end) for s in range(e - W, e + 1)}

    tr, va, te = (covered(getattr(small_dataset, n)) for n in ("train", "val", "test"))
    assert not (tr & va) and not (tr & te) and not (va & te)


def test_overlapping_events_share_split():
    labels = [0] * 40 + [1] * 3 + [0] * 40 + [2] * 3 + [0] * 10
    events = []
    for k in range(6):
        events += ingest.segment_turn_events(uniform_trip(labels, trip_id=f"t{k}"))[0]
    units = dataset._split_units(events)
    assert len(units) == 6 and all(len(u) == 2 for u in units)


def test_small_vehicle_excluded_with_warning():
    events = {"big": synthetic_events(5, "big"), "tiny": synthetic_events(2, "tiny")}
    with pytest.warns(VehicleTooSmall):
        data = dataset.split_and_partition(events, 5)
    assert data.excluded_vehicles == ["tiny"]
    assert [c.vehicle_id for c in data.clients] == ["big"]


def test_test_set_normalized_with_train_stats(small_events, small_dataset):
    raw = dataset.split_and_partition(small_events[1], 5, seed=0, normalize=False)
    stats = dataset.fit_normalization(raw.train.X)
    np.testing.assert_allclose(small_dataset.test.X, dataset.apply_normalization(stats, raw.test.X))


def test_train_label_mix(small_dataset):
    off, left, right = small_dataset.train.class_histogram()
    total = off + left + right
    assert (left + right) / total >= 0.25
    assert left > right


def test_process_trips_reports_exclusions():
    good = raw_trip(np.arange(0.0, 80.0), np.array([0] * 45 + [1] * 5 + [0] * 30, float))
    t = np.concatenate([np.arange(0.0, 20.0), np.arange(40.0, 80.0)])
    gappy = raw_trip(np.arange(0.0, 80.0), trip_id="gap",
                     **{ingest.SPEED: (t, np.ones_like(t))})
    short = raw_trip(np.array([0.1, 0.5]), trip_id="short")
    uniform, events, report = dataset.process_trips([good, gappy, short])
    assert report == {"trips": 3, "excluded_gap": 1, "excluded_invalid": 1,
                      "events": 1, "dropped_candidates": 0}
    assert list(uniform) == [("v0", "t0")] and len(events["v0"]) == 1


def test_probe_windows_mark_maneuver():
    trip = uniform_trip([0] * 80)
    ws = dataset.probe_windows(trip, 30.0, 40.0, 5)
    assert len(ws) == 75
    assert ws.end[ws.aux == 1].tolist() == list(range(30, 41))


def test_save_load_round_trip(tmp_path, small_dataset):
    probe = dataset.probe_windows(uniform_trip([0] * 60), 10, 20, 5, small_dataset.stats)
    manifest = dataset.save_dataset(small_dataset, tmp_path, probe, {"note": "x"})
    data, probe2, manifest2 = dataset.load_dataset(tmp_path)
    assert manifest2 == manifest and manifest["window_steps"] == 5
    assert manifest["feature_names"] == list(dataset.FEATURE_NAMES)
    for name in ("train", "val", "test"):
        a, b = getattr(small_dataset, name), getattr(data, name)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.y, b.y)
        assert a.trip.tolist() == b.trip.tolist()
        assert manifest["window_counts"][name] == len(a)
    np.testing.assert_array_equal(probe2.aux, probe.aux)
    assert [c.vehicle_id for c in data.clients] == [c.vehicle_id for c in small_dataset.clients]
    for c1, c2 in zip(small_dataset.clients, data.clients):
        np.testing.assert_array_equal(c1.train.X, c2.train.X)


def test_window_set_concat_empty():
    ws = WindowSet.concat([], 5)
    assert len(ws) == 0 and ws.X.shape == (0, 5, 11)


def test_no_warning_for_regular_vehicles(small_events):
    _, events, _ = small_events
    with warnings.catch_warnings():
        warnings.simplefilter("error", VehicleTooSmall)
        dataset.split_and_partition(events, 5)
