import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedturn import dataset, ingest, synthgen

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def raw_trip(times, values=None, vehicle_id="v0", trip_id="t0", **overrides):
    """RawTrip with every channel sampled on ``times``.

    Continuous channels default to affine ramps, categorical ones to 0;
    ``overrides`` maps channel name -> (times, values) or values.
    """
    times = np.asarray(times, dtype=np.float64)
    ramps = {
        ingest.STEERING: 2.0 * times - 5.0,
        ingest.SPEED: 30.0 + 0.5 * times,
        ingest.ACCEL_PEDAL: 10.0 + 0.1 * times,
        ingest.HEADING: 45.0 + 0.2 * times,
        ingest.GPS_LAT: 42.3 + 1e-5 * times,
        ingest.GPS_LON: -83.2 - 2e-5 * times,
        ingest.BRAKE: np.zeros_like(times),
        ingest.TURN_SIGNAL: np.zeros_like(times) if values is None else values,
    }
    channels = {}
    for name in ingest.CHANNELS:
        spec = overrides.get(name, ramps[name])
        if isinstance(spec, tuple):
            channels[name] = (np.asarray(spec[0], float), np.asarray(spec[1], float))
        else:
            channels[name] = (times.copy(), np.asarray(spec, float))
    return ingest.RawTrip(vehicle_id, trip_id, channels)


def uniform_trip(labels, trip_id="t0", vehicle_id="v0"):
    labels = np.asarray(labels, dtype=np.int64)
    raw = raw_trip(np.arange(len(labels), dtype=float), labels.astype(float),
                   vehicle_id=vehicle_id, trip_id=trip_id)
    return ingest.resample_to_1hz(raw)


@pytest.fixture(scope="session")
def small_fleet():
    spec = synthgen.ScenarioSpec(n_vehicles=4, trips_per_vehicle=10, seed=3)
    return spec, synthgen.generate_fleet(spec)


@pytest.fixture(scope="session")
def small_events(small_fleet):
    _, fleet = small_fleet
    uniform, events, report = dataset.process_trips(fleet.trips)
    return uniform, events, report


@pytest.fixture(scope="session")
def small_dataset(small_events):
    _, events, _ = small_events
    return dataset.split_and_partition(events, 5, (0.8, 0.1, 0.1), seed=0)
