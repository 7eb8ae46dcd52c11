"""Raw CAN-style signal logs: parsing, 1 Hz resampling, continuity checks and
off-on-off turn event extraction.

Raw logs are long-format CSV files with the header
``vehicle_id,trip_id,timestamp,channel,value``.  Each channel is sampled on
its own irregular clock; timestamps are seconds since trip start.
"""
import csv
import math
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    ChannelMissing,
    GapTooLarge,
    MalformedRow,
    NonMonotonicTimestamps,
    SpanTooShort,
    UnknownChannel,
)

STEERING = "steering_wheel_angle"
SPEED = "vehicle_speed"
ACCEL_PEDAL = "accel_pedal_pos"
BRAKE = "brake_status"
HEADING = "heading"
GPS_LAT = "gps_lat"
GPS_LON = "gps_lon"
TURN_SIGNAL = "turn_signal"

CHANNELS = (STEERING, SPEED, ACCEL_PEDAL, BRAKE, HEADING, GPS_LAT, GPS_LON, TURN_SIGNAL)
CONTINUOUS = (STEERING, SPEED, ACCEL_PEDAL, HEADING, GPS_LAT, GPS_LON)
CATEGORICAL = (BRAKE, TURN_SIGNAL)
CSV_HEADER = ("vehicle_id", "trip_id", "timestamp", "channel", "value")

OFF, LEFT, RIGHT = 0, 1, 2
CLASS_NAMES = ("off", "left", "right")

LOOKBACK_S = 40
TRAILING_S = 10
MAX_GAP_S = 5.0

# flat local tangent plane used to turn GPS degrees into meters
METERS_PER_DEG_LAT = 111_320.0
REFERENCE_LAT_DEG = 42.30

SignalRecord = namedtuple("SignalRecord", "vehicle_id trip_id timestamp channel value")


@dataclass
class RawTrip:
    """One trip's raw samples, stored column-wise per channel.

    ``channels`` maps a channel name to ``(timestamps, values)``, both 1-D
    float arrays with strictly increasing timestamps.
    """

    vehicle_id: str
    trip_id: str
    channels: dict = field(default_factory=dict)

    def records(self):
        for name in CHANNELS:
            if name not in self.channels:
                continue
            times, values = self.channels[name]
            for t, v in zip(times.tolist(), values.tolist()):
                yield SignalRecord(self.vehicle_id, self.trip_id, t, name, v)

    def __len__(self):
        return sum(len(t) for t, _ in self.channels.values())


@dataclass
class UniformTrip:
    """A trip on the 1 Hz grid.  Step ``k`` sits at raw time ``start_s + k``."""

    vehicle_id: str
    trip_id: str
    channels: dict
    labels: np.ndarray
    start_s: int = 0

    @property
    def duration_s(self):
        return len(self.labels)


@dataclass(frozen=True)
class TurnEvent:
    """An off-on-off episode padded with lookback and trailing context.

    Indices are steps of ``trip``; ``stop`` is inclusive.
    """

    trip: UniformTrip
    on_start: int
    on_end: int
    lookback_s: int = LOOKBACK_S
    trailing_s: int = TRAILING_S

    @property
    def start(self):
        return self.on_start - self.lookback_s

    @property
    def stop(self):
        return self.on_end + self.trailing_s

    def __len__(self):
        return self.stop - self.start + 1

    @property
    def labels(self):
        return self.trip.labels[self.start:self.stop + 1]

    def channel(self, name):
        return self.trip.channels[name][self.start:self.stop + 1]


def _validate_value(channel, value, where):
    if channel == TURN_SIGNAL and value not in (0.0, 1.0, 2.0):
        raise MalformedRow(f"{where}: turn_signal must be 0, 1 or 2, got {value}")
    if channel == BRAKE and value not in (0.0, 1.0):
        raise MalformedRow(f"{where}: brake_status must be 0 or 1, got {value}")
    if channel == HEADING and not 0.0 <= value < 360.0:
        raise MalformedRow(f"{where}: heading must lie in [0, 360), got {value}")


def parse_trip_log(path, schema=CHANNELS):
    """Read a raw log CSV into ``{(vehicle_id, trip_id): RawTrip}``.

    Group order follows first appearance in the file.
    """
    schema = set(schema)
    groups = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise MalformedRow(f"{path}:1: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            if not row:
                continue
            if len(row) != 5:
                raise MalformedRow(f"{where}: expected 5 fields, got {len(row)}")
            vid, tid, ts, channel, value = row
            try:
                t = float(ts)
                v = float(value)
            except ValueError:
                raise MalformedRow(f"{where}: unparseable number in {row!r}") from None
            if not (math.isfinite(t) and math.isfinite(v)):
                raise MalformedRow(f"{where}: non-finite number in {row!r}")
            if t < 0:
                raise MalformedRow(f"{where}: negative timestamp {t}")
            if channel not in schema:
                raise UnknownChannel(f"{where}: unknown channel {channel!r}")
            _validate_value(channel, v, where)
            per_channel = groups.setdefault((vid, tid), {})
            times, values = per_channel.setdefault(channel, ([], []))
            if times and t <= times[-1]:
                raise NonMonotonicTimestamps(
                    f"{where}: {channel} timestamp {t} does not increase past {times[-1]} "
                    f"in trip {tid!r}"
                )
            times.append(t)
            values.append(v)
    return {
        key: RawTrip(key[0], key[1], {
            name: (np.asarray(ts, dtype=np.float64), np.asarray(vs, dtype=np.float64))
            for name, (ts, vs) in chans.items()
        })
        for key, chans in groups.items()
    }


def _format_value(v):
    # repr round-trips a float exactly; integral values are written bare
    return str(int(v)) if float(v).is_integer() and abs(v) < 1e15 else repr(float(v))


def write_trip_log(trips, path):
    """Write RawTrips to the raw log CSV format (inverse of parse_trip_log)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for trip in trips:
            for rec in trip.records():
                writer.writerow((
                    rec.vehicle_id, rec.trip_id, _format_value(rec.timestamp),
                    rec.channel, _format_value(rec.value),
                ))


def find_gaps(raw, max_gap_s=MAX_GAP_S):
    """List ``(channel, start, length)`` for every silence longer than max_gap_s."""
    gaps = []
    for name in CHANNELS:
        if name not in raw.channels:
            continue
        times = raw.channels[name][0]
        dt = np.diff(times)
        for k in np.flatnonzero(dt > max_gap_s):
            gaps.append((name, float(times[k]), float(dt[k])))
    return gaps


def validate_continuity(raw, max_gap_s=MAX_GAP_S):
    """Raise GapTooLarge on the first channel silence longer than max_gap_s.

    A gap of exactly ``max_gap_s`` is accepted.
    """
    gaps = find_gaps(raw, max_gap_s)
    if gaps:
        raise GapTooLarge(*gaps[0])
    return True


def _interp_heading(grid, times, degrees):
    unwrapped = np.unwrap(degrees, period=360.0)
    return np.mod(np.interp(grid, times, unwrapped), 360.0)


def resample_to_1hz(raw, channels=CHANNELS):
    """Align all channels onto a shared integer-second grid.

    The grid runs from ceil(latest first sample) to floor(earliest last
    sample) over the continuous channels.  Continuous channels are interpolated linearly (heading on
    the unwrapped angle); categorical channels hold the most recent sample
    at or before each grid point, or the first sample before it exists.
    """
    for name in channels:
        if name not in raw.channels or len(raw.channels[name][0]) < 2:
            raise ChannelMissing(
                f"trip {raw.trip_id!r}: channel {name!r} needs at least 2 samples"
            )
    # categorical channels are change-driven and extend both ways, so only
    # the continuous channels bound the grid
    bounding = [name for name in channels if name not in CATEGORICAL] or list(channels)
    first = max(raw.channels[name][0][0] for name in bounding)
    last = min(raw.channels[name][0][-1] for name in bounding)
    start, stop = math.ceil(first), math.floor(last)
    if stop - start + 1 < 2:
        raise SpanTooShort(
            f"trip {raw.trip_id!r}: common span [{first}, {last}] holds fewer than 2 grid points"
        )
    grid = np.arange(start, stop + 1, dtype=np.float64)

    out = {}
    for name in channels:
        times, values = raw.channels[name]
        if name == HEADING:
            out[name] = _interp_heading(grid, times, values)
        elif name in CATEGORICAL:
            idx = np.searchsorted(times, grid, side="right") - 1
            out[name] = values[np.clip(idx, 0, None)].copy()
        else:
            out[name] = np.interp(grid, times, values)
    labels = out[TURN_SIGNAL].astype(np.int64) if TURN_SIGNAL in out else np.zeros(len(grid), np.int64)
    return UniformTrip(raw.vehicle_id, raw.trip_id, out, labels, start_s=int(start))


def uniform_to_raw(trip):
    """Re-serialize a UniformTrip as raw samples on its own grid."""
    times = trip.start_s + np.arange(trip.duration_s, dtype=np.float64)
    return RawTrip(trip.vehicle_id, trip.trip_id, {
        name: (times.copy(), np.asarray(values, dtype=np.float64).copy())
        for name, values in trip.channels.items()
    })


def label_runs(labels):
    """Maximal runs of non-Off labels as inclusive ``(start, end)`` pairs."""
    on = np.asarray(labels) != OFF
    if not on.any():
        return []
    edges = np.diff(np.concatenate(([0], on.astype(np.int8), [0])))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def segment_turn_events(trip, lookback_s=LOOKBACK_S, trailing_s=TRAILING_S):
    """Extract padded off-on-off events from a trip.

    Returns ``(events, n_dropped)``.  A run is kept only when at least
    ``lookback_s`` Off steps precede it and ``trailing_s`` Off steps follow
    it inside the trip; runs touching the trip boundary are dropped too.
    """
    runs = label_runs(trip.labels)
    events, dropped = [], 0
    n = trip.duration_s
    for k, (s, e) in enumerate(runs):
        prev_end = runs[k - 1][1] if k else -1
        next_start = runs[k + 1][0] if k + 1 < len(runs) else n
        if s - prev_end - 1 >= lookback_s and next_start - e - 1 >= trailing_s:
            events.append(TurnEvent(trip, s, e, lookback_s, trailing_s))
        else:
            dropped += 1
    return events, dropped
