"""Synthetic fleets of driving trips with CAN-like signal traces.

Each trip is simulated on a fine 0.1 s kinematic grid (speed, yaw rate,
heading, planar position) and then sampled channel by channel on jittered
clocks, the way independent ECUs would log them.  Heading is measured in
degrees counter-clockwise from east, so a left turn adds roughly +90.
"""
import json
import math
import os
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import ingest
from .exceptions import ConfigError
from .ingest import (
    ACCEL_PEDAL, BRAKE, GPS_LAT, GPS_LON, HEADING, LEFT, METERS_PER_DEG_LAT, OFF,
    REFERENCE_LAT_DEG, RIGHT, SPEED, STEERING, TURN_SIGNAL, RawTrip,
)

DT = 0.1
WHEELBASE_M = 2.9
STEERING_RATIO = 15.0
STEERING_TURN_THRESHOLD_DEG = 45.0
LANE_WIDTH_M = 3.5
PRE_MANEUVER_S = (62.0, 85.0)
POST_MANEUVER_S = (24.0, 40.0)
MAX_ACCEL = 2.5  # m/s^2, peak of any speed ramp

# nominal logging period (s) and quantization step per channel
SAMPLE_PERIOD = {
    STEERING: 0.2, SPEED: 0.5, ACCEL_PEDAL: 0.5, BRAKE: 0.5,
    HEADING: 0.5, GPS_LAT: 0.2, GPS_LON: 0.2, TURN_SIGNAL: 0.5,
}
RESOLUTION = {
    STEERING: 0.1, SPEED: 0.01, ACCEL_PEDAL: 0.1, HEADING: 0.01,
    GPS_LAT: 1e-7, GPS_LON: 1e-7,
}
PHYSICAL_RANGE = {
    STEERING: (-720.0, 720.0), SPEED: (0.0, 250.0), ACCEL_PEDAL: (0.0, 100.0),
}


class Maneuver(str, Enum):
    LEFT_TURN = "LeftTurn"
    RIGHT_TURN = "RightTurn"
    LEFT_LANE_CHANGE = "LeftLaneChange"
    RIGHT_LANE_CHANGE = "RightLaneChange"
    STRAIGHT = "Straight"

    @property
    def signal(self):
        if self in (Maneuver.LEFT_TURN, Maneuver.LEFT_LANE_CHANGE):
            return LEFT
        if self in (Maneuver.RIGHT_TURN, Maneuver.RIGHT_LANE_CHANGE):
            return RIGHT
        return OFF

    @property
    def is_turn(self):
        return self in (Maneuver.LEFT_TURN, Maneuver.RIGHT_TURN)


def default_mix():
    return {
        Maneuver.LEFT_TURN.value: 0.30,
        Maneuver.RIGHT_TURN.value: 0.20,
        Maneuver.LEFT_LANE_CHANGE.value: 0.15,
        Maneuver.RIGHT_LANE_CHANGE.value: 0.15,
        Maneuver.STRAIGHT.value: 0.20,
    }


def default_noise():
    # GPS noise is given in meters and converted per axis
    return {
        STEERING: 0.5, SPEED: 0.2, ACCEL_PEDAL: 0.5, HEADING: 0.2,
        GPS_LAT: 0.05, GPS_LON: 0.05,
    }


@dataclass
class ScenarioSpec:
    n_vehicles: int = 20
    trips_per_vehicle: int = 66
    seed: int = 0
    maneuver_mix: dict = field(default_factory=default_mix)
    forget_signal_prob: float = 0.05
    sensor_noise_std: dict = field(default_factory=default_noise)
    drop_prob: float = 0.0

    def validate(self):
        if int(self.n_vehicles) < 1:
            raise ConfigError("synth.n_vehicles must be a positive integer")
        if int(self.trips_per_vehicle) < 1:
            raise ConfigError("synth.trips_per_vehicle must be a positive integer")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("synth.seed must be a non-negative 64-bit integer")
        known = {m.value for m in Maneuver}
        unknown = set(self.maneuver_mix) - known
        if unknown:
            raise ConfigError(f"synth.maneuver_mix: unknown maneuvers {sorted(unknown)}")
        probs = list(self.maneuver_mix.values())
        if any(p < 0 for p in probs) or abs(math.fsum(probs) - 1.0) > 1e-9:
            raise ConfigError(
                f"synth.maneuver_mix must be non-negative and sum to 1 (sums to {math.fsum(probs)!r})"
            )
        if not 0.0 <= self.forget_signal_prob <= 1.0:
            raise ConfigError("synth.forget_signal_prob must lie in [0, 1]")
        if not 0.0 <= self.drop_prob <= 0.5:
            raise ConfigError("synth.drop_prob must lie in [0, 0.5]")
        if any(v < 0 for v in self.sensor_noise_std.values()):
            raise ConfigError("synth.sensor_noise_std entries must be non-negative")
        return self


@dataclass
class DriverProfile:
    signal_lead_s: float
    signal_lag_s: float
    speed_preference_kph: float

    def __post_init__(self):
        if self.signal_lead_s < 0 or self.signal_lag_s < 0:
            raise ValueError("signal lead and lag must be non-negative")


def draw_profile(rng):
    return DriverProfile(
        signal_lead_s=float(rng.uniform(1.5, 6.0)),
        signal_lag_s=float(rng.uniform(0.3, 2.5)),
        speed_preference_kph=float(rng.uniform(45.0, 70.0)),
    )


@dataclass
class TripMeta:
    """Ground truth for one generated trip; analysis only, never trained on."""

    vehicle_id: str
    trip_id: str
    maneuver: str
    forget: bool
    maneuver_start_s: float
    maneuver_end_s: float
    signal_on_s: float = None
    signal_off_s: float = None
    duration_s: float = 0.0


@dataclass
class Fleet:
    trips: list
    meta: list
    profiles: dict


# --- kinematics -----------------------------------------------------------

def _ramp(n, a, b):
    # cosine ease from a to b over n fine steps
    if n <= 0:
        return np.zeros(0)
    s = 0.5 - 0.5 * np.cos(np.pi * np.arange(1, n + 1) / n)
    return a + (b - a) * s


def _cruise(n, v, rng):
    phase = rng.uniform(0, 2 * np.pi)
    period = rng.uniform(20.0, 40.0)
    t = np.arange(n) * DT
    return v + rng.uniform(0.3, 0.8) * np.sin(2 * np.pi * t / period + phase)


def _steps(seconds):
    return max(int(round(seconds / DT)), 1)


def _ramp_steps(dv, lo, hi, rng):
    # a cosine ramp peaks at pi/2 times its mean acceleration
    return _steps(max(rng.uniform(lo, hi), math.pi * abs(dv) / (2 * MAX_ACCEL)))


def _simulate(profile, maneuver, rng):
    """Fine-grid speed (m/s), yaw rate (rad/s) and the maneuver interval."""
    v0 = profile.speed_preference_kph / 3.6 * rng.uniform(0.9, 1.1)
    pre = _steps(rng.uniform(*PRE_MANEUVER_S))
    post = _steps(rng.uniform(*POST_MANEUVER_S))
    speed = [_cruise(pre, v0, rng)]
    yaw = [np.zeros(pre)]
    v_now = speed[0][-1]

    if maneuver.is_turn:
        left = maneuver is Maneuver.LEFT_TURN
        stops = rng.random() < (0.6 if left else 0.3)
        v_turn = rng.uniform(4.0, 5.5)
        approach = _ramp_steps(v_now - (0.0 if stops else v_turn), 5.0, 8.0, rng)
        speed.append(_ramp(approach, v_now, 0.0 if stops else v_turn))
        yaw.append(np.zeros(approach))
        start = pre + approach
        if stops:
            wait = _steps(rng.uniform(3.0, 30.0))
            speed.append(np.zeros(wait))
            yaw.append(np.zeros(wait))
        n_turn = _steps(rng.uniform(6.0, 10.0))
        angle = math.radians(rng.uniform(80.0, 100.0)) * (1 if left else -1)
        shape = 1 - np.cos(2 * np.pi * (np.arange(n_turn) + 0.5) / n_turn)
        speed.append(_ramp(n_turn, 0.0, v_turn) if stops else np.full(n_turn, v_turn))
        yaw.append(angle * shape / (shape.sum() * DT))
        end = sum(len(s) for s in speed)
        accel = _ramp_steps(v0 - v_turn, 6.0, 10.0, rng)
        speed.append(_ramp(accel, v_turn, v0))
        yaw.append(np.zeros(accel))
    elif maneuver in (Maneuver.LEFT_LANE_CHANGE, Maneuver.RIGHT_LANE_CHANGE):
        sign = 1 if maneuver is Maneuver.LEFT_LANE_CHANGE else -1
        n_lc = _steps(rng.uniform(3.0, 6.0))
        dur = n_lc * DT
        v = max(v_now, 3.0)
        # heading bump theta_max * sin(pi tau / D) shifts the car one lane
        theta_max = LANE_WIDTH_M * np.pi / (2 * v * dur)
        tau = (np.arange(n_lc) + 0.5) * DT
        start = pre
        speed.append(np.full(n_lc, v_now))
        yaw.append(sign * theta_max * np.pi / dur * np.cos(np.pi * tau / dur))
        end = start + n_lc
    else:
        start = pre
        if rng.random() < 0.4:
            # straight through an intersection after a stop, no signal
            approach = _ramp_steps(v_now, 5.0, 8.0, rng)
            wait = _steps(rng.uniform(3.0, 25.0))
            go = _ramp_steps(v0, 8.0, 12.0, rng)
            speed += [_ramp(approach, v_now, 0.0), np.zeros(wait), _ramp(go, 0.0, v0)]
            yaw += [np.zeros(approach), np.zeros(wait), np.zeros(go)]
        else:
            n = _steps(rng.uniform(10.0, 20.0))
            speed.append(_cruise(n, v_now, rng))
            yaw.append(np.zeros(n))
        end = sum(len(s) for s in speed)
    speed.append(_cruise(post, speed[-1][-1], rng) if speed[-1][-1] > 1.0 else np.full(post, v0))
    yaw.append(np.zeros(post))
    return np.concatenate(speed), np.concatenate(yaw), start * DT, end * DT


def _signal_schedule(profile, maneuver, start_s, end_s, forget):
    if maneuver is Maneuver.STRAIGHT or forget:
        return None, None
    return start_s - profile.signal_lead_s, end_s + profile.signal_lag_s


def _sample_times(duration, period, rng):
    offset = rng.uniform(0.0, period)
    base = np.arange(offset, duration, period)
    jitter = rng.uniform(-0.2, 0.2, len(base)) * period
    times = np.round(np.clip(base + jitter, 0.0, duration), 3)
    times = np.unique(times)
    # endpoints anchor every channel to the same overall span
    return np.unique(np.concatenate(([0.0], times, [round(duration, 3)])))


def _quantize(values, step):
    return np.round(np.round(values / step) * step, 10)


def generate_trip(profile, maneuver, rng, forget=False, vehicle_id="veh_000",
                  trip_id="trip_000", noise=None):
    """Simulate one trip; returns ``(RawTrip, TripMeta)``."""
    maneuver = Maneuver(maneuver)
    noise = default_noise() if noise is None else noise
    speed, yaw, start_s, end_s = _simulate(profile, maneuver, rng)
    n = len(speed)
    t_fine = np.arange(n) * DT
    duration = (n - 1) * DT

    heading0 = rng.uniform(0.0, 2 * np.pi)
    theta = heading0 + np.concatenate(([0.0], np.cumsum(yaw[:-1]) * DT))
    x = np.concatenate(([0.0], np.cumsum(speed[:-1] * np.cos(theta[:-1])) * DT))
    y = np.concatenate(([0.0], np.cumsum(speed[:-1] * np.sin(theta[:-1])) * DT))
    lat0 = REFERENCE_LAT_DEG + rng.uniform(-0.05, 0.05)
    lon0 = -83.2 + rng.uniform(-0.05, 0.05)
    m_per_deg_lon = METERS_PER_DEG_LAT * math.cos(math.radians(REFERENCE_LAT_DEG))

    accel = np.gradient(speed, DT)
    fine = {
        STEERING: STEERING_RATIO * np.degrees(
            np.arctan(WHEELBASE_M * yaw / np.maximum(speed, 2.0))),
        SPEED: speed * 3.6,
        ACCEL_PEDAL: np.where(accel > 0.05, 12.0 + 0.2 * speed * 3.6 + 18.0 * accel,
                              np.where(accel < -0.05, 0.0, 8.0 + 0.2 * speed * 3.6)),
        HEADING: np.degrees(theta),  # unwrapped until sampled
        GPS_LAT: y,
        GPS_LON: x,
    }
    brake = ((accel < -0.4) | (speed < 0.1)).astype(np.float64)
    on_s, off_s = _signal_schedule(profile, maneuver, start_s, end_s, forget)
    signal = np.zeros(n)
    if on_s is not None:
        signal[(t_fine >= on_s) & (t_fine <= off_s)] = maneuver.signal

    channels = {}
    for name in ingest.CHANNELS:
        times = _sample_times(duration, SAMPLE_PERIOD[name], rng)
        if name in (BRAKE, TURN_SIGNAL):
            src = brake if name == BRAKE else signal
            idx = np.clip(np.searchsorted(t_fine, times, side="right") - 1, 0, n - 1)
            channels[name] = (times, src[idx].copy())
            continue
        values = np.interp(times, t_fine, fine[name])
        sd = noise.get(name, 0.0)
        if sd:
            values = values + rng.normal(0.0, sd, len(values))
        if name == GPS_LAT:
            values = lat0 + values / METERS_PER_DEG_LAT
        elif name == GPS_LON:
            values = lon0 + values / m_per_deg_lon
        if name in PHYSICAL_RANGE:
            values = np.clip(values, *PHYSICAL_RANGE[name])
        values = _quantize(values, RESOLUTION[name])
        if name == HEADING:
            values = np.mod(values, 360.0)
            values[values >= 360.0] = 0.0
        channels[name] = (times, values)

    meta = TripMeta(
        vehicle_id=vehicle_id, trip_id=trip_id, maneuver=maneuver.value,
        forget=bool(forget and maneuver is not Maneuver.STRAIGHT),
        maneuver_start_s=round(start_s, 3), maneuver_end_s=round(end_s, 3),
        signal_on_s=None if on_s is None else round(on_s, 3),
        signal_off_s=None if off_s is None else round(off_s, 3),
        duration_s=round(duration, 3),
    )
    return RawTrip(vehicle_id, trip_id, channels), meta


def inject_missing_samples(raw, drop_prob, rng):
    """Drop interior samples independently; endpoints of each channel stay."""
    if not 0.0 <= drop_prob <= 0.5:
        raise ValueError("drop_prob must lie in [0, 0.5]")
    out = {}
    for name in ingest.CHANNELS:
        if name not in raw.channels:
            continue
        times, values = raw.channels[name]
        keep = rng.random(len(times)) >= drop_prob
        keep[0] = keep[-1] = True
        out[name] = (times[keep].copy(), values[keep].copy())
    return RawTrip(raw.vehicle_id, raw.trip_id, out)


def vehicle_id(index):
    return f"veh_{index:03d}"


def _generate_vehicle(spec, index):
    rng = np.random.default_rng([int(spec.seed), index])
    profile = draw_profile(rng)
    names = list(spec.maneuver_mix)
    probs = np.array([spec.maneuver_mix[k] for k in names], dtype=np.float64)
    probs = probs / probs.sum()
    vid = vehicle_id(index)
    trips, metas = [], []
    for k in range(int(spec.trips_per_vehicle)):
        maneuver = Maneuver(names[rng.choice(len(names), p=probs)])
        forget = maneuver is not Maneuver.STRAIGHT and rng.random() < spec.forget_signal_prob
        raw, meta = generate_trip(profile, maneuver, rng, forget=forget, vehicle_id=vid,
                                  trip_id=f"{vid}_t{k:03d}", noise=spec.sensor_noise_std)
        if spec.drop_prob > 0:
            raw = inject_missing_samples(raw, spec.drop_prob, rng)
        trips.append(raw)
        metas.append(meta)
    return vid, profile, trips, metas


def generate_fleet(spec):
    """Generate every vehicle's trips; deterministic in ``spec.seed``.

    Each vehicle draws from its own stream keyed on (seed, vehicle index),
    so vehicles can be produced in any order or in parallel.
    """
    spec.validate()
    trips, metas, profiles = [], [], {}
    for index in range(int(spec.n_vehicles)):
        vid, profile, v_trips, v_meta = _generate_vehicle(spec, index)
        profiles[vid] = profile
        trips += v_trips
        metas += v_meta
    return Fleet(trips, metas, profiles)


def write_fleet(fleet, out_dir, spec=None):
    """Write one raw-log CSV per vehicle plus ``manifest.json``."""
    os.makedirs(out_dir, exist_ok=True)
    by_vehicle = {}
    for trip in fleet.trips:
        by_vehicle.setdefault(trip.vehicle_id, []).append(trip)
    files = []
    for vid in sorted(by_vehicle):
        name = f"{vid}.csv"
        ingest.write_trip_log(by_vehicle[vid], os.path.join(out_dir, name))
        files.append(name)
    manifest = {
        "format": "fedturn-fleet/1",
        "files": files,
        "vehicles": {vid: asdict(p) for vid, p in sorted(fleet.profiles.items())},
        "trips": [asdict(m) for m in fleet.meta],
    }
    if spec is not None:
        manifest["scenario"] = asdict(spec)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(fleet_dir):
    with open(os.path.join(fleet_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    manifest["trips"] = [TripMeta(**m) for m in manifest["trips"]]
    return manifest
