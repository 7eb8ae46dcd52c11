"""Flat ``key = value`` run configuration with dotted namespaces.

Example::

    # comments start with '#'
    run.seed = 3
    synth.n_vehicles = 20
    fed.rounds = 100
    fed.clients_per_round = all

Every key has a typed default below; unknown keys are rejected.
"""
from . import fedavg, synthgen
from .exceptions import ConfigError

DEFAULTS = {
    "run.seed": 0,
    "run.workers": 1,
    "run.out": "runs/default",
    "synth.n_vehicles": 20,
    "synth.trips_per_vehicle": 66,
    "synth.forget_signal_prob": 0.05,
    "synth.drop_prob": 0.0,
    "data.fleet_dir": "",
    "data.dataset_dir": "",
    "data.window_steps": 5,
    "data.split": "0.8,0.1,0.1",
    "data.max_gap_s": 5.0,
    "train.batch_size": 64,
    "train.hidden_units": 50,
    "train.learning_rate": 1e-3,
    "train.epochs": 50,
    "train.patience": 5,
    "train.clip_norm": 5.0,
    "fed.clients_per_round": "all",
    "fed.local_epochs": 1,
    "fed.rounds": 100,
    "fed.client_optimizer": "reset",
    "grid.mode": "central",
    "grid.epochs": 2,
    "grid.rounds": 2,
    "grid.train_fraction": 1.0,
    "ttest.central_csv": "",
    "ttest.federated_csv": "",
    "eval.split": "test",
    "eval.checkpoint": "",
}
DEFAULTS.update({f"synth.mix.{k}": v for k, v in synthgen.default_mix().items()})
DEFAULTS.update({f"synth.noise.{k}": v for k, v in synthgen.default_noise().items()})


def _coerce(key, raw):
    default = DEFAULTS[key]
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(
            f"{key}: expected {type(default).__name__}, got {text!r}") from None
    return text


def parse_lines(lines, source="<config>"):
    values = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


class RunConfig(dict):
    """Validated mapping of every configuration key to its value."""

    @classmethod
    def load(cls, path=None, overrides=None):
        cfg = cls(DEFAULTS)
        if path:
            try:
                with open(path, encoding="utf-8") as fh:
                    cfg.update(parse_lines(fh, path))
            except OSError as exc:
                raise ConfigError(f"cannot read config file {path}: {exc}") from None
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            cfg[key] = _coerce(key, value)
        cfg.validate()
        return cfg

    def validate(self):
        self.scenario()
        split = self.split_fractions()
        if len(split) != 3 or min(split) <= 0 or abs(sum(split) - 1.0) > 1e-9:
            raise ConfigError(f"data.split must be three positive fractions summing to 1, got {split}")
        for key in ("data.window_steps", "train.batch_size", "train.hidden_units", "train.epochs",
                    "fed.local_epochs", "run.workers", "grid.epochs"):
            if self[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self["fed.rounds"] < 0 or self["grid.rounds"] < 0:
            raise ConfigError("fed.rounds and grid.rounds must be >= 0")
        if self["train.learning_rate"] < 0:
            raise ConfigError("train.learning_rate must be >= 0")
        if self["run.seed"] < 0:
            raise ConfigError("run.seed must be non-negative")
        if self["fed.client_optimizer"] not in fedavg.OPTIMIZER_MODES:
            raise ConfigError(f"fed.client_optimizer must be one of {fedavg.OPTIMIZER_MODES}")
        self.clients_per_round()
        if self["grid.mode"] not in ("central", "federated"):
            raise ConfigError("grid.mode must be 'central' or 'federated'")
        if not 0 < self["grid.train_fraction"] <= 1:
            raise ConfigError("grid.train_fraction must lie in (0, 1]")
        if self["eval.split"] not in ("train", "val", "test"):
            raise ConfigError("eval.split must be train, val or test")
        return self

    def split_fractions(self):
        try:
            return tuple(float(x) for x in self["data.split"].split(","))
        except ValueError:
            raise ConfigError(f"data.split: cannot parse {self['data.split']!r}") from None

    def clients_per_round(self):
        value = str(self["fed.clients_per_round"]).strip().lower()
        if value == fedavg.ALL:
            return fedavg.ALL
        try:
            k = int(value)
        except ValueError:
            raise ConfigError("fed.clients_per_round must be a positive integer or 'all'") from None
        if k < 1:
            raise ConfigError("fed.clients_per_round must be a positive integer or 'all'")
        return k

    def scenario(self):
        mix = {k.split(".", 2)[2]: v for k, v in self.items() if k.startswith("synth.mix.")}
        noise = {k.split(".", 2)[2]: v for k, v in self.items() if k.startswith("synth.noise.")}
        spec = synthgen.ScenarioSpec(
            n_vehicles=self["synth.n_vehicles"],
            trips_per_vehicle=self["synth.trips_per_vehicle"],
            seed=self["run.seed"],
            maneuver_mix=mix,
            forget_signal_prob=self["synth.forget_signal_prob"],
            sensor_noise_std=noise,
            drop_prob=self["synth.drop_prob"],
        )
        try:
            return spec.validate()
        except ConfigError as exc:
            # name the offending mix keys in their dotted form
            msg = str(exc).replace("synth.maneuver_mix", "synth.mix.*")
            raise ConfigError(msg) from None

    def dumps(self):
        return "".join(f"{k} = {self[k]}\n" for k in sorted(self))
