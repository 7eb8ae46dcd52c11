"""Command line entry point: ``fedturn <subcommand> [--config PATH] [--out DIR] ...``.

Each subcommand writes into ``<out>/<subcommand>/`` together with a
snapshot of the effective configuration and a log file.  Exit codes:
0 success, 1 runtime failure, 2 configuration or input error.
"""
import argparse
import glob
import json
import logging
import os
import sys

import numpy as np

from . import dataset, evalstats, experiment, fedavg, ingest, lstm, synthgen, trainer
from .config import RunConfig
from .exceptions import ConfigError

log = logging.getLogger("fedturn")

COMMANDS = ("synth", "preprocess", "train-central", "train-federated", "gridsearch",
            "ttest", "evaluate")


def _add_globals(p, suppress):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=default, help="key=value config file")
    p.add_argument("--out", metavar="DIR", default=default, help="run directory")
    p.add_argument("--seed", type=int, metavar="N", default=default)
    p.add_argument("--workers", type=int, metavar="N", default=default)
    p.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                   default=argparse.SUPPRESS if suppress else [],
                   help="override one config key (repeatable)")


def build_parser():
    parser = argparse.ArgumentParser(prog="fedturn", description=__doc__.splitlines()[0])
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        _add_globals(p, suppress=True)
        if name == "evaluate":
            p.add_argument("--checkpoint", metavar="PATH", help="model checkpoint to evaluate")
    return parser


def _overrides(args):
    out = {}
    for item in args.overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    if args.out is not None:
        out["run.out"] = args.out
    if args.seed is not None:
        out["run.seed"] = str(args.seed)
    if args.workers is not None:
        out["run.workers"] = str(args.workers)
    if getattr(args, "checkpoint", None):
        out["eval.checkpoint"] = args.checkpoint
    return out


def _setup_logging(run_dir):
    root = logging.getLogger("fedturn")
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    fh = logging.FileHandler(os.path.join(run_dir, "log.txt"), mode="w", encoding="utf-8")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    root.addHandler(fh)
    root.addHandler(sh)


def _input_dir(cfg, key, default_cmd):
    path = cfg[key] or os.path.join(cfg["run.out"], default_cmd)
    if not os.path.isdir(path):
        raise ConfigError(f"{key}: input directory {path!r} does not exist")
    return path


def _hyperparams(cfg, window_steps=None):
    return trainer.Hyperparams(cfg["train.batch_size"],
                               window_steps or cfg["data.window_steps"],
                               cfg["train.hidden_units"], cfg["train.learning_rate"])


def _load_dataset(cfg):
    path = _input_dir(cfg, "data.dataset_dir", "preprocess")
    if not os.path.exists(os.path.join(path, "windows.npz")):
        raise ConfigError(f"data.dataset_dir: no windows.npz in {path!r}")
    return dataset.load_dataset(path)


def _read_fleet(fleet_dir):
    files = sorted(glob.glob(os.path.join(fleet_dir, "*.csv")))
    if not files:
        raise ConfigError(f"data.fleet_dir: no raw log CSV files in {fleet_dir!r}")
    trips = []
    for path in files:
        trips.extend(ingest.parse_trip_log(path).values())
    return trips


def _fleet_events(cfg):
    fleet_dir = _input_dir(cfg, "data.fleet_dir", "synth")
    trips = _read_fleet(fleet_dir)
    uniform, events, report = dataset.process_trips(trips, cfg["data.max_gap_s"])
    metas = []
    if os.path.exists(os.path.join(fleet_dir, "manifest.json")):
        metas = synthgen.load_manifest(fleet_dir)["trips"]
    return uniform, events, report, metas


def cmd_synth(cfg, args, run_dir):
    spec = cfg.scenario()
    fleet = synthgen.generate_fleet(spec)
    manifest = synthgen.write_fleet(fleet, run_dir, spec)
    log.info("wrote %d trips for %d vehicles to %s", len(manifest["trips"]),
             len(manifest["vehicles"]), run_dir)


def cmd_preprocess(cfg, args, run_dir):
    uniform, events, report, metas = _fleet_events(cfg)
    W = cfg["data.window_steps"]
    data = dataset.split_and_partition(events, W, cfg.split_fractions(), cfg["run.seed"])
    probe = experiment.forget_probe(metas, uniform, data.stats, W)
    manifest = dataset.save_dataset(data, run_dir, probe, extra_info={
        "preprocess_report": report,
        "dropped_events": report["dropped_candidates"],
        "split_fractions": list(cfg.split_fractions()),
        "seed": cfg["run.seed"],
    })
    log.info("windows %s; class histogram (train) %s; dropped events %d",
             manifest["window_counts"], manifest["class_histogram"]["train"],
             manifest["dropped_events"])


def _write_metrics(path, metrics, extra=None):
    doc = {} if metrics is None else metrics.to_dict()
    doc.update(extra or {})
    evalstats.write_json(doc, path)


def cmd_train_central(cfg, args, run_dir):
    data, probe, _ = _load_dataset(cfg)
    config = trainer.TrainConfig(_hyperparams(cfg, data.window_steps), cfg["train.epochs"],
                                 cfg["run.seed"], cfg["train.patience"], cfg["train.clip_norm"])
    params, reports = trainer.train_centralized(config, data.train, data.val)
    trainer.write_jsonl([r.to_dict() for r in reports], os.path.join(run_dir, "epochs.jsonl"))
    lstm.save_checkpoint(params, os.path.join(run_dir, "checkpoint.bin"))
    metrics = trainer.evaluate(params, data.test.X, data.test.y)
    _write_metrics(os.path.join(run_dir, "metrics.json"), metrics, {"epochs_run": len(reports)})
    experiment.write_traces_csv(params, data.test, os.path.join(run_dir, "traces.csv"))
    if metrics is not None:
        log.info("central test accuracy %.4f, average F1 %.4f",
                 metrics.weighted_accuracy, metrics.average_f1)


def cmd_train_federated(cfg, args, run_dir):
    data, probe, _ = _load_dataset(cfg)
    k = cfg.clients_per_round()
    if k != fedavg.ALL and k > len(data.clients):
        raise ConfigError(f"fed.clients_per_round={k} exceeds the {len(data.clients)} clients")
    config = fedavg.RoundConfig(k, cfg["fed.local_epochs"], cfg["fed.rounds"],
                                _hyperparams(cfg, data.window_steps), cfg["run.seed"],
                                cfg["train.clip_norm"], cfg["fed.client_optimizer"])
    params, reports = fedavg.run_federated(config, data.clients, data.test,
                                           n_features=data.train.X.shape[2],
                                           n_jobs=cfg["run.workers"])
    trainer.write_jsonl([r.to_dict() for r in reports], os.path.join(run_dir, "rounds.jsonl"))
    experiment.write_curve_csv(reports, os.path.join(run_dir, "curve.csv"))
    lstm.save_checkpoint(params, os.path.join(run_dir, "checkpoint.bin"))
    metrics = trainer.evaluate(params, data.test.X, data.test.y)
    _write_metrics(os.path.join(run_dir, "metrics.json"), metrics, {"rounds_run": len(reports)})
    experiment.write_traces_csv(params, data.test, os.path.join(run_dir, "traces.csv"))
    if len(probe):
        rate, n = experiment.forget_detection(params, probe)
        evalstats.write_json({"forgot_signal_trips": n, "detected_fraction": rate},
                             os.path.join(run_dir, "forget.json"))
        experiment.write_traces_csv(params, probe, os.path.join(run_dir, "forget_traces.csv"))
    if metrics is not None:
        log.info("federated test accuracy %.4f, average F1 %.4f",
                 metrics.weighted_accuracy, metrics.average_f1)


class GridRunner:
    """Trains one grid cell; datasets are rebuilt per window size and cached."""

    def __init__(self, cfg, events, mode):
        self.cfg = cfg
        self.events = events
        self.mode = mode
        self._cache = {}

    def data(self, window_steps):
        if window_steps not in self._cache:
            data = dataset.split_and_partition(self.events, window_steps,
                                               self.cfg.split_fractions(), self.cfg["run.seed"])
            frac = self.cfg["grid.train_fraction"]
            if frac < 1.0:
                rng = np.random.default_rng([self.cfg["run.seed"], window_steps])
                keep = np.sort(rng.permutation(len(data.train))[:max(1, int(frac * len(data.train)))])
                data.train = data.train.subset(keep)
                data.clients = [
                    dataset.ClientDataset(c.vehicle_id,
                                          data.train.subset(data.train.vehicle == c.vehicle_id),
                                          c.val, c.test)
                    for c in data.clients
                ]
            self._cache[window_steps] = data
        return self._cache[window_steps]

    def __call__(self, cell, seed):
        data = self.data(int(cell["window_steps"]))
        hp = trainer.Hyperparams(int(cell["batch_size"]), int(cell["window_steps"]),
                                 int(cell["hidden_units"]), float(cell["learning_rate"]))
        if self.mode == "central":
            config = trainer.TrainConfig(hp, self.cfg["grid.epochs"], seed,
                                         self.cfg["train.patience"], self.cfg["train.clip_norm"])
            params, _ = trainer.train_centralized(config, data.train, data.val)
        else:
            k = cell["clients_per_round"]
            rounds = self.cfg["grid.rounds"] or int(cell["rounds"])
            config = fedavg.RoundConfig(k if k == fedavg.ALL else int(k),
                                        int(cell["local_epochs"]), rounds, hp, seed,
                                        self.cfg["train.clip_norm"],
                                        self.cfg["fed.client_optimizer"])
            if k != fedavg.ALL and int(k) > len(data.clients):
                raise fedavg.KTooLarge(f"{k} clients per round but only {len(data.clients)} clients")
            params, _ = fedavg.run_federated(config, data.clients, None,
                                             n_features=data.train.X.shape[2])
        return trainer.evaluate(params, data.test.X, data.test.y)


def cmd_gridsearch(cfg, args, run_dir):
    mode = cfg["grid.mode"]
    _, events, _, _ = _fleet_events(cfg)
    grid = evalstats.CENTRAL_GRID if mode == "central" else evalstats.FEDERATED_GRID
    runner = GridRunner(cfg, events, mode)
    results = evalstats.grid_search(grid, runner, seed=cfg["run.seed"], n_jobs=cfg["run.workers"])
    path = os.path.join(run_dir, f"{mode}.csv")
    evalstats.write_grid_csv(results, path)
    failed = sum(r.metrics is None for r in results)
    log.info("%d %s grid cells written to %s (%d failed)", len(results), mode, path, failed)


def cmd_ttest(cfg, args, run_dir):
    paths = []
    for key, mode in (("ttest.central_csv", "central"), ("ttest.federated_csv", "federated")):
        path = cfg[key] or os.path.join(cfg["run.out"], "gridsearch", f"{mode}.csv")
        if not os.path.exists(path):
            raise ConfigError(f"{key}: grid results {path!r} not found")
        paths.append(path)
    report = evalstats.ttest_report(*(evalstats.read_grid_csv(p) for p in paths))
    evalstats.write_json(report, os.path.join(run_dir, "ttest.json"))
    for row in report:
        log.info("%s: n_pairs=%d t=%.4f p=%.4f", row["metric"], row["n_pairs"], row["t"], row["p"])


def cmd_evaluate(cfg, args, run_dir):
    ckpt = cfg["eval.checkpoint"]
    if not ckpt or not os.path.exists(ckpt):
        raise ConfigError(f"evaluate needs an existing --checkpoint, got {ckpt!r}")
    params = lstm.load_checkpoint(ckpt)
    data, _, _ = _load_dataset(cfg)
    windows = getattr(data, cfg["eval.split"])
    metrics = trainer.evaluate(params, windows.X, windows.y)
    if metrics is None:
        raise ConfigError(f"eval.split={cfg['eval.split']!r} holds no windows")
    _write_metrics(os.path.join(run_dir, "metrics.json"), metrics,
                   {"checkpoint": os.path.abspath(ckpt), "split": cfg["eval.split"],
                    "n_windows": len(windows)})
    print(json.dumps(metrics.to_dict(), sort_keys=True))


HANDLERS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train-central": cmd_train_central,
    "train-federated": cmd_train_federated,
    "gridsearch": cmd_gridsearch,
    "ttest": cmd_ttest,
    "evaluate": cmd_evaluate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"fedturn: config error: {exc}", file=sys.stderr)
        return 2
    run_dir = os.path.join(cfg["run.out"], args.command)
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.dumps())
    _setup_logging(run_dir)
    try:
        HANDLERS[args.command](cfg, args, run_dir)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except Exception:
        log.exception("%s failed", args.command)
        return 1
    finally:
        for h in list(log.handlers):
            log.removeHandler(h)
            h.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
