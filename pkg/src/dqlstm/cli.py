"""Command-line entry point: ``dqlstm generate|train|eval|resources|worker``.

Exit codes: 0 success, 2 invalid input, 3 runtime failure or divergence,
4 worker-pool failure.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import logging
import re
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import dispatch, qlstm, tasks, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_POOL = 0, 2, 3, 4
MODEL_KINDS = ("qlstm-centric", "qlstm-distributed", "classical-lstm")
TASK_PARAMS = {
    "pendulum": tasks.PendulumParams,
    "oscillator": tasks.OscillatorParams,
    "narma": tasks.NarmaParams,
}
SECTIONS = ("data", "dataset", "model", "training")

DEFAULTS = {
    "task": "pendulum",
    "seed": 0,
    "output": "run",
    "pool": "inprocess(workers=1)",
    "dataset_file": None,
    "data": {},
    "dataset": {"window": None, "train_fraction": 0.67, "normalization": "minmax"},
    "model": {"kind": "qlstm-distributed", "partitions": 2, "qubits": 3, "depth": 2,
              "hidden_dim": None, "hadamard": True},
    "training": {"epochs": 100, "learning_rate": 0.02, "optimizer": "rmsprop",
                 "batch_size": 50, "gradient_mode": "parameter-shift", "truncate": None},
}


class ConfigError(ValueError):
    pass


# -- configuration ---------------------------------------------------------


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{key!r} must be a table")
            if key == "data":
                out[key].update(value)
            else:
                out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


def parse_assignment(text: str):
    """``section.key=value`` with the value read as a TOML scalar."""
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    parts = key.strip().split(".")
    if len(parts) > 2 or (len(parts) == 2 and parts[0] not in SECTIONS):
        raise ConfigError(f"bad config key {key!r}")
    return parts, value


def nest(parts, value) -> dict:
    return {parts[0]: value} if len(parts) == 1 else {parts[0]: {parts[1]: value}}


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        cfg = merge(cfg, load_config(args.config))
    for item in getattr(args, "set", None) or []:
        cfg = merge(cfg, nest(*parse_assignment(item)))
    for dest, value in vars(args).items():
        if value is None or "__" not in dest:
            continue
        section, key = dest.split("__", 1)
        cfg = merge(cfg, {key: value} if section == "top" else {section: {key: value}})
    return cfg


# -- building blocks -------------------------------------------------------


def task_params(task: str, data: dict, seed: int):
    if task not in TASK_PARAMS:
        raise ConfigError(f"task must be one of {tuple(TASK_PARAMS)}")
    cls = TASK_PARAMS[task]
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {task} parameters: {', '.join(sorted(unknown))}")
    values = dict(data)
    if "seed" in known:
        values.setdefault("seed", seed)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def model_dims(model: dict, window):
    """(input_dim, hidden_dim) for a model section; ``window`` may be None."""
    kind = model["kind"]
    hidden = model.get("hidden_dim")
    if kind == "qlstm-centric":
        q = int(model["qubits"])
        hidden = hidden if hidden is not None else max(q // 2, 1)
        window = window if window is not None else q - hidden
    else:
        hidden = hidden if hidden is not None else 3
        window = window if window is not None else 3
    return int(window), int(hidden)


def build_model(model: dict, window, seed: int):
    kind = model["kind"]
    if kind not in MODEL_KINDS:
        raise ConfigError(f"model kind must be one of {MODEL_KINDS}")
    d_x, d_h = model_dims(model, window)
    try:
        if kind == "classical-lstm":
            return train.ClassicalLstmCell.create(d_x, d_h, seed=seed)
        q, depth = int(model["qubits"]), int(model["depth"])
        if depth < 0:
            raise ValueError("depth must be >= 0")
        if kind == "qlstm-centric":
            plan = qlstm.PartitionPlan(1, [d_x + d_h], [d_h], [q])
        else:
            plan = qlstm.PartitionPlan.equal(d_x, d_h, int(model["partitions"]), q)
        return qlstm.QlstmCell.create(d_x, d_h, plan, depth, bool(model["hadamard"]), seed=seed)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None


def training_config(section: dict, seed: int) -> train.TrainingConfig:
    section = dict(section)
    if section.get("batch_size") == 0:  # TOML has no null; 0 selects full batch
        section["batch_size"] = None
    try:
        return train.TrainingConfig(seed=seed, **section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"training: {exc}") from None


_INPROCESS = re.compile(r"^inprocess(?:\(\s*workers\s*=\s*(\d+)\s*\))?$")


def resolve_pool(spec: str):
    match = _INPROCESS.match(spec.strip())
    if match:
        workers = int(match.group(1) or 1)
        if workers < 1:
            raise ConfigError("inprocess pool needs at least one worker")
        return dispatch.inprocess_pool(workers)
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"pool file {spec} not found")
    try:
        return dispatch.load_pool_file(path)
    except ValueError as exc:
        raise ConfigError(f"pool file {spec}: {exc}") from None


def executor_for(endpoints):
    if len(endpoints) == 1 and not endpoints[0].remote and endpoints[0].capacity == 1:
        return dispatch.SequentialExecutor()
    return dispatch.WorkerPool(endpoints)


def load_series(path, task=None):
    try:
        found, rows = tasks.read_series_csv(path)
    except FileNotFoundError:
        raise ConfigError(f"dataset file {path} not found") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if task is not None and found != task:
        raise ConfigError(f"{path} holds a {found} series, expected {task}")
    return found, rows


def build_dataset(series, section: dict, window: int):
    try:
        return tasks.make_dataset(series, window, float(section["train_fraction"]),
                                  section["normalization"])
    except ValueError as exc:
        raise ConfigError(f"dataset: {exc}") from None


def summary_table(label: str, r2: float, conv: int) -> str:
    header = f"{'Model':<28}{'R-square':>10}  Testing Epoch Convergence"
    return f"{header}\n{label:<28}{r2:>10.5f}  {conv}"


# -- commands --------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    params = task_params(cfg["task"], cfg["data"], cfg["seed"])
    out = Path(args.output)
    if out.exists() and not args.force:
        raise ConfigError(f"{out} exists; pass --force to overwrite")
    rows = tasks.generate_series(cfg["task"], params)
    out.parent.mkdir(parents=True, exist_ok=True)
    tasks.write_series_csv(out, cfg["task"], rows, params)
    print(f"wrote {rows.shape[0]} rows to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    seed = int(cfg["seed"])
    task = cfg["task"]
    # validate everything cheap before any simulation
    model = build_model(cfg["model"], cfg["dataset"]["window"], seed)
    window = model.input_dim
    config = training_config(cfg["training"], seed)
    endpoints = resolve_pool(str(cfg["pool"]))
    if cfg["dataset_file"]:
        _, rows = load_series(cfg["dataset_file"], task)
        params = None
    else:
        params = task_params(task, cfg["data"], seed)
        rows = None
    out = Path(cfg["output"])

    if rows is None:
        rows = tasks.generate_series(task, params)
    dataset = build_dataset(tasks.target_series(task, rows), cfg["dataset"], window)
    out.mkdir(parents=True, exist_ok=True)
    tasks.write_series_csv(out / "dataset.csv", task, rows, params)
    extra = {"dataset": {"task": task, "window": window,
                         "train_fraction": float(cfg["dataset"]["train_fraction"]),
                         "normalization": cfg["dataset"]["normalization"]}}
    executor = executor_for(endpoints)
    try:
        record = train.train_loop(model, dataset, config, executor, out, extra)
    finally:
        if isinstance(executor, dispatch.WorkerPool):
            executor.close()
    doc = qlstm.load_checkpoint(out / "checkpoint.json")
    doc["metrics"] = {"r2": record.r2, "convergence_epoch": record.convergence_epoch}
    qlstm.save_checkpoint(out / "checkpoint.json",
                          {k: v for k, v in doc.items() if k not in ("format", "version")})
    print(summary_table(model.label(), record.r2, record.convergence_epoch))
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        doc = qlstm.load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint {args.checkpoint} not found") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    saved = doc.get("dataset")
    if saved is None:
        raise ConfigError("checkpoint has no dataset section")
    try:
        model = train.model_from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"checkpoint model: {exc}") from None
    window = args.window if args.window is not None else saved["window"]
    if window != model.input_dim:
        raise ConfigError(f"window {window} does not match the model input size {model.input_dim}")
    _, rows = load_series(args.dataset, saved["task"])
    dataset = build_dataset(tasks.target_series(saved["task"], rows), saved, window)
    executor = executor_for(resolve_pool(args.pool))
    try:
        preds, targets, _ = train.evaluate_split(model, dataset, executor)
    finally:
        if isinstance(executor, dispatch.WorkerPool):
            executor.close()
    r2 = train.r_squared(preds, targets)
    out = Path(args.output) if args.output else Path(args.checkpoint).with_name("eval_predictions.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    train.write_predictions_csv(out, dataset.split_times("test"), targets, preds)
    print(f"r2={r2!r}")
    print(f"predictions={out}")
    return EXIT_OK


def cmd_resources(args) -> int:
    try:
        est = qlstm.estimate_resources(args.dx, args.dh, args.partitions, args.depth,
                                       args.qubits, args.n_extra)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for field in dataclasses.fields(est):
        print(f"{field.name}={getattr(est, field.name)}")
    return EXIT_OK


def cmd_worker(args) -> int:
    try:
        dispatch.split_address(args.bind)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.max_qubits < 1:
        raise ConfigError("--max-qubits must be >= 1")
    dispatch.serve_worker(args.bind, args.max_qubits)
    return EXIT_OK


# -- argument parsing ------------------------------------------------------


def _add_common(p):
    p.add_argument("--log-level", default="warning",
                   choices=("debug", "info", "warning", "error"))


def _add_run_options(p):
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any config value (repeatable)")
    p.add_argument("--task", dest="top__task", choices=tuple(TASK_PARAMS))
    p.add_argument("--seed", dest="top__seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dqlstm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a benchmark series to CSV")
    _add_common(gen)
    _add_run_options(gen)
    gen.add_argument("--order", dest="data__order", type=int)
    gen.add_argument("--length", dest="data__length", type=int)
    gen.add_argument("--input-mode", dest="data__input_mode", choices=("trig", "uniform"))
    gen.add_argument("--dt", dest="data__dt", type=float)
    gen.add_argument("--steps", dest="data__num_steps", type=int)
    gen.add_argument("--output", "-o", required=True)
    gen.add_argument("--force", action="store_true", help="overwrite an existing file")
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="train a model and write metrics, predictions and a checkpoint")
    _add_common(tr)
    _add_run_options(tr)
    tr.add_argument("--dataset", dest="top__dataset_file", help="series CSV from 'generate'")
    tr.add_argument("--model", dest="model__kind", choices=MODEL_KINDS)
    tr.add_argument("--partitions", dest="model__partitions", type=int)
    tr.add_argument("--qubits", dest="model__qubits", type=int)
    tr.add_argument("--depth", dest="model__depth", type=int)
    tr.add_argument("--hidden", dest="model__hidden_dim", type=int)
    tr.add_argument("--window", dest="dataset__window", type=int)
    tr.add_argument("--epochs", dest="training__epochs", type=int)
    tr.add_argument("--lr", dest="training__learning_rate", type=float)
    tr.add_argument("--optimizer", dest="training__optimizer", choices=train.OPTIMIZERS)
    tr.add_argument("--batch-size", dest="training__batch_size", type=int,
                    help="windows per update; 0 trains on the full split at once")
    tr.add_argument("--gradient-mode", dest="training__gradient_mode",
                    choices=("parameter-shift", "finite-difference"))
    tr.add_argument("--truncate", dest="training__truncate", type=int)
    tr.add_argument("--pool", dest="top__pool",
                    help="pool file path or inprocess(workers=N)")
    tr.add_argument("--output", "-o", dest="top__output")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    _add_common(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--window", type=int)
    ev.add_argument("--pool", default="inprocess")
    ev.add_argument("--output", "-o")
    ev.set_defaults(func=cmd_eval)

    res = sub.add_parser("resources", help="print parameter and qubit counts")
    _add_common(res)
    res.add_argument("--dx", type=int, required=True)
    res.add_argument("--dh", type=int, required=True)
    res.add_argument("--partitions", "-M", type=int, default=1)
    res.add_argument("--depth", "-L", type=int, required=True)
    res.add_argument("--qubits", "-q", type=int, required=True)
    res.add_argument("--n-extra", type=int, default=0)
    res.set_defaults(func=cmd_resources)

    wk = sub.add_parser("worker", help="serve simulation jobs over TCP")
    _add_common(wk)
    wk.add_argument("--bind", default="127.0.0.1:7000")
    wk.add_argument("--max-qubits", type=int, default=20)
    wk.set_defaults(func=cmd_worker)
    for sp in (gen, tr):
        for action in sp._actions:
            if "__" in action.dest and action.metavar is None and action.choices is None:
                action.metavar = action.dest.split("__", 1)[1].upper()
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (qlstm.GateExecutionError, dispatch.PoolError) as exc:
        print(f"worker pool failure: {exc}", file=sys.stderr)
        return EXIT_POOL
    except (train.TrainingDiverged, train.UndefinedMetricError, tasks.GenerationError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
