"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (including benchmark cells that failed), 5 unreadable checkpoint.
Flags override config-file keys, which override built-in defaults.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment
from .autodiff import ContractError
from .data import DataError, Dataset, SplitSpec, Standardizer, load_csv, make_split, standard_error
from .model import DvipModel, NumericalError, likelihood_variance, predict
from .priors import sample_prior
from .training import (
    CheckpointError,
    ConfigError,
    TrainConfig,
    TrainingError,
    format_config,
    load_checkpoint,
    parse_config,
    save_checkpoint,
)

log = logging.getLogger("dvip")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4, 5
CHECKPOINT_NAME = "checkpoint.dvip"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _config(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = parse_config(Path(args.config).read_text(encoding="utf-8"))
    overrides = {}
    for flag, key in (("seed", "seed"), ("layers", "num_layers"), ("samples", "num_samples"),
                      ("iterations", "iterations"), ("batch_size", "batch_size")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return dataclasses.replace(cfg, **overrides)


def _load(path, task: str) -> Dataset:
    if not Path(path).is_file():
        raise DataError(f"dataset {path} not found")
    return load_csv(path, task)


def _select(data: Dataset, split: int | None, subset: str, seed_base: int) -> Dataset:
    if split is None:
        return data
    train, test = make_split(data, SplitSpec(split, 0.1, seed_base))
    return {"train": train, "test": test, "all": data}[subset]


def _run_summary_row(name, cfg: TrainConfig, fitted, metrics: dict) -> tuple[list[str], list]:
    names = experiment.metric_names(fitted.task)
    header = ["dataset", "layers", "samples", "seed", "iterations", "train_seconds"] + [f"train_{m}" for m in names]
    row = [name, cfg.num_layers, cfg.num_samples, cfg.seed, cfg.iterations, fitted.seconds] + [
        metrics[m] for m in names]
    return header, row


def cmd_train(args) -> int:
    cfg = _config(args)
    data = _load(args.data, args.task)
    train_data = _select(data, args.split, "train", args.split_seed)
    fitted = experiment.fit(train_data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {
        "standardizer": fitted.standardizer.to_dict(),
        "task": fitted.task,
        "dataset": data.name,
        "train_config": format_config(cfg),
    }
    save_checkpoint(out / CHECKPOINT_NAME, fitted.model, fitted.state, cfg.seed, cfg.iterations, extra)
    _write_csv(out / "history.csv", ["iteration", "objective"], list(enumerate(fitted.history)))
    metrics = experiment.evaluate(fitted.model, fitted.standardizer, train_data, cfg.r_test, cfg.seed)
    header, row = _run_summary_row(data.name, cfg, fitted, metrics)
    _write_csv(out / "run_summary.csv", header, [row])
    print(", ".join(f"{h}={_fmt(v)}" for h, v in zip(header, row)))
    return EXIT_OK


def _restore(path):
    ckpt = load_checkpoint(path)
    std = Standardizer.from_dict(ckpt.extra["standardizer"])
    cfg = parse_config(ckpt.extra.get("train_config", ""))
    return ckpt, std, cfg, ckpt.extra.get("task", "regression")


def cmd_eval(args) -> int:
    ckpt, std, cfg, task = _restore(args.checkpoint)
    data = _load(args.data, task)
    if data.num_features != ckpt.model.config.input_dim:
        raise DataError(f"dataset has {data.num_features} features, model expects {ckpt.model.config.input_dim}")
    subset = args.subset or ("test" if args.split is not None else "all")
    data = _select(data, args.split, subset, args.split_seed)
    r = args.components or cfg.r_test
    metrics = experiment.evaluate(ckpt.model, std, data, r, cfg.seed)
    train_seconds = ""
    summary = Path(args.checkpoint).with_name("run_summary.csv")
    if summary.is_file():
        with summary.open(encoding="utf-8") as fh:
            train_seconds = next(csv.DictReader(fh)).get("train_seconds", "")
    names = experiment.metric_names(task)
    header = ["dataset", "model", "depth", "split"] + names + ["train_seconds"]
    row = [data.name, "DVIP", ckpt.model.num_layers, "" if args.split is None else args.split] + [
        metrics[m] for m in names] + [train_seconds]
    if args.out:
        _write_csv(Path(args.out), header, [row])
    print(",".join(header))
    print(",".join(_fmt(v) for v in row))
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt, std, cfg, task = _restore(args.checkpoint)
    data = _load(args.data, task)
    if data.num_features != ckpt.model.config.input_dim:
        raise DataError(f"dataset has {data.num_features} features, model expects {ckpt.model.config.input_dim}")
    data = _select(data, args.split, args.subset or "test", args.split_seed)
    r = args.components or cfg.r_test
    mixture = predict(ckpt.model, std.transform_x(data.X), r, cfg.seed)
    if task == "regression":
        means = std.inverse_y(mixture.means)
        variances = (mixture.variances + likelihood_variance(ckpt.model)) * std.y_scale ** 2
    else:
        means, variances = mixture.means, mixture.variances
    header = ["target"] + [f"mean_{i}" for i in range(r)] + [f"var_{i}" for i in range(r)]
    rows = [[float(t), *map(float, m), *map(float, v)] for t, m, v in zip(data.y, means, variances)]
    _write_csv(Path(args.out), header, rows)
    return EXIT_OK


def cmd_sample_prior(args) -> int:
    if args.checkpoint:
        ckpt, std, cfg, _ = _restore(args.checkpoint)
        model = ckpt.model
    else:
        if args.input_dim is None:
            raise ConfigError("sample-prior needs --checkpoint or --input-dim")
        cfg = _config(args)
        model = DvipModel(cfg.model_config(args.input_dim, 1))
    layer = args.layer
    if not 1 <= layer <= model.num_layers:
        raise ConfigError(f"layer must be in 1..{model.num_layers}")
    d_in = model.config.widths[layer - 1]
    if not 0 <= args.dim < d_in:
        raise ConfigError(f"dim must be in 0..{d_in - 1}")
    grid = np.linspace(args.lo, args.hi, args.grid)
    inputs = np.zeros((args.grid, d_in))
    inputs[:, args.dim] = grid
    s = args.samples or model.config.num_samples
    samples = sample_prior(model.prior_params(layer), inputs, s, model.prior_key(layer))
    values = np.asarray(samples.values)
    header = ["x"] + [f"f_{i}" for i in range(s)]
    _write_csv(Path(args.out), header, [[float(x), *map(float, values[:, j])] for j, x in enumerate(grid)])
    return EXIT_OK


def _grid_run(args, cells) -> int:
    """Run (dataset, depth, S, split) cells; write per-cell metrics and an aggregate table."""
    cfg0 = _config(args)
    out = Path(args.out)
    rows, failed = [], 0
    datasets = {p: _load(p, args.task) for p in args.data}
    names = experiment.metric_names(args.task)
    for path, depth, s, split in cells:
        data = datasets[path]
        cfg = dataclasses.replace(cfg0, num_layers=depth, num_samples=s)
        train, test = make_split(data, SplitSpec(split, 0.1, args.split_seed))
        try:
            fitted = experiment.fit(train, cfg)
            metrics = experiment.evaluate(fitted.model, fitted.standardizer, test, cfg.r_test, cfg.seed)
            status, seconds = "ok", fitted.seconds
        except (TrainingError, NumericalError, FloatingPointError) as e:
            log.warning("cell %s depth=%d S=%d split=%d failed: %s", data.name, depth, s, split, e)
            metrics, status, seconds = {m: float("nan") for m in names}, f"failed: {e}", float("nan")
            failed += 1
        rows.append([data.name, "DVIP", depth, s, split] + [metrics[m] for m in names] + [seconds, status])
    header = ["dataset", "model", "depth", "num_samples", "split"] + names + ["train_seconds", "status"]
    _write_csv(out / "metrics.csv", header, rows)

    agg_header = ["dataset", "model", "depth", "num_samples", "n"]
    for m in names + ["train_seconds"]:
        agg_header += [f"{m}_mean", f"{m}_se"]
    agg_rows = []
    keys = list(dict.fromkeys((r[0], r[2], r[3]) for r in rows))
    for name, depth, s in keys:
        cell = [r for r in rows if (r[0], r[2], r[3]) == (name, depth, s) and r[-1] == "ok"]
        agg = [name, "DVIP", depth, s, len(cell)]
        for j, _ in enumerate(names + ["train_seconds"]):
            vals = [r[5 + j] for r in cell]
            agg += [float(np.mean(vals)) if vals else float("nan"), standard_error(vals)]
        agg_rows.append(agg)
    _write_csv(out / "summary.csv", agg_header, agg_rows)
    for r in agg_rows:
        print(", ".join(f"{h}={_fmt(v)}" for h, v in zip(agg_header, r)))
    return EXIT_NUMERIC if failed else EXIT_OK


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_benchmark(args) -> int:
    cfg = _config(args)
    cells = [(p, d, cfg.num_samples, k) for p in args.data for d in _int_list(args.depths)
             for k in range(args.splits)]
    return _grid_run(args, cells)


def cmd_ablate_samples(args) -> int:
    cells = [(p, args.depth, s, k) for p in args.data for s in _int_list(args.samples_list)
             for k in range(args.splits)]
    return _grid_run(args, cells)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dvip", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--layers", type=int, help="depth L")
        p.add_argument("--samples", type=int, help="prior samples S")
        p.add_argument("--iterations", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--task", choices=("regression", "binary"), default="regression")
        p.add_argument("--split-seed", type=int, default=0)
        if data:
            p.add_argument("--split", type=int, help="train/test split index (0-19)")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "metrics of a checkpoint on a dataset"),
                              ("predict", cmd_predict, "per-point mixture components")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", type=int)
        p.add_argument("--split-seed", type=int, default=0)
        p.add_argument("--subset", choices=("train", "test", "all"))
        p.add_argument("--components", type=int, help="mixture size R (default r_test)")
        p.add_argument("--out", required=(name == "predict"))
        p.set_defaults(func=func)

    p = sub.add_parser("sample-prior", help="prior function curves on a 1-D grid")
    common(p, data=False)
    p.add_argument("--checkpoint")
    p.add_argument("--input-dim", type=int)
    p.add_argument("--layer", type=int, default=1)
    p.add_argument("--dim", type=int, default=0, help="input dimension varied along the grid")
    p.add_argument("--lo", type=float, default=-3.0)
    p.add_argument("--hi", type=float, default=3.0)
    p.add_argument("--grid", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_prior)

    p = sub.add_parser("benchmark", help="dataset x depth x split grid")
    common(p, data=False)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--depths", default="2,3,4,5")
    p.add_argument("--splits", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("ablate-samples", help="prior-sample-count ablation")
    common(p, data=False)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--samples-list", default="10,20,30,40,50")
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--splits", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate_samples)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NumericalError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
