"""Command-line entry point: generate, train, gridsearch, evaluate, predict.

One JSON config drives every command. Flags override config keys and the
effective configuration is echoed into the output directory, so a run can
be reproduced from its artifacts alone. Exit codes: 0 success, 2 usage or
configuration error, 3 runtime or training failure.

Layout of an output directory after a full experiment:

    config.json            effective configuration echo
    archive.nwq1           synthetic rain archive
    manifest.json          generation manifest
    checkpoints/<loss>.nwqc
    runlogs/<loss>_run<r>.csv
    reports/summary.csv    lead-averaged metrics per (model, output, threshold)
    reports/curves.csv     per-lead-time metric curves
    reports/gridsearch.csv weight search table
    predictions/sample<k>/ P5 graymaps plus scale sidecar
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (DatasetManifest, manifest_from_dict, manifest_to_dict,
                   prepare_dataset, read_archive, stack_windows, write_archive,
                   generate_from_manifest)
from .errors import (ConfigError, ContractError, DataError, DimensionError,
                     FormatError, NumericError, TrainingError)
from .model import ModelConfig, QuantileSpec, init_parameters
from .objectives import LossKind
from .training import (Checkpoint, TrainConfig, grid_search_weights, load_checkpoint,
                       save_checkpoint, train_best_of, write_runlog_csv)
from .verification import (DEFAULT_THRESHOLDS, eval_events, run_model, split_heads,
                           write_curves_csv, write_summary_csv)

_LOSSES = ("mse", "mae", "quantile")


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSection:
    base_channels: int = 16
    depth: int = 2
    attention_enabled: bool = True


@dataclass(frozen=True)
class GridSection:
    """Reduced budget for the weight search; full runs would be wasteful."""

    weights: tuple[float, ...] = (0.1, 0.25, 0.5, 1.0, 2.0)
    max_epochs: int = 8
    n_runs: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    out_dir: str
    thresholds: tuple[float, ...]
    dataset: DatasetManifest
    model: ModelSection
    quantiles: QuantileSpec
    training: TrainConfig
    gridsearch: GridSection


def _take(raw: dict, section: str, allowed: set[str]) -> dict:
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown {section} key(s): {sorted(unknown)}")
    return dict(raw)


def _parse_sections(raw: dict, seed_flag: int | None, out_flag: str | None) -> ExperimentConfig:
    top = _take(raw, "config", {"seed", "out_dir", "thresholds", "dataset",
                                "model", "quantiles", "training", "gridsearch"})
    seed = int(top.get("seed", 0)) if seed_flag is None else int(seed_flag)
    out_dir = str(top.get("out_dir", "runs/exp")) if out_flag is None else out_flag

    thresholds = tuple(float(t) for t in top.get("thresholds", DEFAULT_THRESHOLDS))
    if not thresholds or any(t < 0 for t in thresholds):
        raise ConfigError("thresholds must be a non-empty list of rates in mm/h")

    ds_raw = dict(top.get("dataset", {}))
    if seed_flag is not None or "seed" not in ds_raw:
        ds_raw["seed"] = seed
    dataset = manifest_from_dict(ds_raw)

    model_raw = _take(top.get("model", {}), "model",
                      {"base_channels", "depth", "attention_enabled"})
    model = ModelSection(**model_raw)

    q_raw = _take(top.get("quantiles", {}), "quantiles", {"levels", "weights"})
    levels = tuple(float(x) for x in q_raw.get("levels", (0.5, 0.9, 0.95)))
    weights = tuple(float(x) for x in q_raw.get("weights",
                    tuple(1.0 if abs(l - 0.5) < 1e-12 else 0.5 for l in levels)))
    quantiles = QuantileSpec(levels, weights)

    tr_allowed = {f.name for f in dataclasses.fields(TrainConfig)} - {"loss"}
    tr_raw = _take(top.get("training", {}), "training", tr_allowed)
    if seed_flag is not None or "seed" not in tr_raw:
        tr_raw["seed"] = seed + 1
    training = TrainConfig(**tr_raw)

    gs_raw = _take(top.get("gridsearch", {}), "gridsearch",
                   {"weights", "max_epochs", "n_runs"})
    if "weights" in gs_raw:
        gs_raw["weights"] = tuple(float(w) for w in gs_raw["weights"])
    gridsearch = GridSection(**gs_raw)

    return ExperimentConfig(seed=seed, out_dir=out_dir, thresholds=thresholds,
                            dataset=dataset, model=model, quantiles=quantiles,
                            training=training, gridsearch=gridsearch)


def load_experiment(path: str | None, seed_flag: int | None,
                    out_flag: str | None) -> ExperimentConfig:
    if path is None:
        raw = {}
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    return _parse_sections(raw, seed_flag, out_flag)


def experiment_to_dict(config: ExperimentConfig) -> dict:
    tr = dataclasses.asdict(config.training)
    tr.pop("loss")
    return {
        "seed": config.seed,
        "out_dir": config.out_dir,
        "thresholds": list(config.thresholds),
        "dataset": manifest_to_dict(config.dataset),
        "model": dataclasses.asdict(config.model),
        "quantiles": {"levels": list(config.quantiles.levels),
                      "weights": list(config.quantiles.weights)},
        "training": tr,
        "gridsearch": {"weights": list(config.gridsearch.weights),
                       "max_epochs": config.gridsearch.max_epochs,
                       "n_runs": config.gridsearch.n_runs},
    }


def _echo_config(config: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(experiment_to_dict(config), sort_keys=True, indent=2) + "\n"
    (out / "config.json").write_text(text)


def _model_config(config: ExperimentConfig, loss: str) -> ModelConfig:
    ds = config.dataset
    return ModelConfig(
        input_frames=ds.input_frames,
        lead_times=ds.lead_times,
        quantiles=config.quantiles if loss == "quantile" else None,
        base_channels=config.model.base_channels,
        depth=config.model.depth,
        grid_h=ds.grid_h,
        grid_w=ds.grid_w,
        attention_enabled=config.model.attention_enabled,
        seed=config.training.seed,
    )


def _loss_kind(config: ExperimentConfig, loss: str) -> LossKind:
    if loss == "mse":
        return LossKind.mse()
    if loss == "mae":
        return LossKind.mae()
    if loss == "quantile":
        return LossKind.multi_quantile(config.quantiles)
    raise ConfigError(f"unknown loss {loss!r}; expected one of {_LOSSES}")


def _load_dataset(config: ExperimentConfig, out: Path):
    archive_path = out / "archive.nwq1"
    if not archive_path.exists():
        raise DataError(f"no dataset at {archive_path}; run `generate` first")
    archive = read_archive(archive_path)
    return prepare_dataset(archive, config.dataset)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(config: ExperimentConfig, args) -> int:
    out = Path(config.out_dir)
    _echo_config(config, out)
    archive = generate_from_manifest(config.dataset)
    write_archive(archive, out / "archive.nwq1")
    manifest_text = json.dumps(manifest_to_dict(config.dataset), sort_keys=True,
                               indent=2) + "\n"
    (out / "manifest.json").write_text(manifest_text)
    splits = prepare_dataset(archive, config.dataset)
    counts = splits.counts()
    print(f"wrote {out / 'archive.nwq1'} ({archive.frames.shape[0]} frames, "
          f"{archive.frames.shape[1]}x{archive.frames.shape[2]})")
    print(f"splits: train {counts['train']}, val {counts['val']}, test {counts['test']}")
    return 0


def cmd_train(config: ExperimentConfig, args) -> int:
    out = Path(config.out_dir)
    _echo_config(config, out)
    splits = _load_dataset(config, out)
    training = dataclasses.replace(
        config.training,
        loss=_loss_kind(config, args.loss),
        n_runs=args.runs if args.runs is not None else config.training.n_runs,
        max_epochs=(args.max_epochs if args.max_epochs is not None
                    else config.training.max_epochs),
    )
    model_config = _model_config(config, args.loss)
    print(f"training {args.loss} model: {training.n_runs} run(s), "
          f"max {training.max_epochs} epochs, seed {training.seed}")
    best, logs = train_best_of(model_config, splits, training, verbose=True)

    (out / "runlogs").mkdir(parents=True, exist_ok=True)
    for log in logs:
        write_runlog_csv(log, out / "runlogs" / f"{args.loss}_run{log.run_index}.csv")
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoints" / f"{args.loss}.nwqc"
    save_checkpoint(best, ckpt_path)
    print(f"best run {best.run_index} (epoch {best.epoch}, "
          f"val {best.validation_loss:.6g}) -> {ckpt_path}")
    return 0


def cmd_gridsearch(config: ExperimentConfig, args) -> int:
    if args.loss != "quantile":
        raise ConfigError("grid search applies to the quantile loss only")
    out = Path(config.out_dir)
    _echo_config(config, out)
    splits = _load_dataset(config, out)
    grid = (tuple(float(w) for w in args.weights.split(","))
            if args.weights else config.gridsearch.weights)
    training = dataclasses.replace(
        config.training,
        n_runs=args.runs if args.runs is not None else config.gridsearch.n_runs,
        max_epochs=(args.max_epochs if args.max_epochs is not None
                    else config.gridsearch.max_epochs),
    )
    model_config = _model_config(config, "quantile")
    rows, best = grid_search_weights(config.quantiles.levels, list(grid),
                                     model_config, splits, training, verbose=True)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    table = out / "reports" / "gridsearch.csv"
    with open(table, "w", newline="") as fh:
        fh.write("weight,val_mse_median\n")
        for w, score in rows:
            fh.write(f"{w:.8g},{score:.8g}\n")
    print(f"wrote {table}")
    print(f"best weight: {best:g}")
    return 0


def _compatible(ckpt: Checkpoint, config: ExperimentConfig) -> None:
    mc, ds = ckpt.model_config, config.dataset
    same = (mc.grid_h == ds.grid_h and mc.grid_w == ds.grid_w
            and mc.input_frames == ds.input_frames and mc.lead_times == ds.lead_times)
    if not same:
        raise DimensionError(
            f"checkpoint expects {mc.input_frames}x{mc.grid_h}x{mc.grid_w} -> "
            f"{mc.lead_times} leads; dataset provides {ds.input_frames}x"
            f"{ds.grid_h}x{ds.grid_w} -> {ds.lead_times}")


def cmd_evaluate(config: ExperimentConfig, args) -> int:
    out = Path(config.out_dir)
    _echo_config(config, out)
    if args.checkpoints:
        paths = [Path(p) for p in args.checkpoints]
    else:
        paths = [out / "checkpoints" / f"{loss}.nwqc" for loss in _LOSSES]
        paths = [p for p in paths if p.exists()]
    if not paths:
        raise DataError(f"no checkpoints found under {out / 'checkpoints'}; "
                        "pass --checkpoints or run `train` first")

    splits = _load_dataset(config, out)
    reports = []
    for path in paths:
        ckpt = load_checkpoint(path)
        _compatible(ckpt, config)
        params = init_parameters(ckpt.model_config)
        params.load_values(ckpt.parameters)
        x_test, y_test = stack_windows(splits.test, ckpt.stats)
        output = run_model(params, ckpt.model_config, x_test)
        heads = split_heads(output, ckpt.model_config)
        report = eval_events(ckpt.objective, heads, y_test, ckpt.stats,
                             steps_per_hour=config.dataset.steps_per_hour,
                             thresholds=config.thresholds)
        reports.append(report)
        print(f"evaluated {path} ({ckpt.objective}, {len(heads)} head(s)) "
              f"on {x_test.shape[0]} test windows")

    (out / "reports").mkdir(parents=True, exist_ok=True)
    write_summary_csv(reports, out / "reports" / "summary.csv")
    write_curves_csv(reports, out / "reports" / "curves.csv")
    print(f"wrote {out / 'reports' / 'summary.csv'}")
    print(f"wrote {out / 'reports' / 'curves.csv'}")
    return 0


def _write_pgm(path: Path, field_mm: np.ndarray, scale_mm: float) -> None:
    h, w = field_mm.shape
    data = np.clip(field_mm / scale_mm, 0.0, 1.0)
    body = np.round(data * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(body.tobytes())


def cmd_predict(config: ExperimentConfig, args) -> int:
    out = Path(config.out_dir)
    _echo_config(config, out)
    ckpt = load_checkpoint(args.checkpoint)
    _compatible(ckpt, config)
    splits = _load_dataset(config, out)
    k = args.sample
    if not 0 <= k < len(splits.test):
        raise ContractError(f"sample {k} out of range; test split has "
                            f"{len(splits.test)} windows")

    x, y = stack_windows([splits.test[k]], ckpt.stats)
    params = init_parameters(ckpt.model_config)
    params.load_values(ckpt.parameters)
    heads = split_heads(run_model(params, ckpt.model_config, x), ckpt.model_config)

    steps = config.dataset.steps_per_hour
    scale = ckpt.stats.train_max * steps
    dest = out / "predictions" / f"sample{k}"
    dest.mkdir(parents=True, exist_ok=True)
    leads = ckpt.model_config.lead_times
    for l in range(leads):
        _write_pgm(dest / f"truth_lead{l + 1}.pgm",
                   y[0, l].astype(np.float64) * scale, scale)
        for name, pred in heads.items():
            _write_pgm(dest / f"{name}_lead{l + 1}.pgm",
                       pred[0, l].astype(np.float64) * scale, scale)
    (dest / "scale.txt").write_text(
        f"byte 255 corresponds to {scale!r} mm/h; values scale linearly "
        f"from 0 and are clipped above.\n")
    n_files = (1 + len(heads)) * leads
    print(f"wrote {n_files} graymaps to {dest}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment JSON config")
    common.add_argument("--out", metavar="DIR", help="output directory override")
    common.add_argument("--seed", type=int, metavar="U64",
                        help="experiment seed override (dataset seed; training "
                             "runs use seed+1)")

    parser = argparse.ArgumentParser(
        prog="nowquant",
        description="Synthetic-radar quantile nowcasting experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common],
                       help="synthesize the rain archive and write the manifest")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common],
                       help="train one model and save the best-of-n checkpoint")
    p.add_argument("--loss", choices=_LOSSES, required=True)
    p.add_argument("--runs", type=int, help="override number of seeded runs")
    p.add_argument("--max-epochs", type=int, help="override the epoch cap")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gridsearch", parents=[common],
                       help="search the shared upper-quantile weight")
    p.add_argument("--loss", choices=_LOSSES, default="quantile")
    p.add_argument("--weights", metavar="W1,W2,...",
                   help="comma-separated candidate weights")
    p.add_argument("--runs", type=int, help="override runs per grid point")
    p.add_argument("--max-epochs", type=int, help="override epochs per grid point")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score checkpoints on the test split, write CSVs")
    p.add_argument("--checkpoints", nargs="*", metavar="PATH",
                   help="checkpoint files (default: all under <out>/checkpoints)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common],
                       help="render one test sample as P5 graymaps")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--sample", type=int, default=0, metavar="K",
                   help="test-split window index (default 0)")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_experiment(args.config, args.seed, args.out)
        return args.func(config, args)
    except (ConfigError, ContractError, DataError, DimensionError, FormatError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
