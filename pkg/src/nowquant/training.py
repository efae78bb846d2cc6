"""Adam training loop with plateau LR decay, early stopping and checkpoints.

One run = one seed: the seed fixes parameter initialisation and the per-epoch
batch shuffle, so a (manifest, ModelConfig, TrainConfig, seed) tuple pins
every logged number. ``train_best_of`` repeats the run over consecutive
seeds and keeps the checkpoint with the lowest validation loss.

Checkpoints serialise to a small binary format:

    offset 0  4 bytes  magic ``NWQC``
    offset 4  u32 LE   version (1)
    offset 8  u32 LE   header length in bytes
    offset 12 ...      UTF-8 JSON header (sorted keys)
    then               raw little-endian float32 blocks: every parameter in
                       header order, then the Adam first moments, then the
                       second moments, same order

The header declares names and shapes, so a round-trip is bit-exact,
optimizer state included.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .data import DataSplits, NormalizationStats, stack_windows
from .errors import ConfigError, ContractError, FormatError, NumericError, TrainingError
from .model import ModelConfig, Parameters, QuantileSpec, forward, init_parameters
from .objectives import LossKind, compute_loss
from .tensor import GradientTape, Tensor, backward

_CKPT_MAGIC = b"NWQC"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation protocol shared by every objective."""

    loss: LossKind | None = None
    batch_size: int = 16
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    plateau_factor: float = 0.1
    plateau_patience: int = 4
    early_stop_patience: int = 15
    max_epochs: int = 200
    n_runs: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError("plateau_factor must lie strictly in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.early_stop_patience < self.plateau_patience:
            raise ConfigError(
                "early_stop_patience must be >= plateau_patience, otherwise "
                "the learning rate never gets a chance to drop")
        if self.max_epochs < 1 or self.n_runs < 1:
            raise ConfigError("max_epochs and n_runs must be >= 1")


# ---------------------------------------------------------------------------
# optimiser and schedule
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moment estimates plus the shared step count."""

    def __init__(self, params: Parameters):
        self.m = {name: np.zeros_like(p.values) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.values) for name, p in params.items()}
        self.step = 0


def adam_step(params: Parameters, state: AdamState, lr: float, config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place.

    A missing gradient counts as zero (fresh state then leaves the parameter
    untouched); a non-finite gradient aborts training and names the
    offending parameter.
    """
    state.step += 1
    t = state.step
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.values)
        elif not np.isfinite(g.sum(dtype=np.float64)) and not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.adam_epsilon)
        p.values -= lr * update


def plateau_scheduler(history: list[float], lr: float, factor: float, patience: int) -> float:
    """Reduce-on-plateau as a pure function of the validation history.

    Walks the history counting epochs since the last strict improvement or
    the last reduction; if the counter hits ``patience`` exactly at the
    newest epoch, the returned rate is ``lr * factor``, otherwise ``lr``.
    The counter reset after a reduction means another ``patience`` stagnant
    epochs must pass before the next cut.
    """
    if not history:
        raise ContractError("plateau_scheduler needs a non-empty history")
    best = history[0]
    counter = 0
    fire_now = False
    for i, value in enumerate(history[1:], start=1):
        if value < best:
            best = value
            counter = 0
        else:
            counter += 1
        if counter == patience:
            counter = 0
            fire_now = i == len(history) - 1
    return lr * factor if fire_now else lr


def epochs_since_best(history: list[float]) -> int:
    """Epochs elapsed since the last strict improvement of the running best."""
    if not history:
        raise ContractError("epochs_since_best needs a non-empty history")
    best = history[0]
    since = 0
    for value in history[1:]:
        if value < best:
            best = value
            since = 0
        else:
            since += 1
    return since


# ---------------------------------------------------------------------------
# run log
# ---------------------------------------------------------------------------


@dataclass
class RunLogRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class RunLog:
    run_index: int
    rows: list[RunLogRow] = field(default_factory=list)

    def val_history(self) -> list[float]:
        return [r.val_loss for r in self.rows]


def write_runlog_csv(log: RunLog, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr", "seconds"])
        for r in log.rows:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss),
                             repr(r.lr), f"{r.seconds:.3f}"])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Best-epoch snapshot: everything needed to evaluate or resume."""

    model_config: ModelConfig
    stats: NormalizationStats
    objective: str
    parameters: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    opt_step: int
    epoch: int
    validation_loss: float
    run_index: int
    lr: float
    val_history: list[float] = field(default_factory=list)


def _model_config_to_dict(config: ModelConfig) -> dict:
    d = dataclasses.asdict(config)
    if config.quantiles is not None:
        d["quantiles"] = {"levels": list(config.quantiles.levels),
                          "weights": list(config.quantiles.weights)}
    return d


def _model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    q = d.pop("quantiles", None)
    quantiles = None
    if q is not None:
        quantiles = QuantileSpec(tuple(q["levels"]), tuple(q["weights"]))
    known = {f.name for f in dataclasses.fields(ModelConfig)} - {"quantiles"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown model key(s): {sorted(unknown)}")
    return ModelConfig(quantiles=quantiles, **d)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = list(ckpt.parameters)
    header = {
        "model_config": _model_config_to_dict(ckpt.model_config),
        "stats": {"train_max": ckpt.stats.train_max},
        "objective": ckpt.objective,
        "epoch": ckpt.epoch,
        "validation_loss": ckpt.validation_loss,
        "run_index": ckpt.run_index,
        "lr": ckpt.lr,
        "val_history": ckpt.val_history,
        "opt_step": ckpt.opt_step,
        "parameters": [{"name": n, "shape": list(ckpt.parameters[n].shape)} for n in names],
        "dtype": "float32",
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        for group in (ckpt.parameters, ckpt.opt_m, ckpt.opt_v):
            for n in names:
                fh.write(np.ascontiguousarray(group[n], dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header at offset 0")
    if raw[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at offset 0, expected {_CKPT_MAGIC!r}")
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    if len(raw) < 12 + header_len:
        raise FormatError(f"{path}: truncated JSON header at offset 12")
    try:
        header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header at offset 12: {exc}") from exc

    entries = header["parameters"]
    offset = 12 + header_len
    expected = sum(int(np.prod(e["shape"])) for e in entries) * 3 * 4
    if len(raw) != offset + expected:
        raise FormatError(
            f"{path}: payload mismatch at offset {offset}: expected "
            f"{offset + expected} bytes total, have {len(raw)}")

    groups = []
    for _ in range(3):
        group = {}
        for e in entries:
            count = int(np.prod(e["shape"]))
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            group[e["name"]] = arr.reshape(e["shape"]).copy()
            offset += count * 4
        groups.append(group)

    return Checkpoint(
        model_config=_model_config_from_dict(header["model_config"]),
        stats=NormalizationStats(train_max=header["stats"]["train_max"]),
        objective=header["objective"],
        parameters=groups[0],
        opt_m=groups[1],
        opt_v=groups[2],
        opt_step=header["opt_step"],
        epoch=header["epoch"],
        validation_loss=header["validation_loss"],
        run_index=header["run_index"],
        lr=header["lr"],
        val_history=list(header["val_history"]),
    )


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _batched_loss(params: Parameters, x: np.ndarray, y: np.ndarray,
                  model_config: ModelConfig, kind: LossKind, batch_size: int) -> float:
    """Per-sample objective over a whole split, batched, no gradient tape."""
    total = 0.0
    for lo in range(0, x.shape[0], batch_size):
        xb = Tensor(x[lo:lo + batch_size])
        yb = Tensor(y[lo:lo + batch_size])
        out = forward(params, xb, model_config)
        loss = compute_loss(kind, yb, out)
        total += loss.item() * xb.shape[0]
    return total / x.shape[0]


def train_one(model_config: ModelConfig, splits: DataSplits, train_config: TrainConfig,
              run_seed: int, run_index: int = 0,
              resume: Checkpoint | None = None, verbose: bool = False):
    """Train a single run; returns the best-epoch checkpoint and its RunLog.

    Epochs count from zero. Resuming continues from a checkpoint's best
    epoch with the optimizer state, learning rate and validation history it
    carried, reproducing an uninterrupted run epoch for epoch.
    """
    kind = train_config.loss
    if kind is None:
        raise ConfigError("TrainConfig.loss must be set before training")
    x_train, y_train = stack_windows(splits.train, splits.stats)
    x_val, y_val = stack_windows(splits.val, splits.stats)
    n = x_train.shape[0]

    if resume is None:
        params = init_parameters(dataclasses.replace(model_config, seed=run_seed))
        state = AdamState(params)
        lr = train_config.learning_rate
        history: list[float] = []
        start_epoch = 0
    else:
        params = init_parameters(dataclasses.replace(model_config, seed=run_seed))
        params.load_values(resume.parameters)
        state = AdamState(params)
        for name in state.m:
            state.m[name][...] = resume.opt_m[name]
            state.v[name][...] = resume.opt_v[name]
        state.step = resume.opt_step
        # Snapshots happen only at strict-improvement epochs, where the
        # plateau counter resets, so the carried lr is already the rate the
        # next epoch would have used.
        lr = resume.lr
        history = list(resume.val_history)
        start_epoch = resume.epoch + 1

    log = RunLog(run_index=run_index)
    best: Checkpoint | None = resume
    best_val = math.inf if resume is None else min(history)

    for epoch in range(start_epoch, train_config.max_epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([run_seed, epoch]).permutation(n)
        running = 0.0
        for lo in range(0, n, train_config.batch_size):
            batch = order[lo:lo + train_config.batch_size]
            params.zero_grads()
            try:
                with GradientTape() as tape:
                    out = forward(params, Tensor(x_train[batch]), model_config)
                    loss = compute_loss(kind, Tensor(y_train[batch]), out)
                backward(loss, tape)
                adam_step(params, state, lr, train_config)
            except (NumericError, TrainingError) as exc:
                raise TrainingError(f"run {run_index} diverged in epoch {epoch}: {exc}",
                                    run_log=log) from exc
            running += loss.item() * batch.size
        train_loss = running / n

        val_loss = _batched_loss(params, x_val, y_val, model_config, kind,
                                 train_config.batch_size)
        if not math.isfinite(val_loss):
            log.rows.append(RunLogRow(epoch, train_loss, val_loss, lr,
                                      time.perf_counter() - t0))
            raise TrainingError(f"run {run_index} diverged: validation loss {val_loss} "
                                f"in epoch {epoch}", run_log=log)
        history.append(val_loss)
        log.rows.append(RunLogRow(epoch, train_loss, val_loss, lr,
                                  time.perf_counter() - t0))
        if verbose:
            per_px = val_loss / (model_config.lead_times * model_config.grid_h * model_config.grid_w)
            print(f"    epoch {epoch:3d}  train {train_loss:10.4f}  val {val_loss:10.4f}"
                  f"  (per px {per_px:.6f})  lr {lr:g}  {time.perf_counter() - t0:.1f}s")

        if val_loss < best_val:
            best_val = val_loss
            best = Checkpoint(
                model_config=model_config,
                stats=splits.stats,
                objective=kind.tag,
                parameters=params.values_dict(),
                opt_m={k: v.copy() for k, v in state.m.items()},
                opt_v={k: v.copy() for k, v in state.v.items()},
                opt_step=state.step,
                epoch=epoch,
                validation_loss=val_loss,
                run_index=run_index,
                lr=lr,
                val_history=list(history),
            )

        lr = plateau_scheduler(history, lr, train_config.plateau_factor,
                               train_config.plateau_patience)
        if epochs_since_best(history) >= train_config.early_stop_patience:
            break

    if best is None:
        raise TrainingError(f"run {run_index} produced no finite validation loss", run_log=log)
    return best, log


def train_best_of(model_config: ModelConfig, splits: DataSplits,
                  train_config: TrainConfig, verbose: bool = False):
    """Run ``n_runs`` seeded runs and keep the lowest-validation checkpoint.

    Seeds are ``seed + 0 .. seed + n_runs - 1``; ties go to the lower run
    index via strict comparison. A run that diverges is dropped; the error
    propagates only when every run diverged.
    """
    best: Checkpoint | None = None
    logs: list[RunLog] = []
    failures: list[str] = []
    for run_index in range(train_config.n_runs):
        run_seed = train_config.seed + run_index
        if verbose:
            print(f"  run {run_index} (seed {run_seed})")
        try:
            ckpt, log = train_one(model_config, splits, train_config,
                                  run_seed=run_seed, run_index=run_index,
                                  verbose=verbose)
        except TrainingError as exc:
            failures.append(str(exc))
            if exc.run_log is not None:
                logs.append(exc.run_log)
            continue
        logs.append(log)
        if best is None or ckpt.validation_loss < best.validation_loss:
            best = ckpt
    if best is None:
        raise TrainingError("all runs diverged: " + "; ".join(failures))
    return best, logs


def grid_search_weights(levels: tuple[float, ...], grid: list[float],
                        model_config: ModelConfig, splits: DataSplits,
                        train_config: TrainConfig, verbose: bool = False):
    """1-D search over the shared weight of the non-median quantile levels.

    The 0.5 level keeps weight 1.0. Each candidate trains with the given
    budget and is scored by the validation MSE of its median head, in
    normalised units per pixel. Returns the (weight, score) table and the
    winning weight; ties go to the smaller weight.
    """
    if 0.5 not in levels:
        raise ConfigError("grid search needs the 0.5 level to score against")
    if not grid:
        raise ConfigError("grid search needs at least one candidate weight")
    if any(w <= 0 for w in grid):
        raise ConfigError("candidate weights must be positive")

    from .model import extract_quantile  # local to avoid cycle at import time

    x_val, y_val = stack_windows(splits.val, splits.stats)
    rows = []
    best_weight = None
    best_score = math.inf
    for w in sorted(grid):
        weights = tuple(1.0 if q == 0.5 else float(w) for q in levels)
        spec = QuantileSpec(levels, weights)
        cfg = dataclasses.replace(model_config, quantiles=spec)
        tc = dataclasses.replace(train_config, loss=LossKind.multi_quantile(spec))
        if verbose:
            print(f"grid weight {w}")
        ckpt, _ = train_best_of(cfg, splits, tc, verbose=verbose)
        params = init_parameters(cfg)
        params.load_values(ckpt.parameters)
        q_index = spec.median_index()
        se = 0.0
        count = 0
        for lo in range(0, x_val.shape[0], train_config.batch_size):
            out = forward(params, Tensor(x_val[lo:lo + train_config.batch_size]), cfg)
            med = extract_quantile(out, q_index, spec)
            err = med.values - y_val[lo:lo + train_config.batch_size]
            se += float((err * err).sum())
            count += err.size
        score = se / count
        rows.append((float(w), score))
        if score < best_score:
            best_score = score
            best_weight = float(w)
    return rows, best_weight
