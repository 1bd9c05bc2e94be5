"""Desk-scale experiment drivers that write CSV run logs.

Every CSV starts with a ``#``-prefixed JSON line holding the build id, the
full run config and run metadata, followed by a header row. Rows of the
per-step log use :data:`CSV_COLUMNS`; ``split`` is ``train`` (one row per
optimizer step, minibatch loss), ``train_epoch`` (full training-set loss at
the end of an epoch) or ``test``. Steps increase strictly within a split.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .conditioner import ConditionerConfig, CurvatureSource, Mode, condition_model
from .dataio import BatchPlan, Dataset, autoencoder_view, load_mnist
from .nn import (Activation, Loss, Mlp, backward, backward_exact, backward_sampled, forward,
                 loss_and_metrics, save_checkpoint)
from .optim import NonFiniteUpdateError, OptimState, apply_update, lr_grid

log = logging.getLogger(__name__)

BUILD_ID = f"isaac-{__version__}"
CSV_COLUMNS = (
    "step", "epoch", "split", "loss", "accuracy",
    "wall_ms_forward", "wall_ms_backward", "wall_ms_condition", "wall_ms_update", "peak_bytes",
)
WALL_COLUMNS = CSV_COLUMNS[5:9]
AUTOENCODER_HIDDEN = [1000, 500, 30, 500, 1000]
DEFAULT_GRID = [1e-6, 1e-4, 1e-2, 1.0, 1e2, 1e4, 1e6]
DEFAULT_MASKS = ["all", "first", "last", "first-three", "last-three", "odd", "even"]
EVAL_CHUNK = 1000


class NumericFailure(FloatingPointError):
    """Training produced a non-finite loss or update; the log was flushed."""

    def __init__(self, message, log_=None):
        super().__init__(message)
        self.log = log_


def _json_float(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _parse_float(v):
    return float(v) if isinstance(v, str) else v


@dataclass
class RunConfig:
    experiment: str = "train"
    data_dir: Optional[str] = None
    full_mnist: bool = False
    train_size: Optional[int] = None
    depth: int = 5
    width: int = 100
    hidden: Optional[list] = None
    activation: str = "relu"
    bias: bool = True
    loss: Optional[str] = None
    mode: str = "zeta_star"
    curvature_source: str = "sampled_ggn"
    lambda_g: float = math.inf
    lambda_x: float = 0.1
    r: int = 1
    layer_mask: Optional[list] = None
    large_batch_switch: bool = True
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    tune_lr: bool = False
    epochs: int = 5
    max_steps: Optional[int] = None
    batch_size: int = 60
    seed: int = 0
    evaluate: bool = True
    output_dir: Optional[str] = None
    grid_lambdas: list = field(default_factory=lambda: list(DEFAULT_GRID))
    masks: list = field(default_factory=lambda: list(DEFAULT_MASKS))
    widths: list = field(default_factory=lambda: [100, 400, 1600])
    bench_methods: list = field(default_factory=lambda: ["gradient", "zeta_star", "zeta", "kfac"])
    bench_lambda: float = 0.1
    bench_steps: int = 1000
    warmup: int = 100
    workers: int = 1

    def __post_init__(self):
        self.lambda_g = float(_parse_float(self.lambda_g))
        self.lambda_x = float(_parse_float(self.lambda_x))
        self.grid_lambdas = [float(_parse_float(v)) for v in self.grid_lambdas]
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.experiment not in ("train", "grid", "autoencoder", "layer_mask", "bench"):
            raise ValueError(f"unknown experiment {self.experiment!r}")
        self.conditioner()
        self.optim_state()

    def to_dict(self) -> dict:
        return {k: (_json_float(v) if not isinstance(v, list) else [_json_float(x) for x in v])
                for k, v in dataclasses.asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json_file(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def conditioner(self) -> ConditionerConfig:
        return ConditionerConfig(
            mode=self.mode, curvature_source=self.curvature_source,
            lambda_g=self.lambda_g, lambda_x=self.lambda_x, r=self.r,
            layer_mask=None if self.layer_mask is None else tuple(self.layer_mask),
            large_batch_switch=self.large_batch_switch,
        )

    def optim_state(self) -> OptimState:
        return OptimState(kind=self.optimizer, lr=self.lr, momentum=self.momentum,
                          betas=tuple(self.betas), eps=self.eps)

    def loss_kind(self) -> Loss:
        if self.loss is not None:
            return Loss(self.loss)
        return Loss.MSE if self.experiment == "autoencoder" else Loss.SOFTMAX_CROSS_ENTROPY

    def layer_sizes(self, d_in: int, d_out: int) -> list[int]:
        if self.hidden is not None:
            hidden = list(self.hidden)
        elif self.experiment == "autoencoder":
            hidden = list(AUTOENCODER_HIDDEN)
        else:
            hidden = [self.width] * (self.depth - 1)
        return [d_in, *hidden, d_out]


class RunLog:
    """Append-only per-step/per-epoch log with a self-describing CSV form."""

    def __init__(self, config: Optional[dict] = None, meta: Optional[dict] = None):
        self.config = config or {}
        self.meta = meta or {}
        self.rows: list[dict] = []
        self._last_step: dict[str, int] = {}

    def append(self, step, epoch, split, loss, accuracy=None, wall_ms_forward=0.0,
               wall_ms_backward=0.0, wall_ms_condition=0.0, wall_ms_update=0.0, peak_bytes=0):
        if step <= self._last_step.get(split, -1):
            raise ValueError(f"step {step} does not increase for split {split!r}")
        walls = (wall_ms_forward, wall_ms_backward, wall_ms_condition, wall_ms_update)
        if min(walls) < 0:
            raise ValueError("wall times must be nonnegative")
        self._last_step[split] = step
        self.rows.append(dict(zip(CSV_COLUMNS, (
            int(step), int(epoch), split, float(loss), None if accuracy is None else float(accuracy),
            *map(float, walls), int(peak_bytes),
        ))))

    def split(self, name: str) -> list[dict]:
        return [r for r in self.rows if r["split"] == name]

    def final_loss(self, split: str = "train_epoch") -> float:
        rows = self.split(split)
        if self.meta.get("status", "ok") != "ok" or not rows:
            return math.nan
        return rows[-1]["loss"]

    def final_accuracy(self, split: str = "test") -> float:
        rows = self.split(split)
        if self.meta.get("status", "ok") != "ok" or not rows or rows[-1]["accuracy"] is None:
            return math.nan
        return rows[-1]["accuracy"]

    def header_line(self) -> str:
        return "# " + json.dumps({"build": BUILD_ID, "config": self.config, "meta": self.meta},
                                 sort_keys=True, default=_json_float)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write(self.header_line() + "\n")
            writer = csv.writer(f)
            writer.writerow(CSV_COLUMNS)
            for row in self.rows:
                writer.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                                 for c in CSV_COLUMNS])
        return path

    @classmethod
    def read_csv(cls, path) -> "RunLog":
        with open(path, encoding="utf-8") as f:
            first = f.readline()
            header = json.loads(first[2:])
            out = cls(header["config"], header.get("meta"))
            for row in csv.DictReader(f):
                out.append(
                    int(row["step"]), int(row["epoch"]), row["split"], float(row["loss"]),
                    None if row["accuracy"] == "" else float(row["accuracy"]),
                    *(float(row[c]) for c in WALL_COLUMNS), int(row["peak_bytes"]),
                )
        return out


def write_table(path, rows: list[dict], columns, header: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write("# " + json.dumps({"build": BUILD_ID, **header}, sort_keys=True, default=_json_float) + "\n")
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])
    return path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if math.isinf(v) and v > 0 else repr(v)
    return v


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    train, test = load_mnist(cfg.data_dir, full=cfg.full_mnist)
    if cfg.train_size is not None:
        train = train.take(cfg.train_size)
    if cfg.experiment == "autoencoder":
        train, test = autoencoder_view(train), autoencoder_view(test)
    return train, test


def _rng(seed, stream):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


def build_model(cfg: RunConfig, d_in: int, d_out: int) -> Mlp:
    return Mlp.init(cfg.layer_sizes(d_in, d_out), activation=Activation(cfg.activation),
                    bias=cfg.bias, seed=_rng(cfg.seed, 1), dtype=np.float32)


def live_bytes(model: Mlp, tapes, state: OptimState, cfg: ConditionerConfig) -> int:
    """Analytic estimate of live buffer bytes during a step."""
    total = sum(l.weight.nbytes + (0 if l.bias is None else l.bias.nbytes) for l in model.layers)
    total *= 2  # parameters plus the update direction
    total += state.buffer_bytes()
    workspace = 0
    for i, (t, layer) in enumerate(zip(tapes, model.layers)):
        for arr in (t.x, t.z, t.g, t.g_sampled):
            if arr is not None:
                total += arr.nbytes
        if not cfg.layer_enabled(i) or cfg.mode is Mode.GRADIENT:
            continue
        b, n, m = t.batch_size, layer.d_in, layer.d_out
        rb = b * max(cfg.r, 1) if cfg.curvature_source is not CurvatureSource.FISHER else b
        side = n if cfg.large_batch_switch and b > n else b
        if cfg.mode is Mode.ZETA_STAR:
            elems = 2 * side * side
        elif cfg.mode is Mode.ZETA:
            elems = 2 * side * side + 2 * rb * rb + m * n
        else:
            elems = 2 * (m * m + n * n) + m * n
        workspace = max(workspace, elems * t.x.itemsize)
    return int(total + workspace)


def evaluate(model: Mlp, data: Dataset, loss: Loss) -> tuple[float, Optional[float]]:
    total, correct, n = 0.0, 0.0, len(data)
    for start in range(0, n, EVAL_CHUNK):
        out, _ = forward(model, data.inputs[start:start + EVAL_CHUNK])
        value, acc = loss_and_metrics(out, data.targets[start:start + EVAL_CHUNK], loss)
        rows = out.shape[0]
        total += value * rows
        if acc is not None:
            correct += acc * rows
    return total / n, (correct / n if loss is Loss.SOFTMAX_CROSS_ENTROPY else None)


def train_model(cfg: RunConfig, train: Dataset, test: Optional[Dataset] = None,
                model: Optional[Mlp] = None) -> tuple[Mlp, RunLog]:
    """Run one training job; never writes files.

    On a non-finite loss or update the log is closed with ``meta["status"]``
    set to ``"numeric_failure"`` and :class:`NumericFailure` is raised with
    the log attached.
    """
    loss = cfg.loss_kind()
    cond = cfg.conditioner()
    state = cfg.optim_state()
    if model is None:
        model = build_model(cfg, train.inputs.shape[1], train.targets.shape[1])
    run_log = RunLog(cfg.to_dict(), {"status": "ok"})
    plan = BatchPlan(cfg.batch_size, seed=cfg.seed, epochs=cfg.epochs)
    mc_rng = _rng(cfg.seed, 2)
    steps_per_epoch = plan.steps_per_epoch(len(train))
    if cfg.epochs and steps_per_epoch == 0:
        raise ValueError(f"batch size {cfg.batch_size} exceeds the {len(train)} training samples")
    fallbacks = 0
    step = 0
    for epoch in range(cfg.epochs):
        for idx in plan.epoch_indices(len(train), epoch):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            xb, yb = train.inputs[idx], train.targets[idx]
            t0 = time.perf_counter()
            out, tapes = forward(model, xb)
            t1 = time.perf_counter()
            value, tapes, _ = backward(model, tapes, out, yb, loss)
            if cond.needs_curvature:
                if cond.curvature_source is CurvatureSource.EXACT_GGN:
                    backward_exact(model, tapes, out, loss)
                else:
                    backward_sampled(model, tapes, out, loss, cond.r, mc_rng)
            t2 = time.perf_counter()
            step += 1
            if not math.isfinite(value):
                run_log.meta.update(status="numeric_failure", failed_step=step)
                raise NumericFailure(f"non-finite loss at step {step}", run_log)
            direction = condition_model(model, tapes, cond)
            fallbacks += len(direction.fallback_layers)
            t3 = time.perf_counter()
            try:
                apply_update(model, direction, state)
            except NonFiniteUpdateError as exc:
                run_log.meta.update(status="numeric_failure", failed_step=step)
                raise NumericFailure(str(exc), run_log) from exc
            t4 = time.perf_counter()
            acc = None
            if loss is Loss.SOFTMAX_CROSS_ENTROPY:
                acc = float(np.mean(np.argmax(out, axis=1) == np.argmax(yb, axis=1)))
            run_log.append(step, epoch + 1, "train", value, acc,
                           (t1 - t0) * 1e3, (t2 - t1) * 1e3, (t3 - t2) * 1e3, (t4 - t3) * 1e3,
                           live_bytes(model, tapes, state, cond))
        if cfg.evaluate:
            train_loss, train_acc = evaluate(model, train, loss)
            if not math.isfinite(train_loss):
                run_log.meta.update(status="numeric_failure", failed_step=step)
                raise NumericFailure(f"non-finite training loss after epoch {epoch + 1}", run_log)
            run_log.append(step, epoch + 1, "train_epoch", train_loss, train_acc)
            if test is not None:
                test_loss, test_acc = evaluate(model, test, loss)
                run_log.append(step, epoch + 1, "test", test_loss, test_acc)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    run_log.meta["fallback_layer_steps"] = fallbacks
    return model, run_log


def _train_or_nan(cfg, train, test):
    """Like :func:`train_model` but a numeric failure yields a failed log."""
    try:
        return train_model(cfg, train, test)
    except NumericFailure as exc:
        return None, exc.log


def _score(run_log: RunLog) -> float:
    value = run_log.final_loss()
    return value if math.isfinite(value) else math.inf


def tune(cfg: RunConfig, train, test) -> tuple[Optional[Mlp], RunLog]:
    """Best run over the learning-rate grid by final training loss (ties: larger lr)."""
    best = None
    scores = {}
    for lr in lr_grid():
        model, run_log = _train_or_nan(cfg.replace(lr=lr, tune_lr=False), train, test)
        scores[repr(lr)] = _json_float(_score(run_log))
        if best is None or _score(run_log) < _score(best[1]):
            best = (model, run_log)
    best[1].meta["lr_scores"] = scores
    best[1].meta["tuned_lr"] = best[1].config["lr"]
    return best


def run_train(cfg: RunConfig, data: Optional[tuple[Dataset, Dataset]] = None) -> RunLog:
    """Train (optionally tuning the learning rate), write ``train.csv`` and ``model.isaac``."""
    train, test = data if data is not None else load_data(cfg)
    if cfg.tune_lr:
        model, run_log = tune(cfg, train, test)
        if model is None:
            raise NumericFailure("every learning rate diverged", run_log)
    else:
        try:
            model, run_log = train_model(cfg, train, test)
        except NumericFailure as exc:
            if cfg.output_dir:
                exc.log.to_csv(Path(cfg.output_dir) / "train.csv")
            raise
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        run_log.to_csv(out / "train.csv")
        save_checkpoint(model, out / "model.isaac")
    return run_log


# ---------------------------------------------------------------- grid


def _label(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:g}"


def grid_cell_config(cfg: RunConfig, lambda_g: float, lambda_x: float) -> tuple[str, RunConfig]:
    """Sector name and run config of one regularization cell; infinities become mode switches."""
    if math.isinf(lambda_g) and math.isinf(lambda_x):
        return "gradient", cfg.replace(mode="gradient", lambda_g=math.inf, lambda_x=math.inf)
    if math.isinf(lambda_g):
        return "zeta_star", cfg.replace(mode="zeta_star", lambda_g=math.inf, lambda_x=lambda_x)
    return "zeta", cfg.replace(mode="zeta", lambda_g=lambda_g, lambda_x=lambda_x)


_WORKER_DATA = None


def _init_worker(data):
    global _WORKER_DATA
    _WORKER_DATA = data


def _cell_job(cfg_dict):
    cfg = RunConfig.from_dict(cfg_dict)
    _, run_log = _train_or_nan(cfg, *_WORKER_DATA)
    return run_log


def _run_many(cfgs: list[RunConfig], data, workers: int) -> list[RunLog]:
    if workers <= 1:
        return [_train_or_nan(c, *data)[1] for c in cfgs]
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(data,)) as pool:
        return list(pool.map(_cell_job, [c.to_dict() for c in cfgs]))


@dataclass
class GridResult:
    lambdas_g: list
    lambdas_x: list
    cells: dict  # (lambda_g, lambda_x) -> RunLog at the sector learning rate
    sector_lr: dict
    paths: dict = field(default_factory=dict)

    def final_loss(self, lambda_g, lambda_x) -> float:
        return self.cells[(lambda_g, lambda_x)].final_loss()

    def test_accuracy(self, lambda_g, lambda_x) -> float:
        return self.cells[(lambda_g, lambda_x)].final_accuracy()


def run_grid(cfg: RunConfig, data=None) -> GridResult:
    """Regularization grid plus the infinite row and column.

    Each sector (zeta, zeta_star, gradient) shares one learning rate. With
    ``tune_lr`` it is the grid value minimizing the median final training
    loss over the sector's cells (diverged cells count as +inf).
    """
    data = data if data is not None else load_data(cfg)
    lambdas_g = list(cfg.grid_lambdas) + [math.inf]
    lambdas_x = list(cfg.grid_lambdas) + [math.inf]
    sectors: dict[str, list] = {}
    for lg in lambdas_g:
        for lx in lambdas_x:
            sector, cell_cfg = grid_cell_config(cfg, lg, lx)
            sectors.setdefault(sector, []).append(((lg, lx), cell_cfg))

    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    cells, sector_lr, long_rows = {}, {}, []
    for sector, members in sectors.items():
        candidates = lr_grid() if cfg.tune_lr else [cfg.lr]
        best = None
        for lr in candidates:
            cell_cfgs = [c.replace(lr=lr, tune_lr=False) for _, c in members]
            logs = _run_many(cell_cfgs, data, cfg.workers)
            if out_dir:
                for (key, _), run_log in zip(members, logs):
                    run_log.to_csv(out_dir / "cells" / f"lg={_label(key[0])}_lx={_label(key[1])}_lr={lr:g}.csv")
            score = float(np.median([_score(l) for l in logs]))
            if best is None or score < best[0]:
                best = (score, lr, logs)
        sector_lr[sector] = best[1]
        for (key, _), run_log in zip(members, best[2]):
            cells[key] = run_log

    for lg in lambdas_g:
        for lx in lambdas_x:
            sector, cell_cfg = grid_cell_config(cfg, lg, lx)
            run_log = cells[(lg, lx)]
            long_rows.append(dict(lambda_g=lg, lambda_x=lx, sector=sector, mode=cell_cfg.mode,
                                  lr=sector_lr[sector], final_train_loss=run_log.final_loss(),
                                  test_accuracy=run_log.final_accuracy(),
                                  status=run_log.meta.get("status")))
    result = GridResult(lambdas_g, lambdas_x, cells, sector_lr)
    if out_dir:
        header = {"config": cfg.to_dict(), "sector_lr": sector_lr}
        result.paths["summary"] = write_table(
            out_dir / "grid_summary.csv", long_rows,
            ("lambda_g", "lambda_x", "sector", "mode", "lr", "final_train_loss", "test_accuracy", "status"),
            header)
        for name, getter in (("train_loss", result.final_loss), ("test_accuracy", result.test_accuracy)):
            rows = [{"lambda_x": lx, **{_label(lg): getter(lg, lx) for lg in lambdas_g}} for lx in lambdas_x]
            result.paths[name] = write_table(
                out_dir / f"grid_{name}.csv", rows, ("lambda_x", *[_label(lg) for lg in lambdas_g]),
                {**header, "rows": "lambda_x", "columns": "lambda_g", "value": name})
    return result


# ---------------------------------------------------------------- layer masks


def mask_vector(name: str, n_layers: int) -> list[bool]:
    """Named layer selections; layers are numbered from 1 for odd/even."""
    idx = range(n_layers)
    chosen = {
        "all": set(idx),
        "none": set(),
        "first": {0},
        "last": {n_layers - 1},
        "first-three": set(range(min(3, n_layers))),
        "last-three": set(range(max(0, n_layers - 3), n_layers)),
        "odd": {i for i in idx if (i + 1) % 2 == 1},
        "even": {i for i in idx if (i + 1) % 2 == 0},
    }
    if name not in chosen:
        raise ValueError(f"unknown mask {name!r}")
    return [i in chosen[name] for i in idx]


def run_layer_mask(cfg: RunConfig, data=None) -> dict[str, RunLog]:
    """ZETA_STAR on selected layers only, one run per mask plus a gradient baseline."""
    data = data if data is not None else load_data(cfg)
    n_layers = len(cfg.layer_sizes(data[0].inputs.shape[1], data[0].targets.shape[1])) - 1
    jobs = {"gradient": cfg.replace(mode="gradient", layer_mask=None)}
    for name in cfg.masks:
        jobs[name] = cfg.replace(mode="zeta_star", lambda_g=math.inf, layer_mask=mask_vector(name, n_layers))
    logs = {}
    for name, job in jobs.items():
        if cfg.tune_lr:
            _, logs[name] = tune(job, *data)
        else:
            _, logs[name] = _train_or_nan(job, *data)
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        rows = []
        for name, run_log in logs.items():
            run_log.to_csv(out / "runs" / f"{name}.csv")
            rows.append(dict(mask=name, layers="".join("1" if m else "0" for m in
                                                      (run_log.config["layer_mask"] or [False] * n_layers)),
                             lr=run_log.config["lr"], final_train_loss=run_log.final_loss(),
                             test_accuracy=run_log.final_accuracy(), status=run_log.meta.get("status")))
        write_table(out / "layer_mask_summary.csv", rows,
                    ("mask", "layers", "lr", "final_train_loss", "test_accuracy", "status"),
                    {"config": cfg.to_dict()})
    return logs


# ---------------------------------------------------------------- bench


@dataclass
class BenchResult:
    logs: dict  # (width, method) -> RunLog
    summary: list


def _median_phases(run_log: RunLog, warmup: int) -> dict:
    rows = [r for r in run_log.split("train") if r["step"] > warmup] or run_log.split("train")
    phases = {c: float(np.median([r[c] for r in rows])) for c in WALL_COLUMNS}
    phases["wall_ms_total"] = float(np.median([sum(r[c] for c in WALL_COLUMNS) for r in rows]))
    phases["peak_bytes"] = max(r["peak_bytes"] for r in rows)
    phases["steps"] = len(rows)
    return phases


def bench_config(cfg: RunConfig, width: int, method: str) -> RunConfig:
    lam = cfg.bench_lambda
    extra = {"gradient": dict(lambda_g=math.inf, lambda_x=math.inf),
             "zeta_star": dict(lambda_g=math.inf, lambda_x=lam),
             "zeta": dict(lambda_g=lam, lambda_x=lam),
             "kfac": dict(lambda_g=lam, lambda_x=lam)}[method]
    return cfg.replace(mode=method, width=width, hidden=None, evaluate=False, tune_lr=False,
                       max_steps=cfg.bench_steps, epochs=10**9, layer_mask=None, **extra)


def run_bench(cfg: RunConfig, data=None) -> BenchResult:
    """Per-phase median step times (after ``warmup`` steps) per width and method."""
    train, _ = data if data is not None else load_data(cfg)
    logs, summary = {}, []
    for width in cfg.widths:
        for method in cfg.bench_methods:
            _, run_log = _train_or_nan(bench_config(cfg, width, method), train, None)
            logs[(width, method)] = run_log
            summary.append(dict(width=width, method=method, status=run_log.meta.get("status"),
                                **_median_phases(run_log, cfg.warmup)))
            log.info("bench width=%d method=%s total=%.3f ms", width, method, summary[-1]["wall_ms_total"])
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        for (width, method), run_log in logs.items():
            run_log.to_csv(out / "runs" / f"{method}_n{width}.csv")
        write_table(out / "bench_summary.csv", summary,
                    ("width", "method", "steps", *WALL_COLUMNS, "wall_ms_total", "peak_bytes", "status"),
                    {"config": cfg.to_dict()})
    return BenchResult(logs, summary)
