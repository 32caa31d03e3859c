"""Experiment execution: config -> deterministic metrics CSV.

One run drives a Trainer over a synthetic problem, logging a RunRecord
every `eval_every` steps (plus step 0 and the final step). Reruns with
the same config produce byte-identical CSVs. Rows are flushed as they
are produced, so an interrupted run leaves a parseable prefix.
"""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .comm import CommLedger, ledger_report
from .compressors import CompressorSpec
from .config import ConfigError, RunConfig, apply_dotted
from .optim import DivergenceError, OptimizerConfig, Trainer
from .problems import (
    LeastSquares,
    make_least_squares,
    make_logreg,
    make_mlp,
    shard_indices,
)

CSV_COLUMNS = (
    "step",
    "train_loss",
    "grad_norm_sq",
    "comm_bytes_cum",
    "aux_bytes",
    "eval_metric",
    "rowspace_residual",
)


@dataclass
class RunRecord:
    step: int
    train_loss: float
    grad_norm_sq: float
    comm_bytes_cum: float
    aux_bytes: float
    eval_metric: float | None = None
    rowspace_residual: float | None = None

    def to_csv_row(self) -> str:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return ",".join(
            (
                str(self.step),
                fmt(self.train_loss),
                fmt(self.grad_norm_sq),
                fmt(self.comm_bytes_cum),
                fmt(self.aux_bytes),
                fmt(self.eval_metric),
                fmt(self.rowspace_residual),
            )
        )


def build_problem(config: RunConfig):
    p = config.problem
    kind = p["kind"]
    seed = config.run["seed"]
    if kind == "least_squares":
        return make_least_squares(
            p.get("n", 50), p.get("d", 200), seed=seed,
            solution_norm=p.get("solution_norm", 1.0),
        )
    if kind == "logreg":
        return make_logreg(p.get("n", 512), p.get("d", 100), seed=seed,
                           flip=p.get("flip", 0.05))
    if kind == "mlp":
        hidden = tuple(p.get("hidden", [16, 16]))
        if len(hidden) != 2:
            raise ConfigError("key 'problem.hidden' must list two layer sizes")
        return make_mlp(hidden=hidden, seed=seed, n=p.get("n", 256),
                        in_dim=p.get("in_dim", 8), n_classes=p.get("classes", 4))
    raise ConfigError(f"unknown problem kind '{kind}'")


def build_compressor_spec(table: dict | None, dim: int, master_seed: int,
                          role: str) -> CompressorSpec | None:
    """Materialize a compressor table; ratio keys resolve against dim.

    Gradient-side random-support kinds get a shared seed automatically so
    every worker draws the same support (required for allreduce).
    """
    if table is None:
        return None
    t = dict(table)
    kind = t.pop("kind", None)
    if kind is None:
        raise ConfigError(f"missing key '{role}.kind'")
    if "ratio" in t:
        # spec-level clamp: k >= d configurations run uncompressed
        t["k"] = min(dim, max(1, round(t.pop("ratio") * dim)))
    if "k" in t:
        t["k"] = min(t["k"], dim)
    if "width_ratio" in t:
        width = max(1, round(t.pop("width_ratio") * dim))
        block = t.get("block_size", 1)
        t["width"] = max(block, width - width % block)
    shared = t.pop("shared_seed", None)
    if shared is None and role == "grad_compressor" and kind in (
        "random_k", "random_block_k", "random_projection",
    ):
        shared = _rng.derive_key(master_seed, 0xC0)
    try:
        return CompressorSpec(kind, shared_seed=shared, **t)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {role}: {exc}") from None


def build_optimizer(config: RunConfig, dim: int) -> OptimizerConfig:
    o = config.optimizer
    seed = config.run["seed"]
    grad = build_compressor_spec(config.grad_compressor, dim, seed,
                                 "grad_compressor")
    err = build_compressor_spec(config.err_compressor, dim, seed,
                                "err_compressor")
    err2 = build_compressor_spec(config.err2_compressor, dim, seed,
                                 "err2_compressor")
    opt = OptimizerConfig(
        algorithm=o["algorithm"],
        lr=o.get("lr", 0.1),
        lr_decay_steps=tuple(o.get("lr_decay_steps", ())),
        lr_decay_factor=o.get("lr_decay_factor", 0.1),
        momentum=o.get("momentum", 0.0),
        nesterov=o.get("nesterov", False),
        clip_norm=o.get("clip_norm", 0.0),
        beta=o.get("beta", 0.0),
        error_reset_every=o.get("error_reset_every", 0),
        grad_spec=grad if grad is not None else CompressorSpec("identity"),
        err_spec=err,
        err2_spec=err2,
        error_precision=o.get("error_precision", "full"),
    )
    try:
        opt.validate()
    except ValueError as exc:
        raise ConfigError(f"bad optimizer: {exc}") from None
    return opt


def initial_model(config: RunConfig, problem) -> np.ndarray:
    if hasattr(problem, "init_params"):
        return problem.init_params(_rng.make_stream(config.run["seed"], 0, _rng.INIT))
    return np.zeros(problem.dim)


def run(config: RunConfig, out_path=None) -> list[RunRecord]:
    """Execute one training run; raises DivergenceError on NaN loss after
    writing a diagnostic record."""
    problem = build_problem(config)
    dim = problem.dim
    opt = build_optimizer(config, dim)
    seed = config.run["seed"]
    workers = config.run["workers"]
    steps = config.run["steps"]
    batch = config.run["batch_per_worker"]
    eval_every = config.run["eval_every"]

    ledger = CommLedger()
    trainer = Trainer(opt, dim, workers, seed, ledger,
                      x0=initial_model(config, problem))
    shards = shard_indices(problem.n_samples, workers)
    data = [_rng.make_stream(seed, w, _rng.DATA) for w in range(workers)]

    records: list[RunRecord] = []
    sink = open(out_path, "w", encoding="utf-8", newline="\n") if out_path else None
    try:
        if sink:
            sink.write(",".join(CSV_COLUMNS) + "\n")
            sink.flush()

        def emit(step: int) -> RunRecord:
            x = trainer.x
            loss = problem.loss(x)
            g = problem.full_gradient(x)
            rec = RunRecord(
                step=step,
                train_loss=loss,
                grad_norm_sq=float(g @ g),
                comm_bytes_cum=ledger.bytes_sent_total,
                aux_bytes=max(trainer.aux_memory_report()["per_worker_bytes"]),
                eval_metric=problem.eval_metric(x),
                rowspace_residual=(
                    problem.rowspace_residual(x - trainer.error_mean())
                    if isinstance(problem, LeastSquares)
                    else None
                ),
            )
            records.append(rec)
            if sink:
                sink.write(rec.to_csv_row() + "\n")
                sink.flush()
            if not math.isfinite(loss):
                raise DivergenceError(f"loss is not finite at step {step}")
            return rec

        emit(0)
        for t in range(1, steps + 1):
            grads = []
            for w in range(workers):
                shard = shards[w]
                pick = (data[w].uniforms(batch) * len(shard)).astype(np.int64)
                grads.append(problem.batch_gradient(trainer.states[w].x, shard[pick]))
            trainer.step(grads)
            if t % eval_every == 0 or t == steps:
                emit(t)
    finally:
        if sink:
            sink.close()
    return records


def run_summary(records: list[RunRecord], ledger_rep: dict | None = None) -> dict:
    last = records[-1]
    out = {
        "final_loss": last.train_loss,
        "final_grad_norm_sq": last.grad_norm_sq,
        "comm_bytes": last.comm_bytes_cum,
        "aux_bytes": last.aux_bytes,
    }
    if ledger_rep:
        out.update(ledger_rep)
    return out


_GRID_KEY = "grid"


def load_grid(path) -> tuple[RunConfig, dict]:
    """A grid file is a run config plus a [grid] table of dotted-path
    lists; cells are the cartesian product in key order."""
    from .config import _SCHEMA, parse_config  # noqa: F401

    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    grid = raw.pop(_GRID_KEY, {})
    if not isinstance(grid, dict):
        raise ConfigError("section 'grid' must be a table of lists")
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid key '{key}' must be a nonempty list")
    base = parse_config(raw)
    return base, grid


def sweep(base: RunConfig, grid: dict, out_dir) -> list[dict]:
    """Run every grid cell; failures are recorded and do not stop the sweep."""
    os.makedirs(out_dir, exist_ok=True)
    axes = sorted(grid)
    # no axes -> nothing to run, but the summary file still appears
    cells = list(itertools.product(*(grid[a] for a in axes))) if axes else []
    rows = []
    for i, values in enumerate(cells):
        overrides = dict(zip(axes, values))
        row = {"cell": i, **{a: v for a, v in overrides.items()}}
        csv_path = os.path.join(out_dir, f"cell_{i:04d}.csv")
        try:
            cfg = apply_dotted(base, overrides)
            records = run(cfg, out_path=csv_path)
            row.update(status="ok", **run_summary(records))
        except DivergenceError:
            row.update(status="diverged")
        except ConfigError as exc:
            row.update(status=f"config_error: {exc}")
        rows.append(row)
    _write_summary(rows, axes, os.path.join(out_dir, "summary.csv"))
    return rows


def _write_summary(rows: list[dict], axes: list[str], path) -> None:
    cols = ["cell", *axes, "status", "final_loss", "final_grad_norm_sq",
            "comm_bytes", "aux_bytes"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(
                ",".join("" if row.get(c) is None else str(row.get(c, "")) for c in cols)
                + "\n"
            )
