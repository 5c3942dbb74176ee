"""Experiment sweeps: build dataset, train and evaluate per (parameter,
replicate) cell, then aggregate mean +/- sd per parameter value.

Cells are independent and fully seeded (replicate r uses base_seed + r), so
the runner is resumable: completed cells are detected by their metrics.json
and skipped.  Failed cells are recorded and the sweep continues.  Setting
``MODISLAB_THREADS`` > 1 runs cells in parallel worker processes.
"""

from __future__ import annotations

import json
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .datasets import (
    GeneratorConfig,
    drop_modality_class,
    generate_paired,
    mask_labels,
    split_train_test,
    subsample_class,
    unpair,
)
from .errors import ConfigError
from .metrics import evaluate, write_metrics
from .trainer import TrainConfig, fit

KINDS = ("supervision_sweep", "imbalance_sweep", "label_fraction_sweep", "missing_pairs")

SUMMARY_METRICS = ("bacc", "nmi", "ari", "mse_diag", "mse_offdiag")


@dataclass
class ScenarioSpec:
    """One experiment grid: a scenario kind, its parameter list and replicates."""

    kind: str
    parameters: list
    generator: GeneratorConfig
    train: TrainConfig
    replicates: int = 1
    base_seed: int = 0
    test_ratio: float = 0.2
    target_class: int | None = None
    target_per_modality: int = 6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown scenario kind: {self.kind}; expected one of {KINDS}")
        if not self.parameters:
            raise ConfigError("scenario needs a non-empty parameter list")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSpec":
        allowed = {
            "kind", "parameters", "generator", "train", "replicates",
            "base_seed", "test_ratio", "target_class", "target_per_modality",
        }
        for key in data:
            if key not in allowed:
                raise ConfigError(f"unknown scenario config field: {key}")
        data = dict(data)
        data["generator"] = GeneratorConfig.from_dict(data["generator"])
        data["train"] = TrainConfig.from_dict(data.get("train", {}))
        return cls(**data)


def build_cell_datasets(spec: ScenarioSpec, parameter, seed: int):
    """Dataset triple (train, test, paired) for one scenario cell."""
    gen = replace(spec.generator, seed=seed)
    paired = generate_paired(gen)
    unpaired = unpair(paired, seed=seed)
    train, test = split_train_test(unpaired, spec.test_ratio, seed=seed)
    target = spec.target_class if spec.target_class is not None else spec.generator.n_classes

    if spec.kind == "supervision_sweep":
        train = mask_labels(train, fraction=float(parameter), seed=seed)
    elif spec.kind == "imbalance_sweep":
        train = subsample_class(train, target, int(parameter), seed=seed)
    elif spec.kind == "label_fraction_sweep":
        train = subsample_class(train, target, spec.target_per_modality, seed=seed)
        reference = [c for c in range(1, spec.generator.n_classes + 1) if c != target]
        train = mask_labels(train, fraction=float(parameter), seed=seed, classes=reference)
    elif spec.kind == "missing_pairs":
        pairs = [(int(c), int(m)) for c, m in parameter["pairs"]]
        train = drop_modality_class(train, pairs, keep_count=int(parameter.get("keep", 0)), seed=seed)
    return train, test, paired


def _cell_metrics(report) -> dict:
    mse = np.asarray(report.mse)
    off_diag = mse[~np.eye(mse.shape[0], dtype=bool)]
    return {
        "bacc": report.bacc,
        "nmi": report.nmi,
        "ari": report.ari,
        "mse_diag": float(np.mean(np.diag(mse))),
        "mse_offdiag": float(np.mean(off_diag)),
    }


def run_cell(spec: ScenarioSpec, param_index: int, rep: int, out_dir) -> dict:
    """Train and evaluate one (parameter, replicate) cell; returns its raw row."""
    parameter = spec.parameters[param_index]
    seed = spec.base_seed + rep
    cell_dir = Path(out_dir) / "cells" / f"param{param_index}_rep{rep}"
    done = cell_dir / "metrics.json"
    row = {"param_index": param_index, "parameter": json.dumps(parameter),
           "replicate": rep, "seed": seed, "status": "ok"}
    if done.exists():
        with open(done) as fh:
            metrics = json.load(fh)
        row.update({k: metrics[k] for k in SUMMARY_METRICS})
        return row
    try:
        train, test, paired = build_cell_datasets(spec, parameter, seed)
        cfg = replace(spec.train, seed=seed)
        model, _ = fit(train, cfg, out_dir=cell_dir)
        pair_ids = np.unique(np.concatenate(test.pair_ids))
        report = evaluate(model, test, paired.select(pair_ids[pair_ids >= 0]))
        write_metrics(report, cell_dir, model=model, test=test)
        metrics = _cell_metrics(report)
        with open(done, "r+") as fh:   # fold the scalar summary into metrics.json
            data = json.load(fh)
            data.update(metrics)
            fh.seek(0)
            json.dump(data, fh, indent=2)
            fh.write("\n")
            fh.truncate()
        row.update(metrics)
    except Exception as exc:  # record and continue with the remaining cells
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        (cell_dir / "error.txt").write_text(traceback.format_exc())
    return row


def _worker(args):
    spec_data, param_index, rep, out_dir = args
    return run_cell(ScenarioSpec.from_dict(spec_data), param_index, rep, out_dir)


def _spec_dict(spec: ScenarioSpec) -> dict:
    return {
        "kind": spec.kind, "parameters": spec.parameters,
        "generator": spec.generator.to_dict(), "train": spec.train.to_dict(),
        "replicates": spec.replicates, "base_seed": spec.base_seed,
        "test_ratio": spec.test_ratio, "target_class": spec.target_class,
        "target_per_modality": spec.target_per_modality,
    }


def run_scenario(spec: ScenarioSpec, out_dir) -> pd.DataFrame:
    """Run every (parameter, replicate) cell and write raw.csv / summary.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "scenario.json", "w") as fh:
        json.dump(_spec_dict(spec), fh, indent=2)
        fh.write("\n")

    cells = [(pi, rep) for pi in range(len(spec.parameters)) for rep in range(spec.replicates)]
    workers = int(os.environ.get("MODISLAB_THREADS", "1"))
    if workers > 1:
        args = [(_spec_dict(spec), pi, rep, str(out_dir)) for pi, rep in cells]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_worker, args))
    else:
        rows = [run_cell(spec, pi, rep, out_dir) for pi, rep in cells]

    raw = pd.DataFrame(rows)
    raw.to_csv(out_dir / "raw.csv", index=False)

    summary_rows = []
    for pi, parameter in enumerate(spec.parameters):
        ok = raw[(raw["param_index"] == pi) & (raw["status"] == "ok")]
        entry = {"param_index": pi, "parameter": json.dumps(parameter),
                 "n_ok": len(ok), "n_failed": spec.replicates - len(ok)}
        for metric in SUMMARY_METRICS:
            values = ok[metric].to_numpy(dtype=float) if len(ok) else np.array([])
            entry[f"{metric}_mean"] = float(values.mean()) if values.size else np.nan
            entry[f"{metric}_sd"] = float(values.std()) if values.size else np.nan
        summary_rows.append(entry)
    summary = pd.DataFrame(summary_rows)
    summary.to_csv(out_dir / "summary.csv", index=False)
    return summary
