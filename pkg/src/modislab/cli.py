"""Command-line entry point.

Subcommands: simulate | preprocess | train | evaluate | gridsearch |
scenario | plot.  Every subcommand reads one JSON config document, writes
under ``--out`` and takes all randomness from explicit seeds, so reruns with
identical inputs produce identical outputs.  Exit codes: 0 success, 2
configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import datasets as dsmod
from .datasets import GeneratorConfig
from .errors import ConfigError, NumericalError
from .model import load_checkpoint
from .trainer import TrainConfig, fit, grid_search_cv

SIMULATE_FIELDS = {
    "n_samples", "n_classes", "modality_dims", "class_separation",
    "latent_factor_dim", "noise_sd", "seed", "test_ratio",
    "mask_labels", "subsample_class", "drop_pairs",
}


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")


def cmd_simulate(args) -> int:
    config = _load_json(args.config)
    for key in config:
        if key not in SIMULATE_FIELDS:
            raise ConfigError(f"unknown simulate config field: {key}")
    if args.seed is not None:
        config["seed"] = args.seed
    test_ratio = config.pop("test_ratio", 0.2)
    mask_spec = config.pop("mask_labels", None)
    subsample_spec = config.pop("subsample_class", None)
    drop_spec = config.pop("drop_pairs", None)

    gen = GeneratorConfig.from_dict(config)
    paired = dsmod.generate_paired(gen)
    unpaired = dsmod.unpair(paired, seed=gen.seed)
    train, test = dsmod.split_train_test(unpaired, test_ratio, seed=gen.seed)

    provenance = [{"op": "generate_paired", **gen.to_dict()},
                  {"op": "unpair"}, {"op": "split_train_test", "test_ratio": test_ratio}]
    if mask_spec is not None:
        train = dsmod.mask_labels(
            train,
            fraction=mask_spec.get("fraction"),
            per_pair_count=mask_spec.get("per_pair_count"),
            seed=gen.seed,
            classes=mask_spec.get("classes"),
        )
        provenance.append({"op": "mask_labels", **mask_spec})
    if subsample_spec is not None:
        train = dsmod.subsample_class(
            train, int(subsample_spec["target_class"]),
            int(subsample_spec["per_modality_count"]), seed=gen.seed,
        )
        provenance.append({"op": "subsample_class", **subsample_spec})
    if drop_spec is not None:
        pairs = [(int(c), int(m)) for c, m in drop_spec["pairs"]]
        train = dsmod.drop_modality_class(
            train, pairs, keep_count=int(drop_spec.get("keep_count", 0)), seed=gen.seed)
        provenance.append({"op": "drop_modality_class", **drop_spec})

    manifest = {
        "n_classes": gen.n_classes,
        "n_modalities": len(gen.modality_dims),
        "modality_dims": list(gen.modality_dims),
        "seed": gen.seed,
        "provenance": provenance,
    }
    dsmod.write_dataset_dir(args.out, manifest, paired=paired, train=train, test=test)
    print(f"dataset written to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_dict(_load_json(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    _, _, train, _ = _load_data(args.data, need_train=True)
    model, history = fit(train, cfg, out_dir=args.out, resume=args.resume)
    print(f"trained {cfg.epochs} epochs; {len(history)} loss reports; "
          f"checkpoint at {Path(args.out) / 'ckpt' / 'final'}")
    return 0


def _load_data(directory, need_train=False, need_test=False):
    directory = Path(directory)
    if not (directory / "dataset.json").exists():
        raise ConfigError(f"no dataset.json in {directory}")
    manifest, paired, train, test = dsmod.load_dataset_dir(directory)
    if need_train and train is None:
        raise ConfigError(f"{directory} has no train/ split")
    if need_test and test is None:
        raise ConfigError(f"{directory} has no test/ split")
    return manifest, paired, train, test


def cmd_evaluate(args) -> int:
    from .metrics import evaluate, write_metrics

    _, paired, _, test = _load_data(args.data, need_test=True)
    model, _ = load_checkpoint(args.model)
    paired_test = None
    if paired is not None:
        pair_ids = np.unique(np.concatenate(test.pair_ids))
        pair_ids = pair_ids[pair_ids >= 0]
        if pair_ids.size:
            paired_test = paired.select(pair_ids)
    report = evaluate(model, test, paired_test)
    write_metrics(report, args.out, model=model, test=test)
    print(f"bacc={report.bacc:.4f} nmi={report.nmi:.4f} ari={report.ari:.4f} -> {args.out}")
    return 0


def cmd_gridsearch(args) -> int:
    config = _load_json(args.config)
    allowed = {"grid", "k", "train"}
    for key in config:
        if key not in allowed:
            raise ConfigError(f"unknown gridsearch config field: {key}")
    base = TrainConfig.from_dict(config.get("train", {}))
    if args.seed is not None:
        base = replace(base, seed=args.seed)
    _, _, train, _ = _load_data(args.data, need_train=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = grid_search_cv(train, config["grid"], base, k=int(config.get("k", 5)),
                          out_csv=out / "grid_results.csv")
    best = rows[0]
    print(f"best point: { {k: v for k, v in best.items() if k not in ('fold_bacc', 'fold_mse')} }")
    return 0


def cmd_scenario(args) -> int:
    from .scenarios import ScenarioSpec, run_scenario

    spec = ScenarioSpec.from_dict(_load_json(args.config))
    if args.seed is not None:
        spec.base_seed = args.seed
    summary = run_scenario(spec, args.out)
    print(summary.to_string(index=False))
    return 0


def cmd_preprocess(args) -> int:
    from . import preprocess as pp
    import pandas as pd

    config = _load_json(args.config)
    allowed = {"kind", "steps"}
    for key in config:
        if key not in allowed:
            raise ConfigError(f"unknown preprocess config field: {key}")
    frame = pd.read_csv(args.input, index_col=0, float_precision="round_trip")
    matrix = pp.FeatureMatrix(
        frame.to_numpy(dtype=float),
        tuple(str(r) for r in frame.index),
        tuple(str(c) for c in frame.columns),
        config.get("kind", "continuous"),
    )
    ops = {
        "filter_methylation": pp.filter_methylation,
        "impute_mean": pp.impute_mean,
        "beta_to_m": pp.beta_to_m,
        "filter_counts": pp.filter_counts,
        "log2p1": pp.log2p1,
    }
    meta = {}
    for step in config.get("steps", []):
        step = dict(step)
        op = step.pop("op", None)
        if op == "median_of_ratios":
            matrix, size_factors = pp.median_of_ratios(matrix)
            meta["size_factors"] = list(map(float, size_factors))
        elif op == "standardize_pca":
            scores, explained = pp.standardize_pca(matrix, int(step["n_components"]))
            meta["explained_variance_fraction"] = explained
            matrix = pp.FeatureMatrix(
                scores, matrix.row_ids,
                tuple(f"pc{i}" for i in range(scores.shape[1])), "continuous")
        elif op in ops:
            matrix = ops[op](matrix, **step)
        else:
            raise ConfigError(f"unknown preprocess op: {op}")
    out = pd.DataFrame(matrix.values, index=list(matrix.row_ids), columns=list(matrix.col_ids))
    out.to_csv(args.out)
    if meta:
        with open(str(args.out) + ".meta.json", "w") as fh:
            json.dump(meta, fh, indent=2)
            fh.write("\n")
    print(f"preprocessed matrix {matrix.shape} -> {args.out}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import pandas as pd

    results = Path(args.results)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    made = []

    latent = results / "latent2d.csv"
    if latent.exists():
        frame = pd.read_csv(latent)
        fig, axes = plt.subplots(1, 2, figsize=(11, 5))
        for ax, hue in zip(axes, ("class", "modality")):
            for value in sorted(frame[hue].unique()):
                sel = frame[frame[hue] == value]
                ax.scatter(sel["pc1"], sel["pc2"], s=6, alpha=0.6, label=f"{hue} {value}")
            ax.set_xlabel("PC1")
            ax.set_ylabel("PC2")
            ax.legend(fontsize=7)
            ax.set_title(f"latent embedding by {hue}")
        fig.tight_layout()
        fig.savefig(out / "latent2d.png", dpi=130)
        plt.close(fig)
        made.append("latent2d.png")

    for name in ("mse_matrix", "confusion_overall"):
        path = results / f"{name}.csv"
        if path.exists():
            frame = pd.read_csv(path, index_col=0)
            fig, ax = plt.subplots(figsize=(5.5, 4.5))
            im = ax.imshow(frame.to_numpy(dtype=float), cmap="viridis")
            ax.set_xticks(range(len(frame.columns)), frame.columns, rotation=45, ha="right")
            ax.set_yticks(range(len(frame.index)), frame.index)
            for (i, j), value in np.ndenumerate(frame.to_numpy(dtype=float)):
                ax.text(j, i, f"{value:.2f}", ha="center", va="center", fontsize=7, color="w")
            fig.colorbar(im)
            ax.set_title(name.replace("_", " "))
            fig.tight_layout()
            fig.savefig(out / f"{name}.png", dpi=130)
            plt.close(fig)
            made.append(f"{name}.png")

    summary = results / "summary.csv"
    if summary.exists():
        frame = pd.read_csv(summary)
        fig, ax = plt.subplots(figsize=(6.5, 4.5))
        x = np.arange(len(frame))
        for metric in ("bacc", "nmi", "ari"):
            if f"{metric}_mean" in frame:
                ax.errorbar(x, frame[f"{metric}_mean"], yerr=frame[f"{metric}_sd"],
                            marker="o", capsize=3, label=metric)
        ax.set_xticks(x, frame["parameter"], rotation=30, ha="right", fontsize=7)
        ax.set_xlabel("parameter")
        ax.set_ylabel("score")
        ax.legend()
        ax.set_title("scenario summary")
        fig.tight_layout()
        fig.savefig(out / "summary.png", dpi=130)
        plt.close(fig)
        made.append("summary.png")

    if not made:
        raise ConfigError(f"nothing to plot in {results}")
    print(f"wrote {', '.join(made)} to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modislab",
        description="Coupled multi-modality VAEs with adversarial latent alignment: "
                    "simulate, preprocess, train, evaluate, sweep and plot.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("preprocess", help="chain matrix transforms over a CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compute metrics for a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gridsearch", help="grid search with k-fold cross-validation")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("scenario", help="run an experiment sweep with replicates")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("plot", help="render figures from persisted CSV/JSON results")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if exc.report is not None:
            print(json.dumps(exc.report, indent=2), file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
