"""Synthetic multi-modality dataset generation and training-set scenarios.

Generates paired multi-class tabular data with controllable class separation,
then derives the unpaired, partially labeled, imbalanced and missing-pair
training sets used by the experiment sweeps.  All operations are pure
functions of their inputs and a seed, so re-running any of them reproduces
byte-identical arrays.

On-disk format: one CSV per modality named ``modality_<index>.csv`` with
header ``sample_id,pair_id,class,f0..f{p-1}``; ``class`` -1 marks an
unlabeled record and ``pair_id`` -1 an unknown pairing.  A ``dataset.json``
manifest at the directory root records the class/modality counts, the seed
and the scenario provenance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from ._rng import derive_rng
from .errors import ConfigError, ShapeError, StratificationError

UNLABELED = -1
NO_PAIR = -1


@dataclass(frozen=True)
class GeneratorConfig:
    """Settings for the paired multi-class generator."""

    n_samples: int
    n_classes: int = 5
    modality_dims: tuple[int, ...] = (367, 131, 160)
    class_separation: float = 4.0
    latent_factor_dim: int = 8
    noise_sd: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modality_dims", tuple(int(p) for p in self.modality_dims))
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if not self.modality_dims or any(p < 1 for p in self.modality_dims):
            raise ConfigError("every modality dim must be >= 1")
        if self.class_separation < 0:
            raise ConfigError("class_separation must be non-negative")
        if self.latent_factor_dim < 1:
            raise ConfigError("latent_factor_dim must be >= 1")
        if self.noise_sd <= 0:
            raise ConfigError("noise_sd must be positive")

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_classes": self.n_classes,
            "modality_dims": list(self.modality_dims),
            "class_separation": self.class_separation,
            "latent_factor_dim": self.latent_factor_dim,
            "noise_sd": self.noise_sd,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        allowed = {
            "n_samples", "n_classes", "modality_dims", "class_separation",
            "latent_factor_dim", "noise_sd", "seed",
        }
        for key in data:
            if key not in allowed:
                raise ConfigError(f"unknown generator config field: {key}")
        return cls(**data)


@dataclass(frozen=True)
class PairedDataset:
    """Per-modality feature matrices whose row i is the same sample."""

    features: tuple[np.ndarray, ...]
    labels: np.ndarray        # (n,), values in 1..K
    pair_ids: np.ndarray      # (n,), identity of the underlying sample
    n_classes: int

    def __post_init__(self):
        n = len(self.labels)
        if any(x.shape[0] != n for x in self.features):
            raise ShapeError("all modalities must have the same row count")
        if n and (self.labels.min() < 1 or self.labels.max() > self.n_classes):
            raise ConfigError("labels must lie in 1..n_classes")

    @property
    def n_samples(self) -> int:
        return len(self.labels)

    @property
    def n_modalities(self) -> int:
        return len(self.features)

    @property
    def modality_dims(self) -> tuple[int, ...]:
        return tuple(x.shape[1] for x in self.features)

    def select(self, pair_ids) -> "PairedDataset":
        """Rows for the given pair ids, in the given order."""
        index = {int(p): i for i, p in enumerate(self.pair_ids)}
        rows = np.array([index[int(p)] for p in pair_ids], dtype=int)
        return PairedDataset(
            features=tuple(x[rows].copy() for x in self.features),
            labels=self.labels[rows].copy(),
            pair_ids=self.pair_ids[rows].copy(),
            n_classes=self.n_classes,
        )


@dataclass(frozen=True)
class UnpairedDataset:
    """Records (x, modality, class?, pair_id?) stored per modality.

    ``labels`` use -1 for unlabeled records; ``pair_ids`` use -1 when the
    pairing is unknown.  ``sample_ids`` are unique across the whole dataset.
    Pair ids are evaluation-only ground truth and are never read by training.
    """

    features: tuple[np.ndarray, ...]
    labels: tuple[np.ndarray, ...]
    pair_ids: tuple[np.ndarray, ...]
    sample_ids: tuple[np.ndarray, ...]
    n_classes: int

    @property
    def n_modalities(self) -> int:
        return len(self.features)

    @property
    def modality_dims(self) -> tuple[int, ...]:
        return tuple(x.shape[1] for x in self.features)

    @property
    def n_records(self) -> int:
        return sum(x.shape[0] for x in self.features)

    def counts(self, modality: int) -> int:
        return self.features[modality].shape[0]

    def cell_count(self, cls: int, modality: int) -> int:
        return int(np.sum(self.labels[modality] == cls))

    def labeled_count(self) -> int:
        return int(sum(np.sum(lab != UNLABELED) for lab in self.labels))

    def take(self, per_modality_rows) -> "UnpairedDataset":
        """New dataset keeping the given row indices of each modality."""
        return UnpairedDataset(
            features=tuple(self.features[m][rows].copy() for m, rows in enumerate(per_modality_rows)),
            labels=tuple(self.labels[m][rows].copy() for m, rows in enumerate(per_modality_rows)),
            pair_ids=tuple(self.pair_ids[m][rows].copy() for m, rows in enumerate(per_modality_rows)),
            sample_ids=tuple(self.sample_ids[m][rows].copy() for m, rows in enumerate(per_modality_rows)),
            n_classes=self.n_classes,
        )

    def with_labels(self, new_labels) -> "UnpairedDataset":
        return UnpairedDataset(
            features=self.features,
            labels=tuple(np.asarray(l).copy() for l in new_labels),
            pair_ids=self.pair_ids,
            sample_ids=self.sample_ids,
            n_classes=self.n_classes,
        )


def generate_paired(config: GeneratorConfig) -> PairedDataset:
    """Draw a paired multi-class dataset from the class-factor model.

    Per class a latent factor center is fixed (random directions rescaled so
    the minimum pairwise distance equals ``class_separation``).  Sample i
    gets a factor ``center[class_i] + shared_i`` with the shared perturbation
    common to all modalities, and modality m observes an affine map of that
    factor plus independent feature noise of sd ``noise_sd``.
    """
    rng = derive_rng(config.seed, "generate")
    n, K, q = config.n_samples, config.n_classes, config.latent_factor_dim

    raw = rng.standard_normal((K, q))
    if config.class_separation > 0:
        dists = [np.linalg.norm(raw[i] - raw[j]) for i in range(K) for j in range(i + 1, K)]
        centers = raw * (config.class_separation / max(min(dists), 1e-12))
    else:
        centers = np.zeros((K, q))

    labels = (np.arange(n) % K) + 1
    shared = rng.standard_normal((n, q)) * config.noise_sd
    factors = centers[labels - 1] + shared

    features = []
    for p in config.modality_dims:
        lin_map = rng.standard_normal((q, p)) / np.sqrt(q)
        offset = rng.standard_normal(p) * 0.25
        noise = rng.standard_normal((n, p)) * config.noise_sd
        features.append(factors @ lin_map + offset + noise)

    return PairedDataset(
        features=tuple(features),
        labels=labels,
        pair_ids=np.arange(n),
        n_classes=K,
    )


def unpair(paired: PairedDataset, seed: int = 0) -> UnpairedDataset:
    """Keep each sample in exactly one modality, stratified by class.

    Assignment is uniform over modalities within each class, so every
    (class, modality) cell count differs by at most one from n/(K*M).
    """
    if paired.n_samples == 0:
        raise ConfigError("paired dataset is empty")
    M = paired.n_modalities
    chosen = [[] for _ in range(M)]
    for cls in range(1, paired.n_classes + 1):
        rows = np.flatnonzero(paired.labels == cls)
        rng = derive_rng(seed, "unpair", cls)
        perm = rng.permutation(rows)
        base, extra = divmod(len(perm), M)
        start = 0
        for m in range(M):
            size = base + (1 if m < extra else 0)
            chosen[m].append(perm[start:start + size])
            start += size
    rows_per_modality = [np.sort(np.concatenate(c)) if c else np.array([], dtype=int) for c in chosen]
    return UnpairedDataset(
        features=tuple(paired.features[m][rows].copy() for m, rows in enumerate(rows_per_modality)),
        labels=tuple(paired.labels[rows].copy() for rows in rows_per_modality),
        pair_ids=tuple(paired.pair_ids[rows].copy() for rows in rows_per_modality),
        sample_ids=tuple(paired.pair_ids[rows].copy() for rows in rows_per_modality),
        n_classes=paired.n_classes,
    )


def _strata(ds: UnpairedDataset, modality: int):
    """Row indices grouped by label value (including the unlabeled marker)."""
    out = {}
    for value in np.unique(ds.labels[modality]):
        out[int(value)] = np.flatnonzero(ds.labels[modality] == value)
    return out


def split_train_test(ds: UnpairedDataset, test_ratio: float, seed: int = 0):
    """Stratified train/test split by (class, modality).

    The test count per stratum is floor(cell_size * test_ratio); the
    remainder stays in train.  Returns ``(train, test)``.
    """
    if not 0 < test_ratio < 1:
        raise ConfigError("test_ratio must lie strictly between 0 and 1")
    train_rows, test_rows = [], []
    for m in range(ds.n_modalities):
        tr, te = [], []
        for cls, rows in _strata(ds, m).items():
            if len(rows) < 2:
                raise StratificationError(
                    f"stratum (class={cls}, modality={m}) has {len(rows)} record(s); need at least 2"
                )
            rng = derive_rng(seed, "split", m, cls)
            perm = rng.permutation(rows)
            n_test = int(np.floor(len(rows) * test_ratio))
            te.append(perm[:n_test])
            tr.append(perm[n_test:])
        train_rows.append(np.sort(np.concatenate(tr)))
        test_rows.append(np.sort(np.concatenate(te)))
    return ds.take(train_rows), ds.take(test_rows)


def mask_labels(
    ds: UnpairedDataset,
    fraction: float | None = None,
    per_pair_count: int | None = None,
    seed: int = 0,
    classes=None,
) -> UnpairedDataset:
    """Remove class labels, stratified by (class, modality).

    Exactly one of ``fraction`` / ``per_pair_count`` must be given.  With
    ``fraction`` f, floor(cell_size * f) records keep their label in every
    cell; with ``per_pair_count`` q, exactly q labeled records remain per
    (class, modality) cell.  ``classes`` optionally restricts masking to the
    listed classes, leaving all other labels untouched.  Features and pair
    ids are never modified.
    """
    if (fraction is None) == (per_pair_count is None):
        raise ConfigError("give exactly one of fraction / per_pair_count")
    if fraction is not None and not 0 <= fraction <= 1:
        raise ConfigError("fraction must lie in [0, 1]")
    if per_pair_count is not None and per_pair_count < 0:
        raise ConfigError("per_pair_count must be >= 0")
    scope = None if classes is None else {int(c) for c in classes}

    new_labels = []
    for m in range(ds.n_modalities):
        labels = ds.labels[m].copy()
        for cls, rows in _strata(ds, m).items():
            if cls == UNLABELED or (scope is not None and cls not in scope):
                continue
            if fraction is not None:
                keep = int(np.floor(len(rows) * fraction))
            else:
                keep = int(per_pair_count)
                if keep > len(rows):
                    raise ConfigError(
                        f"per_pair_count={keep} exceeds cell (class={cls}, modality={m}) size {len(rows)}"
                    )
            rng = derive_rng(seed, "mask", m, cls)
            perm = rng.permutation(rows)
            labels[perm[keep:]] = UNLABELED
        new_labels.append(labels)
    return ds.with_labels(new_labels)


def subsample_class(
    ds: UnpairedDataset, target_class: int, per_modality_count: int, seed: int = 0
) -> UnpairedDataset:
    """Reduce one class to exactly ``per_modality_count`` records per modality."""
    if per_modality_count < 0:
        raise ConfigError("per_modality_count must be >= 0")
    keep_rows = []
    for m in range(ds.n_modalities):
        rows = np.flatnonzero(ds.labels[m] == target_class)
        if per_modality_count > len(rows):
            raise ConfigError(
                f"per_modality_count={per_modality_count} exceeds cell "
                f"(class={target_class}, modality={m}) size {len(rows)}"
            )
        rng = derive_rng(seed, "subsample", m)
        drop = set(rng.permutation(rows)[per_modality_count:].tolist())
        mask = np.ones(ds.counts(m), dtype=bool)
        mask[list(drop)] = False
        keep_rows.append(np.flatnonzero(mask))
    return ds.take(keep_rows)


def drop_modality_class(
    ds: UnpairedDataset, pairs, keep_count: int = 0, seed: int = 0
) -> UnpairedDataset:
    """Reduce each listed (class, modality) cell to exactly ``keep_count`` records."""
    if keep_count < 0:
        raise ConfigError("keep_count must be >= 0")
    masks = [np.ones(ds.counts(m), dtype=bool) for m in range(ds.n_modalities)]
    for cls, m in pairs:
        rows = np.flatnonzero(ds.labels[m] == cls)
        if keep_count > len(rows):
            raise ConfigError(
                f"keep_count={keep_count} exceeds cell (class={cls}, modality={m}) size {len(rows)}"
            )
        rng = derive_rng(seed, "drop", m, cls)
        drop = rng.permutation(rows)[keep_count:]
        masks[m][drop] = False
    return ds.take([np.flatnonzero(mask) for mask in masks])


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

def _frame(features, labels, pair_ids, sample_ids) -> pd.DataFrame:
    p = features.shape[1]
    data = {"sample_id": sample_ids, "pair_id": pair_ids, "class": labels}
    frame = pd.DataFrame(data)
    cols = pd.DataFrame(features, columns=[f"f{i}" for i in range(p)])
    return pd.concat([frame, cols], axis=1)


def save_unpaired(ds: UnpairedDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for m in range(ds.n_modalities):
        frame = _frame(ds.features[m], ds.labels[m], ds.pair_ids[m], ds.sample_ids[m])
        frame.to_csv(directory / f"modality_{m}.csv", index=False)


def save_paired(paired: PairedDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for m in range(paired.n_modalities):
        frame = _frame(paired.features[m], paired.labels, paired.pair_ids, paired.pair_ids)
        frame.to_csv(directory / f"modality_{m}.csv", index=False)


def _modality_files(directory):
    directory = Path(directory)
    files = sorted(directory.glob("modality_*.csv"), key=lambda f: int(f.stem.split("_")[1]))
    if not files:
        raise ConfigError(f"no modality_<index>.csv files in {directory}")
    return files


def load_unpaired(directory, n_classes: int) -> UnpairedDataset:
    features, labels, pair_ids, sample_ids = [], [], [], []
    for path in _modality_files(directory):
        frame = pd.read_csv(path, float_precision="round_trip")
        feat_cols = [c for c in frame.columns if c.startswith("f")]
        features.append(frame[feat_cols].to_numpy(dtype=np.float64))
        labels.append(frame["class"].to_numpy(dtype=np.int64))
        pair_ids.append(frame["pair_id"].to_numpy(dtype=np.int64))
        sample_ids.append(frame["sample_id"].to_numpy(dtype=np.int64))
    return UnpairedDataset(
        features=tuple(features), labels=tuple(labels),
        pair_ids=tuple(pair_ids), sample_ids=tuple(sample_ids),
        n_classes=n_classes,
    )


def load_paired(directory, n_classes: int) -> PairedDataset:
    features, labels, pair_ids = [], None, None
    for path in _modality_files(directory):
        frame = pd.read_csv(path, float_precision="round_trip").sort_values("pair_id")
        feat_cols = [c for c in frame.columns if c.startswith("f")]
        features.append(frame[feat_cols].to_numpy(dtype=np.float64))
        ids = frame["pair_id"].to_numpy(dtype=np.int64)
        labs = frame["class"].to_numpy(dtype=np.int64)
        if pair_ids is None:
            pair_ids, labels = ids, labs
        elif not (np.array_equal(pair_ids, ids) and np.array_equal(labels, labs)):
            raise ConfigError(f"paired modalities disagree on pair ids or labels ({path})")
    return PairedDataset(
        features=tuple(features), labels=labels, pair_ids=pair_ids, n_classes=n_classes
    )


def write_dataset_dir(out_dir, manifest: dict, paired=None, train=None, test=None) -> None:
    """Standard dataset directory: dataset.json plus paired/train/test subdirs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if paired is not None:
        save_paired(paired, out_dir / "paired")
    if train is not None:
        save_unpaired(train, out_dir / "train")
    if test is not None:
        save_unpaired(test, out_dir / "test")
    with open(out_dir / "dataset.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_dataset_dir(directory):
    """Returns (manifest, paired, train, test); missing parts are None."""
    directory = Path(directory)
    with open(directory / "dataset.json") as fh:
        manifest = json.load(fh)
    K = int(manifest["n_classes"])
    paired = load_paired(directory / "paired", K) if (directory / "paired").is_dir() else None
    train = load_unpaired(directory / "train", K) if (directory / "train").is_dir() else None
    test = load_unpaired(directory / "test", K) if (directory / "test").is_dir() else None
    return manifest, paired, train, test
