"""Evaluation: class prediction, clustering agreement, reconstruction and
translation error against hidden pairings, confusion matrices and 2-D latent
projections.

All operations are read-only over frozen model weights.  Class prediction
runs each record through its own modality encoder (mu path) and takes the
argmax of the class logits, with ties broken toward the smallest class index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

from .datasets import PairedDataset, UnpairedDataset
from .errors import ConfigError
from .model import ModisModel


def predict_class(model: ModisModel, ds: UnpairedDataset) -> list[np.ndarray]:
    """Predicted labels (1..K) per modality, deterministic via the mu path."""
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for m in range(ds.n_modalities):
            if ds.counts(m) == 0:
                out.append(np.zeros(0, dtype=np.int64))
                continue
            x = torch.as_tensor(ds.features[m], dtype=dtype)
            _, class_logits, _ = model.discriminate(model.encode(m, x).mu)
            logits = class_logits.cpu().numpy()
            out.append(np.argmax(logits, axis=1).astype(np.int64) + 1)
    return out


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean recall over the classes present in ``y_true``."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0 or y_true.shape != y_pred.shape:
        raise ConfigError("balanced_accuracy needs non-empty, equal-length labelings")
    recalls = [np.mean(y_pred[y_true == cls] == cls) for cls in np.unique(y_true)]
    return float(np.mean(recalls))


def nmi(y_true, y_pred) -> float:
    """Normalized mutual information (arithmetic-mean normalization)."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0 or y_true.shape != y_pred.shape:
        raise ConfigError("nmi needs non-empty, equal-length labelings")
    return float(normalized_mutual_info_score(y_true, y_pred, average_method="arithmetic"))


def ari(y_true, y_pred) -> float:
    """Adjusted Rand index."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0 or y_true.shape != y_pred.shape:
        raise ConfigError("ari needs non-empty, equal-length labelings")
    return float(adjusted_rand_score(y_true, y_pred))


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """K x K counts with rows = true class, columns = predicted class."""
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(np.asarray(y_true), np.asarray(y_pred)):
        counts[int(t) - 1, int(p) - 1] += 1
    return counts


def mse_matrix(model: ModisModel, paired_test: PairedDataset):
    """Reconstruction/translation error against the paired ground truth.

    Entry (m, m') is the mean over test samples of the per-feature squared
    error of decoding modality-m inputs with the modality-m' decoder; the
    diagonal is reconstruction.  The baseline per target modality is the mean
    per-feature squared distance over all distinct sample pairs within that
    modality, computed through the exact dispersion identity
    mean_{i != j} ||x_i - x_j||^2 = 2/(n-1) * sum_i ||x_i - x_bar||^2.
    Returns ``(mse, baseline)``.
    """
    if paired_test.n_samples < 2:
        raise ConfigError("mse_matrix needs at least two paired test samples")
    M = paired_test.n_modalities
    dtype = next(model.parameters()).dtype
    mse = np.zeros((M, M))
    with torch.no_grad():
        for src in range(M):
            x = torch.as_tensor(paired_test.features[src], dtype=dtype)
            mu = model.encode(src, x).mu
            for dst in range(M):
                truth = torch.as_tensor(paired_test.features[dst], dtype=dtype)
                pred = model.decode(dst, mu)
                mse[src, dst] = float(((pred - truth) ** 2).mean())
    baseline = np.zeros(M)
    for m in range(M):
        x = paired_test.features[m]
        n, p = x.shape
        centered = x - x.mean(axis=0)
        baseline[m] = 2.0 * float((centered**2).sum()) / ((n - 1) * p)
    return mse, baseline


def latent_projection(model: ModisModel, ds: UnpairedDataset):
    """Top-2 PCA of the pooled mu embeddings; returns (coords, var fractions)."""
    dtype = next(model.parameters()).dtype
    embeddings = []
    with torch.no_grad():
        for m in range(ds.n_modalities):
            if ds.counts(m) == 0:
                continue
            x = torch.as_tensor(ds.features[m], dtype=dtype)
            embeddings.append(model.encode(m, x).mu.cpu().numpy())
    pooled = np.concatenate(embeddings, axis=0).astype(np.float64)
    if pooled.shape[0] < 3:
        raise ConfigError("latent_projection needs at least 3 records")
    centered = pooled - pooled.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    for j in range(min(2, vt.shape[0])):
        i = np.argmax(np.abs(vt[j]))
        if vt[j, i] < 0:
            vt[j] = -vt[j]
            u[:, j] = -u[:, j]
    k = min(2, s.size)
    coords = np.zeros((pooled.shape[0], 2))
    coords[:, :k] = u[:, :k] * s[:k]
    total = float(np.sum(s**2))
    fractions = np.zeros(2)
    if total > 0:
        fractions[:k] = (s[:k] ** 2) / total
    return coords, fractions


@dataclass
class MetricsReport:
    """All reported evaluation metrics for one trained model."""

    bacc: float
    nmi: float
    ari: float
    confusion_overall: np.ndarray                 # (K, K)
    confusion_per_modality: list[np.ndarray]      # M x (K, K)
    cell_counts: np.ndarray                       # (K, M) test records per cell
    cell_recall: np.ndarray                       # (K, M), NaN for empty cells
    mse: np.ndarray | None = None                 # (M, M)
    mse_baseline: np.ndarray | None = None        # (M,)

    def to_dict(self) -> dict:
        out = {
            "bacc": self.bacc,
            "nmi": self.nmi,
            "ari": self.ari,
            "confusion_overall": self.confusion_overall.tolist(),
            "confusion_per_modality": [c.tolist() for c in self.confusion_per_modality],
            "cell_counts": self.cell_counts.tolist(),
            "cell_recall": [[None if np.isnan(v) else v for v in row] for row in self.cell_recall],
            "mse": None if self.mse is None else self.mse.tolist(),
            "mse_baseline": None if self.mse_baseline is None else self.mse_baseline.tolist(),
        }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def evaluate(model: ModisModel, test: UnpairedDataset,
             paired_test: PairedDataset | None = None) -> MetricsReport:
    """Full metric sweep on a test set (labels required on every record)."""
    K, M = test.n_classes, test.n_modalities
    pooled_true = np.concatenate(test.labels)
    if (pooled_true < 1).any():
        raise ConfigError("evaluation requires a fully labeled test set")
    preds = predict_class(model, test)
    pooled_pred = np.concatenate(preds)

    per_modality = [confusion_matrix(test.labels[m], preds[m], K) for m in range(M)]
    overall = np.sum(per_modality, axis=0)
    counts = np.zeros((K, M), dtype=np.int64)
    recall = np.full((K, M), np.nan)
    for m in range(M):
        for cls in range(1, K + 1):
            cell = test.labels[m] == cls
            counts[cls - 1, m] = int(cell.sum())
            if counts[cls - 1, m]:
                recall[cls - 1, m] = float(np.mean(preds[m][cell] == cls))

    mse = baseline = None
    if paired_test is not None:
        mse, baseline = mse_matrix(model, paired_test)

    return MetricsReport(
        bacc=balanced_accuracy(pooled_true, pooled_pred),
        nmi=nmi(pooled_true, pooled_pred),
        ari=ari(pooled_true, pooled_pred),
        confusion_overall=overall,
        confusion_per_modality=per_modality,
        cell_counts=counts,
        cell_recall=recall,
        mse=mse,
        mse_baseline=baseline,
    )


def write_metrics(report: MetricsReport, out_dir, model=None, test=None) -> None:
    """Persist metrics.json plus the CSV exports (confusions, MSE, latent 2-D)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(report.to_json())

    K = report.confusion_overall.shape[0]
    cols = [f"pred_{c}" for c in range(1, K + 1)]
    idx = [f"true_{c}" for c in range(1, K + 1)]
    pd.DataFrame(report.confusion_overall, index=idx, columns=cols).to_csv(
        out_dir / "confusion_overall.csv")
    for m, conf in enumerate(report.confusion_per_modality):
        pd.DataFrame(conf, index=idx, columns=cols).to_csv(out_dir / f"confusion_{m}.csv")

    if report.mse is not None:
        M = report.mse.shape[0]
        tgt = [f"target_{m}" for m in range(M)]
        frame = pd.DataFrame(report.mse, index=[f"source_{m}" for m in range(M)], columns=tgt)
        frame.loc["baseline"] = report.mse_baseline
        frame.to_csv(out_dir / "mse_matrix.csv")

    if model is not None and test is not None:
        coords, fractions = latent_projection(model, test)
        rows = []
        offset = 0
        for m in range(test.n_modalities):
            n_m = test.counts(m)
            for i in range(n_m):
                rows.append({
                    "sample_id": int(test.sample_ids[m][i]),
                    "modality": m,
                    "class": int(test.labels[m][i]),
                    "pc1": coords[offset + i, 0],
                    "pc2": coords[offset + i, 1],
                })
            offset += n_m
        pd.DataFrame(rows).to_csv(out_dir / "latent2d.csv", index=False)
        with open(out_dir / "latent2d.json", "w") as fh:
            json.dump({"explained_variance_fraction": fractions.tolist()}, fh, indent=2)
            fh.write("\n")
