"""Generic matrix transforms for omics-style preprocessing.

Implements the methylation/count preprocessing recipe as standalone
transforms over a ``FeatureMatrix`` (samples x features, NaN = missing):
variance/missingness filtering, mean imputation, the beta-to-M logit
transform, median-of-ratios count normalization, log2(x+1) and a
standardize-then-PCA reduction.  Transforms are pure and reentrant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

KINDS = ("beta_values", "counts", "continuous")

BETA_CLAMP = 1e-6


@dataclass(frozen=True)
class FeatureMatrix:
    """n x p value matrix with row/column ids and a declared kind."""

    values: np.ndarray
    row_ids: tuple[str, ...]
    col_ids: tuple[str, ...]
    kind: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "row_ids", tuple(str(r) for r in self.row_ids))
        object.__setattr__(self, "col_ids", tuple(str(c) for c in self.col_ids))
        if values.ndim != 2:
            raise ConfigError("values must be a 2-D matrix")
        if values.shape != (len(self.row_ids), len(self.col_ids)):
            raise ConfigError("row/column id counts do not match the value matrix")
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}")
        present = values[~np.isnan(values)]
        if self.kind == "beta_values" and present.size and (present.min() < 0 or present.max() > 1):
            raise ConfigError("beta values must lie in [0, 1] where present")
        if self.kind == "counts" and present.size and present.min() < 0:
            raise ConfigError("counts must be non-negative where present")

    @property
    def shape(self):
        return self.values.shape

    def with_values(self, values, kind=None, col_keep=None) -> "FeatureMatrix":
        col_ids = self.col_ids if col_keep is None else tuple(self.col_ids[j] for j in col_keep)
        return FeatureMatrix(values, self.row_ids, col_ids, kind or self.kind)


def _require_kind(m: FeatureMatrix, kind: str, op: str) -> None:
    if m.kind != kind:
        raise ConfigError(f"{op} expects kind={kind!r}, got {m.kind!r}")


def filter_methylation(
    m: FeatureMatrix, max_missing_frac: float = 0.2, min_sd: float = 0.1
) -> FeatureMatrix:
    """Drop beta-value columns with too many missing-or-zero entries or low sd.

    A column is dropped when its missing-or-zero fraction is >= ``max_missing_frac``
    or its standard deviation over non-missing entries (population sd, ddof=0)
    is strictly below ``min_sd``.
    """
    _require_kind(m, "beta_values", "filter_methylation")
    values = m.values
    n = values.shape[0]
    missing_or_zero = np.isnan(values) | (values == 0)
    frac = missing_or_zero.sum(axis=0) / n
    with np.errstate(invalid="ignore"):
        sd = np.nanstd(values, axis=0)
    low_sd = np.where(np.isnan(sd), False, sd < min_sd)
    keep = np.flatnonzero(~((frac >= max_missing_frac) | low_sd))
    if keep.size == 0:
        raise ConfigError("filter_methylation dropped every column")
    return m.with_values(values[:, keep], col_keep=keep)


def impute_mean(m: FeatureMatrix) -> FeatureMatrix:
    """Replace each missing entry by the mean of its column's non-missing entries."""
    values = m.values.copy()
    missing = np.isnan(values)
    if not missing.any():
        return m.with_values(values)
    fully_missing = np.flatnonzero(missing.all(axis=0))
    if fully_missing.size:
        raise ConfigError(f"column {m.col_ids[fully_missing[0]]!r} is fully missing; cannot impute")
    col_mean = np.nanmean(m.values, axis=0)
    rows, cols = np.nonzero(missing)
    values[rows, cols] = col_mean[cols]
    return m.with_values(values)


def beta_to_m(m: FeatureMatrix) -> FeatureMatrix:
    """Entrywise logit-in-base-2: M = log2(beta / (1 - beta)).

    Betas are clamped to [1e-6, 1 - 1e-6] first so boundary values stay finite.
    """
    _require_kind(m, "beta_values", "beta_to_m")
    beta = np.clip(m.values, BETA_CLAMP, 1 - BETA_CLAMP)
    beta = np.where(np.isnan(m.values), np.nan, beta)
    return m.with_values(np.log2(beta / (1 - beta)), kind="continuous")


def filter_counts(
    m: FeatureMatrix, min_count: float = 5, max_missing_frac: float = 0.9
) -> FeatureMatrix:
    """Drop count columns whose missing-or-below-min fraction is >= ``max_missing_frac``."""
    _require_kind(m, "counts", "filter_counts")
    values = m.values
    bad = np.isnan(values) | (values < min_count)
    frac = bad.sum(axis=0) / values.shape[0]
    keep = np.flatnonzero(frac < max_missing_frac)
    if keep.size == 0:
        raise ConfigError("filter_counts dropped every column")
    return m.with_values(values[:, keep], col_keep=keep)


def count_reference(m: FeatureMatrix):
    """Pseudo-reference for median-of-ratios: per-column geometric means.

    Only columns whose entries are all positive take part (the standard
    zero-count exclusion rule).  Returns ``(geomeans, column_mask)``; pass the
    pair back into :func:`median_of_ratios` to normalize other matrices
    against a frozen reference.
    """
    _require_kind(m, "counts", "count_reference")
    values = m.values
    if np.isnan(values).any():
        raise ConfigError("count_reference requires a fully observed matrix")
    mask = (values > 0).all(axis=0)
    if not mask.any():
        raise ConfigError("median_of_ratios needs at least one all-positive column")
    geomeans = np.exp(np.mean(np.log(values[:, mask]), axis=0))
    return geomeans, mask


def median_of_ratios(m: FeatureMatrix, reference=None):
    """Median-of-ratios count normalization.

    Each row's size factor is the median over the reference columns of
    count/geomean and the normalized matrix is count / size_factor.  The
    reference defaults to :func:`count_reference` of ``m`` itself; passing a
    frozen ``(geomeans, column_mask)`` pair makes size factors exactly
    equivariant under per-row scaling (scaling a row by t scales only its
    size factor by t, leaving the normalized output unchanged).  Returns
    ``(normalized, size_factors)``.
    """
    _require_kind(m, "counts", "median_of_ratios")
    values = m.values
    if np.isnan(values).any():
        raise ConfigError("median_of_ratios requires a fully observed matrix")
    geomeans, mask = count_reference(m) if reference is None else reference
    if mask.shape[0] != values.shape[1]:
        raise ConfigError("reference mask length does not match the column count")
    size_factors = np.median(values[:, mask] / geomeans, axis=1)
    if (size_factors <= 0).any():
        raise ConfigError("a size factor is non-positive; reference does not fit the data")
    normalized = values / size_factors[:, None]
    return m.with_values(normalized, kind="continuous"), size_factors


def log2p1(m: FeatureMatrix) -> FeatureMatrix:
    """Entrywise log2(x + 1); rejects negative entries."""
    present = m.values[~np.isnan(m.values)]
    if present.size and present.min() < 0:
        raise ConfigError("log2p1 requires non-negative entries")
    return m.with_values(np.log2(m.values + 1), kind="continuous")


def standardize_pca(m: FeatureMatrix, n_components: int):
    """Standardize columns then project onto the top principal directions.

    Columns are scaled to mean 0, sd 1 (population sd; constant columns map
    to 0).  Returns ``(scores, explained_variance_fraction)`` where scores is
    n x n_components.  Component signs follow the convention that the largest
    absolute loading of each direction is positive.
    """
    values = m.values
    if np.isnan(values).any():
        raise ConfigError("standardize_pca requires a fully observed matrix")
    n, p = values.shape
    if not 1 <= n_components <= min(n, p):
        raise ConfigError(f"n_components must lie in [1, {min(n, p)}], got {n_components}")
    mean = values.mean(axis=0)
    sd = values.std(axis=0)
    safe_sd = np.where(sd == 0, 1.0, sd)
    z = (values - mean) / safe_sd
    z[:, sd == 0] = 0.0

    u, s, vt = np.linalg.svd(z, full_matrices=False)
    for j in range(vt.shape[0]):
        i = np.argmax(np.abs(vt[j]))
        if vt[j, i] < 0:
            vt[j] = -vt[j]
            u[:, j] = -u[:, j]
    scores = u[:, :n_components] * s[:n_components]
    total = float(np.sum(s**2))
    explained = float(np.sum(s[:n_components] ** 2) / total) if total > 0 else 1.0
    return scores, explained
