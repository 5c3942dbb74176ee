"""Alternating two-step adversarial training over unpaired modality batches.

Each optimization step draws one aligned sub-batch per modality, updates the
discriminator on its objective with the VAE weights untouched, then updates
all encoders/decoders on the combined VAE objective with the discriminator
frozen.  Every random draw (shuffles, reparameterization noise) is derived
from (seed, epoch, step, phase), so runs are bit-reproducible and training
can resume from an epoch checkpoint without replaying history.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from ._rng import derive_rng
from .datasets import UNLABELED, UnpairedDataset
from .errors import ConfigError, NumericalError
from .losses import (
    LossReport,
    class_loss,
    clustering_loss,
    kl_loss,
    median_bandwidth,
    recon_loss,
    relativistic_disc_loss,
    relativistic_vae_loss,
    total_disc_loss,
    total_vae_loss,
)
from .model import ArchitectureSpec, ModisModel, init_params, load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; defaults follow the synthetic-data profile."""

    epochs: int = 300
    batch_size: int = 32
    learning_rate: float = 1e-4
    beta: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    gamma: float = 10.0
    latent_dim: int = 16
    seed: int = 0
    checkpoint_every: int = 100
    disc_steps: int = 1
    sigma_kernel: str | float = "median"
    encoder_hidden: tuple = (256, 64)
    decoder_hidden: tuple = (64, 256)
    disc_hidden: tuple = (128, 64, 32)
    dry_run: bool = False

    def __post_init__(self):
        for name in ("encoder_hidden", "decoder_hidden", "disc_hidden"):
            value = getattr(self, name)
            if value and isinstance(value[0], (list, tuple)):
                value = tuple(tuple(v) for v in value)
            else:
                value = tuple(value)
            object.__setattr__(self, name, value)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        # zero is meaningful for degenerate-comparison runs; negatives are not
        for name in ("learning_rate", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.disc_steps < 1:
            raise ConfigError("disc_steps must be >= 1")

    def to_dict(self) -> dict:
        def plain(value):
            return [plain(v) for v in value] if isinstance(value, tuple) else value

        return {f.name: plain(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        for key in data:
            if key not in names:
                raise ConfigError(f"unknown train config field: {key}")
        return cls(**data)


@dataclass
class ModalBatch:
    """One aligned sub-batch per modality for a single optimization step."""

    features: list[torch.Tensor]   # per modality (B, p_m)
    labels: list[torch.Tensor]     # per modality (B,), values 1..K or -1
    indices: list[np.ndarray]      # per modality rows into the dataset

    @property
    def batch_size(self) -> int:
        return self.features[0].shape[0]


def make_batches(
    ds: UnpairedDataset, batch_size: int, seed: int, epoch: int, dtype=torch.float32
) -> list[ModalBatch]:
    """Per-epoch batches: independent shuffles, smaller modalities cycled.

    Epoch length is ceil(max modality size / batch_size); every modality
    contributes exactly ``batch_size`` rows per step, wrapping around with a
    fresh shuffle whenever its records run out.
    """
    sizes = [ds.counts(m) for m in range(ds.n_modalities)]
    for m, size in enumerate(sizes):
        if size == 0:
            raise ConfigError(f"modality {m} has no training records")
    steps = int(np.ceil(max(sizes) / batch_size))
    needed = steps * batch_size
    order = []
    for m, size in enumerate(sizes):
        rng = derive_rng(seed, "batches", epoch, m)
        reps = [rng.permutation(size) for _ in range(int(np.ceil(needed / size)))]
        order.append(np.concatenate(reps)[:needed])
    batches = []
    for step in range(steps):
        rows = [order[m][step * batch_size:(step + 1) * batch_size] for m in range(ds.n_modalities)]
        batches.append(ModalBatch(
            features=[torch.as_tensor(ds.features[m][r], dtype=dtype) for m, r in enumerate(rows)],
            labels=[torch.as_tensor(ds.labels[m][r]) for m, r in enumerate(rows)],
            indices=rows,
        ))
    return batches


def _noise(cfg: TrainConfig, epoch: int, step: int, phase: str, m: int, shape, dtype):
    rng = derive_rng(cfg.seed, "eps", epoch, step, phase, m)
    return torch.as_tensor(rng.standard_normal(shape), dtype=dtype)


def _evaluate_parts(model: ModisModel, batch: ModalBatch, cfg: TrainConfig,
                    epoch: int, step: int, phase: str):
    """All loss terms on the current weights.

    In the discriminator phase the encoder/decoder passes run without a
    graph and the latents are detached leaves (the penalty differentiates
    the modality logits with respect to them); in the VAE phase gradients
    flow through the frozen discriminator back into the encoders.
    """
    M = model.n_modalities
    dtype = next(model.parameters()).dtype
    disc_phase = phase == "disc"

    recon, kl, latents = [], [], []
    with torch.no_grad() if disc_phase else torch.enable_grad():
        for m in range(M):
            x = batch.features[m].to(dtype)
            g = model.encode(m, x)
            eps = _noise(cfg, epoch, step, phase, m, tuple(g.mu.shape), dtype)
            z = g.sample(eps)
            recon.append(recon_loss(x, model.decode(m, z)))
            kl.append(kl_loss(g.mu, g.sigma))
            latents.append(z)
    if disc_phase:
        latents = [z.clone().requires_grad_(True) for z in latents]

    B = batch.batch_size
    pooled = torch.cat(latents, dim=0)
    mod_logits, class_logits, h = model.discriminate(pooled)
    table = mod_logits.view(M, B, M).permute(2, 0, 1)

    rel_d, grad_penalty = relativistic_disc_loss(
        table, latents, cfg.gamma, create_graph=disc_phase
    )
    rel_vae = relativistic_vae_loss(table)

    labels = torch.cat([lab for lab in batch.labels])
    mask = labels != UNLABELED
    ce = class_loss(class_logits, labels - 1, mask)

    alpha = torch.softmax(class_logits, dim=1)
    sigma = median_bandwidth(h) if cfg.sigma_kernel == "median" else float(cfg.sigma_kernel)
    c1, c2, c3 = clustering_loss(h, alpha, sigma)

    return {
        "recon": recon, "kl": kl, "rel_d": rel_d, "rel_vae": rel_vae,
        "grad_penalty": grad_penalty, "class_ce": ce, "c1": c1, "c2": c2, "c3": c3,
        "sigma": sigma,
    }


def _report(parts, cfg: TrainConfig, **meta) -> LossReport:
    return LossReport.from_parts(
        recon=parts["recon"], kl=parts["kl"], rel_d=parts["rel_d"], rel_vae=parts["rel_vae"],
        grad_penalty=parts["grad_penalty"], class_ce=parts["class_ce"],
        c1=parts["c1"], c2=parts["c2"], c3=parts["c3"],
        beta=cfg.beta, gamma=cfg.gamma, sigma_kernel=parts["sigma"], **meta,
    )


def _total_or_diagnose(total_fn, parts, cfg, **meta):
    """Assemble a step objective, attaching the full LossReport on failure."""
    try:
        loss = total_fn()
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite training loss: {float(loss)}")
    except NumericalError as exc:
        report = _report(parts, cfg, **meta)
        raise NumericalError(str(exc), report=report.to_dict()) from None
    return loss


def train_step_discriminator(model: ModisModel, optimizer, batch: ModalBatch,
                             cfg: TrainConfig, epoch: int = 0, step: int = 0) -> LossReport:
    """One optimizer step on the discriminator objective; VAE weights untouched."""
    for p in model.vae_parameters():
        p.requires_grad_(False)
    try:
        parts = _evaluate_parts(model, batch, cfg, epoch, step, "disc")
        loss = _total_or_diagnose(
            lambda: total_disc_loss(parts["rel_d"], parts["grad_penalty"], parts["class_ce"],
                                    parts["c1"], parts["c2"], parts["c3"]),
            parts, cfg, epoch=epoch, step=step, phase="disc")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    finally:
        for p in model.vae_parameters():
            p.requires_grad_(True)
    return _report(parts, cfg, epoch=epoch, step=step, phase="disc")


def train_step_vaes(model: ModisModel, optimizer, batch: ModalBatch,
                    cfg: TrainConfig, epoch: int = 0, step: int = 0) -> LossReport:
    """One optimizer step on the VAE objective; discriminator weights untouched."""
    for p in model.disc_parameters():
        p.requires_grad_(False)
    try:
        parts = _evaluate_parts(model, batch, cfg, epoch, step, "vae")
        loss = _total_or_diagnose(
            lambda: total_vae_loss(parts["recon"], parts["kl"], parts["rel_vae"],
                                   parts["class_ce"], parts["c1"], parts["c2"], parts["c3"],
                                   cfg.beta),
            parts, cfg, epoch=epoch, step=step, phase="vae")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    finally:
        for p in model.disc_parameters():
            p.requires_grad_(True)
    return _report(parts, cfg, epoch=epoch, step=step, phase="vae")


def build_spec(ds: UnpairedDataset, cfg: TrainConfig) -> ArchitectureSpec:
    return ArchitectureSpec(
        modality_dims=ds.modality_dims,
        n_classes=ds.n_classes,
        latent_dim=cfg.latent_dim,
        encoder_hidden=cfg.encoder_hidden,
        decoder_hidden=cfg.decoder_hidden,
        disc_hidden=cfg.disc_hidden,
    )


def _make_optimizers(model: ModisModel, cfg: TrainConfig):
    kwargs = dict(lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
    return (
        torch.optim.Adam(list(model.disc_parameters()), **kwargs),
        torch.optim.Adam(list(model.vae_parameters()), **kwargs),
    )


# ---------------------------------------------------------------------------
# Training state on disk (model checkpoint + optimizer moments)
# ---------------------------------------------------------------------------

def _optimizer_tensors(model, optimizer, group):
    named = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for param_group in optimizer.param_groups:
        for p in param_group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = named[id(p)]
            out[f"optim.{group}.{name}.step"] = state["step"]
            out[f"optim.{group}.{name}.exp_avg"] = state["exp_avg"]
            out[f"optim.{group}.{name}.exp_avg_sq"] = state["exp_avg_sq"]
    return out


def save_train_state(directory, model, opt_disc, opt_vae, epoch: int, cfg: TrainConfig):
    directory = Path(directory)
    save_checkpoint(model, directory, step=epoch, extra={"train_config": cfg.to_dict()})
    tensors = {}
    tensors.update(_optimizer_tensors(model, opt_disc, "disc"))
    tensors.update(_optimizer_tensors(model, opt_vae, "vae"))
    index = {}
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        arr.tofile(directory / f"{name}.bin")
        index[name] = list(arr.shape)
    with open(directory / "optim.json", "w") as fh:
        json.dump(index, fh, indent=2)
        fh.write("\n")


def _restore_optimizer(directory, index, model, optimizer, group):
    named = dict(model.named_parameters())
    for param_group in optimizer.param_groups:
        for p in param_group["params"]:
            name = next(n for n, q in named.items() if q is p)
            key = f"optim.{group}.{name}"
            if f"{key}.step" not in index:
                continue
            state = {}
            for slot in ("step", "exp_avg", "exp_avg_sq"):
                shape = index[f"{key}.{slot}"]
                arr = np.fromfile(directory / f"{key}.{slot}.bin", dtype="<f4").reshape(shape)
                state[slot] = torch.from_numpy(arr.copy())
            optimizer.state[p] = state


def load_train_state(directory):
    """Rebuild (model, opt_disc, opt_vae, next_epoch, cfg) from a checkpoint."""
    directory = Path(directory)
    model, manifest = load_checkpoint(directory)
    cfg = TrainConfig.from_dict(manifest["train_config"])
    opt_disc, opt_vae = _make_optimizers(model, cfg)
    with open(directory / "optim.json") as fh:
        index = json.load(fh)
    _restore_optimizer(directory, index, model, opt_disc, "disc")
    _restore_optimizer(directory, index, model, opt_vae, "vae")
    return model, opt_disc, opt_vae, int(manifest["step"]), cfg


def fit(
    ds: UnpairedDataset,
    cfg: TrainConfig,
    out_dir=None,
    resume=None,
    isolation_check: bool = False,
):
    """Run the full alternating optimization; returns ``(model, history)``.

    Writes ``history.jsonl`` (one line per sub-step) and periodic plus final
    checkpoints under ``out_dir/ckpt`` when an output directory is given.
    ``resume`` restarts from a saved training state at its epoch boundary.
    """
    torch.set_num_threads(1)  # single-threaded contract for bit-reproducibility
    if resume is not None:
        model, opt_disc, opt_vae, start_epoch, saved_cfg = load_train_state(resume)
        cfg = replace(saved_cfg, epochs=cfg.epochs)
    else:
        model = init_params(build_spec(ds, cfg), cfg.seed)
        opt_disc, opt_vae = _make_optimizers(model, cfg)
        start_epoch = 0

    history: list[LossReport] = []
    if cfg.dry_run:
        if out_dir is not None:
            _finalize(out_dir, model, opt_disc, opt_vae, 0, cfg)
        return model, history

    log = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log = open(out_dir / "history.jsonl", "a" if resume else "w")

    try:
        for epoch in range(start_epoch, cfg.epochs):
            batches = make_batches(ds, cfg.batch_size, cfg.seed, epoch)
            for step, batch in enumerate(batches):
                if isolation_check:
                    vae_before = [p.detach().clone() for p in model.vae_parameters()]
                for _ in range(cfg.disc_steps):
                    rep_d = train_step_discriminator(model, opt_disc, batch, cfg, epoch, step)
                if isolation_check:
                    _assert_unchanged(vae_before, model.vae_parameters(), "VAE")
                    disc_before = [p.detach().clone() for p in model.disc_parameters()]
                rep_v = train_step_vaes(model, opt_vae, batch, cfg, epoch, step)
                if isolation_check:
                    _assert_unchanged(disc_before, model.disc_parameters(), "discriminator")
                history.extend((rep_d, rep_v))
                if log is not None:
                    log.write(rep_d.to_json_line() + "\n")
                    log.write(rep_v.to_json_line() + "\n")
            if out_dir is not None and (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 < cfg.epochs:
                save_train_state(out_dir / "ckpt" / f"epoch_{epoch + 1:05d}", model,
                                 opt_disc, opt_vae, epoch + 1, cfg)
        if out_dir is not None:
            _finalize(out_dir, model, opt_disc, opt_vae, cfg.epochs, cfg)
    finally:
        if log is not None:
            log.close()
    return model, history


def _finalize(out_dir, model, opt_disc, opt_vae, epoch, cfg):
    save_train_state(Path(out_dir) / "ckpt" / "final", model, opt_disc, opt_vae, epoch, cfg)


def _assert_unchanged(before, params, what):
    for old, new in zip(before, params):
        if not torch.equal(old, new):
            raise NumericalError(f"{what} weights changed during the frozen step")


# ---------------------------------------------------------------------------
# Grid search with stratified k-fold cross-validation
# ---------------------------------------------------------------------------

GRID_FIELDS = ("beta", "latent_dim", "learning_rate", "gamma")


def _cv_folds(ds: UnpairedDataset, k: int, seed: int):
    """Per-modality row indices of each fold, stratified by (class, modality)."""
    folds = [[[] for _ in range(ds.n_modalities)] for _ in range(k)]
    for m in range(ds.n_modalities):
        for cls in np.unique(ds.labels[m]):
            rows = np.flatnonzero(ds.labels[m] == cls)
            if len(rows) < k:
                raise ConfigError(
                    f"stratum (class={int(cls)}, modality={m}) has {len(rows)} records; "
                    f"cannot build {k} folds containing every class"
                )
            perm = derive_rng(seed, "cv", m, int(cls)).permutation(rows)
            for f in range(k):
                folds[f][m].append(perm[f::k])
    return [[np.sort(np.concatenate(c)) for c in fold] for fold in folds]


def _recon_mse(model: ModisModel, ds: UnpairedDataset) -> float:
    """Per-feature reconstruction MSE through the mu path, pooled over records."""
    dtype = next(model.parameters()).dtype
    total, count = 0.0, 0
    with torch.no_grad():
        for m in range(ds.n_modalities):
            if ds.counts(m) == 0:
                continue
            x = torch.as_tensor(ds.features[m], dtype=dtype)
            x_hat = model.decode(m, model.encode(m, x).mu)
            total += float(((x - x_hat) ** 2).mean(dim=1).sum())
            count += x.shape[0]
    return total / max(count, 1)


def grid_search_cv(ds: UnpairedDataset, grid: dict, base_cfg: TrainConfig,
                   k: int = 5, out_csv=None) -> list[dict]:
    """Full grid search scored by stratified k-fold cross-validation.

    ``grid`` maps hyperparameter names (subset of beta / latent_dim /
    learning_rate / gamma) to candidate lists.  Each point is scored by mean
    validation balanced accuracy then mean validation reconstruction MSE;
    the returned rows are ranked best-first and optionally written to CSV.
    """
    from .metrics import balanced_accuracy, predict_class

    if not grid:
        raise ConfigError("empty grid")
    for name in grid:
        if name not in GRID_FIELDS:
            raise ConfigError(f"unknown grid field: {name}; expected one of {GRID_FIELDS}")
    folds = _cv_folds(ds, k, base_cfg.seed)
    all_rows = [np.arange(ds.counts(m)) for m in range(ds.n_modalities)]

    names = sorted(grid)
    rows = []
    for values in itertools.product(*(grid[n] for n in names)):
        point = dict(zip(names, values))
        cfg = replace(base_cfg, **point)
        baccs, mses = [], []
        for f in range(k):
            val_rows = folds[f]
            train_rows = [np.setdiff1d(all_rows[m], val_rows[m]) for m in range(ds.n_modalities)]
            ds_train, ds_val = ds.take(train_rows), ds.take(val_rows)
            model, _ = fit(ds_train, cfg)
            preds = np.concatenate(predict_class(model, ds_val))
            truth = np.concatenate(ds_val.labels)
            baccs.append(balanced_accuracy(truth, preds))
            mses.append(_recon_mse(model, ds_val))
        row = dict(point)
        row.update({
            "fold_bacc": baccs, "fold_mse": mses,
            "mean_bacc": float(np.mean(baccs)), "mean_mse": float(np.mean(mses)),
        })
        rows.append(row)
    rows.sort(key=lambda r: (-r["mean_bacc"], r["mean_mse"]))

    if out_csv is not None:
        import pandas as pd

        flat = []
        for rank, row in enumerate(rows, start=1):
            entry = {"rank": rank}
            entry.update({n: row[n] for n in names})
            entry["mean_bacc"] = row["mean_bacc"]
            entry["mean_mse"] = row["mean_mse"]
            for f in range(k):
                entry[f"bacc_fold{f}"] = row["fold_bacc"][f]
                entry[f"mse_fold{f}"] = row["fold_mse"][f]
            flat.append(entry)
        pd.DataFrame(flat).to_csv(out_csv, index=False)
    return rows
