"""Coupled per-modality VAEs and the shared two-headed discriminator.

One encoder/decoder pair per modality maps into a shared latent space; a
single discriminator (three fully connected trunk layers with LeakyReLU,
then one linear head per task) predicts both the modality and the class of
a latent vector.  Forward passes are pure given (weights, input, noise);
weights are initialized from a fan-in-scaled uniform scheme keyed by a seed.

Checkpoints are directories holding ``manifest.json`` plus one little-endian
float32 flat binary file per parameter tensor, named ``<state_dict_key>.bin``;
round-trips are bit-exact for float32 models.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from ._rng import derive_rng
from .errors import ConfigError, ShapeError

CHECKPOINT_FORMAT = 1


def _per_modality(value, n_modalities):
    value = list(value)
    if value and isinstance(value[0], (list, tuple)):
        if len(value) != n_modalities:
            raise ConfigError("per-modality hidden sizes must list every modality")
        return tuple(tuple(int(w) for w in sizes) for sizes in value)
    return tuple(tuple(int(w) for w in value) for _ in range(n_modalities))


@dataclass(frozen=True)
class ArchitectureSpec:
    """Layer widths and activation settings for the whole model."""

    modality_dims: tuple[int, ...]
    n_classes: int
    latent_dim: int = 16
    encoder_hidden: tuple = (256, 64)
    decoder_hidden: tuple = (64, 256)
    disc_hidden: tuple[int, ...] = (128, 64, 32)
    negative_slope: float = 0.2
    logvar_limit: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "modality_dims", tuple(int(p) for p in self.modality_dims))
        M = len(self.modality_dims)
        if M < 1 or any(p < 1 for p in self.modality_dims):
            raise ConfigError("modality_dims must be non-empty positive ints")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        object.__setattr__(self, "encoder_hidden", _per_modality(self.encoder_hidden, M))
        object.__setattr__(self, "decoder_hidden", _per_modality(self.decoder_hidden, M))
        object.__setattr__(self, "disc_hidden", tuple(int(w) for w in self.disc_hidden))

    @property
    def n_modalities(self) -> int:
        return len(self.modality_dims)

    def to_dict(self) -> dict:
        return {
            "modality_dims": list(self.modality_dims),
            "n_classes": self.n_classes,
            "latent_dim": self.latent_dim,
            "encoder_hidden": [list(h) for h in self.encoder_hidden],
            "decoder_hidden": [list(h) for h in self.decoder_hidden],
            "disc_hidden": list(self.disc_hidden),
            "negative_slope": self.negative_slope,
            "logvar_limit": self.logvar_limit,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArchitectureSpec":
        return cls(**data)


def parameter_count(spec: ArchitectureSpec) -> int:
    """Total weight count: sum over linear layers of (fan_in + 1) * fan_out."""
    total = 0

    def stack(sizes):
        nonlocal total
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            total += (fan_in + 1) * fan_out

    d = spec.latent_dim
    for m, p in enumerate(spec.modality_dims):
        enc = [p, *spec.encoder_hidden[m]]
        stack(enc)
        total += 2 * (enc[-1] + 1) * d  # mu and logvar heads
        stack([d, *spec.decoder_hidden[m], p])
    trunk = [d, *spec.disc_hidden]
    stack(trunk)
    total += (trunk[-1] + 1) * spec.n_modalities
    total += (trunk[-1] + 1) * spec.n_classes
    return total


class LatentGaussian:
    """Diagonal Gaussian over the latent space, stored as (mu, log-variance)."""

    def __init__(self, mu: torch.Tensor, logvar: torch.Tensor):
        if mu.shape != logvar.shape:
            raise ShapeError("mu and logvar must have matching shapes")
        self.mu = mu
        self.logvar = logvar

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)

    def sample(self, eps: torch.Tensor) -> torch.Tensor:
        """Reparameterized draw z = mu + sigma * eps with caller-supplied noise."""
        if eps.shape != self.mu.shape:
            raise ShapeError(f"eps shape {tuple(eps.shape)} != mu shape {tuple(self.mu.shape)}")
        return self.mu + self.sigma * eps


def _hidden_stack(sizes, slope):
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        layers.append(nn.Linear(fan_in, fan_out))
        layers.append(nn.LeakyReLU(slope))
    return nn.Sequential(*layers)


class _Encoder(nn.Module):
    def __init__(self, p, hidden, d, slope):
        super().__init__()
        self.backbone = _hidden_stack([p, *hidden], slope)
        width = hidden[-1] if hidden else p
        self.mu = nn.Linear(width, d)
        self.logvar = nn.Linear(width, d)

    def forward(self, x):
        h = self.backbone(x)
        return self.mu(h), self.logvar(h)


class _Decoder(nn.Module):
    def __init__(self, d, hidden, p, slope):
        super().__init__()
        self.backbone = _hidden_stack([d, *hidden], slope)
        self.out = nn.Linear(hidden[-1] if hidden else d, p)

    def forward(self, z):
        return self.out(self.backbone(z))


class ModisModel(nn.Module):
    """All encoder/decoder pairs plus the shared discriminator."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        self.seed = None
        slope = spec.negative_slope
        d = spec.latent_dim
        self.encoders = nn.ModuleList(
            _Encoder(p, spec.encoder_hidden[m], d, slope)
            for m, p in enumerate(spec.modality_dims)
        )
        self.decoders = nn.ModuleList(
            _Decoder(d, spec.decoder_hidden[m], p, slope)
            for m, p in enumerate(spec.modality_dims)
        )
        self.trunk = _hidden_stack([d, *spec.disc_hidden], slope)
        width = spec.disc_hidden[-1] if spec.disc_hidden else d
        self.mod_head = nn.Linear(width, spec.n_modalities)
        self.class_head = nn.Linear(width, spec.n_classes)

    @property
    def n_modalities(self) -> int:
        return self.spec.n_modalities

    def _check_modality(self, m):
        if not 0 <= m < self.n_modalities:
            raise ShapeError(f"unknown modality {m}; model has {self.n_modalities}")

    def _as_batch(self, x, width, what):
        if x.dim() == 1:
            x = x.unsqueeze(0)
        if x.dim() != 2 or x.shape[1] != width:
            raise ShapeError(f"{what} expects (batch, {width}), got {tuple(x.shape)}")
        return x

    def encode(self, m: int, x: torch.Tensor) -> LatentGaussian:
        """Latent Gaussian of modality-m inputs; log-variance is clamped."""
        self._check_modality(m)
        x = self._as_batch(x, self.spec.modality_dims[m], f"encoder {m}")
        mu, logvar = self.encoders[m](x)
        limit = self.spec.logvar_limit
        return LatentGaussian(mu, torch.clamp(logvar, -limit, limit))

    def decode(self, m: int, z: torch.Tensor) -> torch.Tensor:
        self._check_modality(m)
        z = self._as_batch(z, self.spec.latent_dim, f"decoder {m}")
        return self.decoders[m](z)

    def translate(self, src: int, dst: int, x: torch.Tensor) -> torch.Tensor:
        """Deterministic cross-modality prediction through the mu path."""
        return self.decode(dst, self.encode(src, x).mu)

    def discriminate(self, z: torch.Tensor):
        """Returns (modality logits, class logits, trunk output h)."""
        z = self._as_batch(z, self.spec.latent_dim, "discriminator")
        h = self.trunk(z)
        return self.mod_head(h), self.class_head(h), h

    def vae_parameters(self):
        for net in (*self.encoders, *self.decoders):
            yield from net.parameters()

    def disc_parameters(self):
        for net in (self.trunk, self.mod_head, self.class_head):
            yield from net.parameters()


def init_params(spec: ArchitectureSpec, seed: int, dtype=torch.float32) -> ModisModel:
    """Build a model with fan-in-scaled uniform weights, deterministic per seed.

    Every linear layer's weights and biases are drawn from
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)) in module registration order.
    """
    model = ModisModel(spec)
    rng = derive_rng(seed, "init")
    with torch.no_grad():
        for _, module in model.named_modules():
            if isinstance(module, nn.Linear):
                fan_in = module.weight.shape[1]
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=tuple(module.weight.shape))
                b = rng.uniform(-bound, bound, size=tuple(module.bias.shape))
                module.weight.copy_(torch.from_numpy(w))
                module.bias.copy_(torch.from_numpy(b))
    model.seed = seed
    return model.to(dtype)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: ModisModel, directory, step: int = 0, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        arr.tofile(directory / f"{name}.bin")
        tensors[name] = list(arr.shape)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "step": step,
        "tensors": tensors,
    }
    if extra:
        manifest.update(extra)
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_checkpoint(directory, dtype=torch.float32):
    """Rebuild a model from a checkpoint directory; returns (model, manifest)."""
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    spec = ArchitectureSpec.from_dict(manifest["spec"])
    model = ModisModel(spec)
    state = {}
    for name, shape in manifest["tensors"].items():
        arr = np.fromfile(directory / f"{name}.bin", dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(arr.copy()).to(dtype)
    model.load_state_dict(state)
    model.seed = manifest.get("seed")
    return model.to(dtype), manifest
