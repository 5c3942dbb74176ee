import numpy as np
import pytest
import torch

from modislab.datasets import GeneratorConfig, UnpairedDataset, generate_paired, split_train_test, unpair
from modislab.model import ArchitectureSpec, init_params


def toy_unpaired(sizes, dims, n_classes=2, seed=0):
    """Random unpaired dataset with the given per-modality sizes."""
    rng = np.random.default_rng(seed)
    features, labels, pair_ids, sample_ids = [], [], [], []
    next_id = 0
    for n, p in zip(sizes, dims):
        features.append(rng.standard_normal((n, p)))
        labels.append((np.arange(n) % n_classes) + 1)
        pair_ids.append(np.full(n, -1))
        sample_ids.append(np.arange(next_id, next_id + n))
        next_id += n
    return UnpairedDataset(
        features=tuple(features), labels=tuple(labels),
        pair_ids=tuple(pair_ids), sample_ids=tuple(sample_ids),
        n_classes=n_classes,
    )


def tiny_spec(dims=(3, 2), n_classes=2, latent_dim=2):
    return ArchitectureSpec(
        modality_dims=dims, n_classes=n_classes, latent_dim=latent_dim,
        encoder_hidden=(4,), decoder_hidden=(4,), disc_hidden=(3, 3, 3),
    )


def tiny_model(seed=0, dtype=torch.float64, **kwargs):
    return init_params(tiny_spec(**kwargs), seed, dtype=dtype)


@pytest.fixture(scope="session")
def intersim_scale():
    """Paired dataset at the published scale (11,500 x [367, 131, 160])."""
    cfg = GeneratorConfig(n_samples=11500, n_classes=5, modality_dims=(367, 131, 160), seed=7)
    return cfg, generate_paired(cfg)


@pytest.fixture(scope="session")
def intersim_splits(intersim_scale):
    cfg, paired = intersim_scale
    unpaired = unpair(paired, seed=7)
    train, test = split_train_test(unpaired, 0.2, seed=7)
    return unpaired, train, test
