import json

import numpy as np
import pytest
import torch

from modislab.datasets import GeneratorConfig, generate_paired, split_train_test, unpair
from modislab.errors import ConfigError
from modislab.losses import LossReport
from modislab.trainer import (
    TrainConfig,
    build_spec,
    fit,
    grid_search_cv,
    make_batches,
    train_step_discriminator,
    train_step_vaes,
)
from modislab.model import init_params

from conftest import toy_unpaired


def tiny_cfg(**kwargs):
    base = dict(epochs=2, batch_size=8, latent_dim=4, seed=0,
                encoder_hidden=(8,), decoder_hidden=(8,), disc_hidden=(6, 6, 6),
                checkpoint_every=100)
    base.update(kwargs)
    return TrainConfig(**base)


def setup_step(seed=0, **cfg_kwargs):
    ds = toy_unpaired([24, 24], [5, 4], n_classes=2, seed=seed)
    cfg = tiny_cfg(**cfg_kwargs)
    model = init_params(build_spec(ds, cfg), cfg.seed)
    opt_d = torch.optim.Adam(list(model.disc_parameters()), lr=cfg.learning_rate,
                             betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
    opt_v = torch.optim.Adam(list(model.vae_parameters()), lr=cfg.learning_rate,
                             betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
    batch = make_batches(ds, cfg.batch_size, cfg.seed, epoch=0)[0]
    return ds, cfg, model, opt_d, opt_v, batch


class TestConfig:
    def test_synthetic_profile_defaults(self):
        cfg = TrainConfig()
        assert cfg.epochs == 300
        assert cfg.batch_size == 32
        assert cfg.learning_rate == 1e-4
        assert cfg.beta == 1e-4
        assert cfg.adam_beta1 == 0.5
        assert cfg.gamma == 10.0

    def test_round_trip(self):
        cfg = tiny_cfg(beta=1e-6, gamma=160.0)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="momentum"):
            TrainConfig.from_dict({"momentum": 0.9})

    def test_validation(self):
        with pytest.raises(ConfigError):
            tiny_cfg(epochs=0)
        with pytest.raises(ConfigError):
            tiny_cfg(learning_rate=-1e-4)


class TestMakeBatches:
    def test_epoch_length(self):
        ds = toy_unpaired([100, 100, 100], [4, 4, 4], n_classes=2)
        batches = make_batches(ds, 32, seed=0, epoch=0)
        assert len(batches) == 4
        assert all(b.batch_size == 32 for b in batches)

    def test_single_modality_exact(self):
        ds = toy_unpaired([32], [4], n_classes=2)
        batches = make_batches(ds, 32, seed=0, epoch=0)
        assert len(batches) == 1
        assert sorted(batches[0].indices[0].tolist()) == list(range(32))

    def test_epochs_shuffle_differently_but_reproduce(self):
        ds = toy_unpaired([64, 48], [4, 3], n_classes=2)
        e0 = make_batches(ds, 16, seed=3, epoch=0)
        e1 = make_batches(ds, 16, seed=3, epoch=1)
        again = make_batches(ds, 16, seed=3, epoch=0)
        assert not np.array_equal(e0[0].indices[0], e1[0].indices[0])
        for b, c in zip(e0, again):
            for m in range(2):
                assert np.array_equal(b.indices[m], c.indices[m])
                assert torch.equal(b.features[m], c.features[m])

    def test_short_modality_cycles(self):
        ds = toy_unpaired([64, 10], [4, 3], n_classes=2)
        batches = make_batches(ds, 32, seed=0, epoch=0)
        assert len(batches) == 2
        used = np.concatenate([b.indices[1] for b in batches])
        assert set(used.tolist()) == set(range(10))  # every record reused in cycles

    def test_empty_modality_named(self):
        ds = toy_unpaired([10, 0], [4, 3], n_classes=2)
        with pytest.raises(ConfigError, match="modality 1"):
            make_batches(ds, 4, seed=0, epoch=0)


class TestSteps:
    def test_zero_lr_keeps_params(self):
        _, cfg, model, opt_d, opt_v, batch = setup_step(learning_rate=0.0)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        train_step_discriminator(model, opt_d, batch, cfg)
        train_step_vaes(model, opt_v, batch, cfg)
        for n, p in model.named_parameters():
            assert torch.equal(before[n], p), n

    def test_disc_step_freezes_vaes(self):
        _, cfg, model, opt_d, _, batch = setup_step()
        before = [p.detach().clone() for p in model.vae_parameters()]
        disc_before = [p.detach().clone() for p in model.disc_parameters()]
        train_step_discriminator(model, opt_d, batch, cfg)
        for old, new in zip(before, model.vae_parameters()):
            assert torch.equal(old, new)
        assert any(not torch.equal(old, new)
                   for old, new in zip(disc_before, model.disc_parameters()))

    def test_vae_step_freezes_discriminator(self):
        _, cfg, model, _, opt_v, batch = setup_step()
        before = [p.detach().clone() for p in model.disc_parameters()]
        vae_before = [p.detach().clone() for p in model.vae_parameters()]
        train_step_vaes(model, opt_v, batch, cfg)
        for old, new in zip(before, model.disc_parameters()):
            assert torch.equal(old, new)
        assert any(not torch.equal(old, new)
                   for old, new in zip(vae_before, model.vae_parameters()))

    def test_disc_steps_reduce_loss_on_toy(self):
        # 2 classes x 2 modalities, encoders frozen: L_D decreases over 200 steps
        _, cfg, model, opt_d, _, batch = setup_step(learning_rate=1e-3)
        first = train_step_discriminator(model, opt_d, batch, cfg).total_d
        for _ in range(199):
            last = train_step_discriminator(model, opt_d, batch, cfg).total_d
        assert last < first

    def test_vae_steps_reduce_loss_on_toy(self):
        _, cfg, model, _, opt_v, batch = setup_step(learning_rate=1e-3)
        first = train_step_vaes(model, opt_v, batch, cfg).total_vae
        for _ in range(199):
            last = train_step_vaes(model, opt_v, batch, cfg).total_vae
        assert last < first

    def test_report_totals_consistent(self):
        _, cfg, model, opt_d, opt_v, batch = setup_step()
        rep = train_step_discriminator(model, opt_d, batch, cfg)
        rep.check_totals()
        rep = train_step_vaes(model, opt_v, batch, cfg)
        rep.check_totals()
        assert rep.meta["phase"] == "vae"


class TestFit:
    def test_dry_run_returns_init(self):
        ds = toy_unpaired([16, 16], [4, 3], n_classes=2)
        cfg = tiny_cfg(dry_run=True)
        model, history = fit(ds, cfg)
        reference = init_params(build_spec(ds, cfg), cfg.seed)
        assert history == []
        for a, b in zip(model.parameters(), reference.parameters()):
            assert torch.equal(a, b)

    def test_deterministic_reruns(self):
        ds = toy_unpaired([20, 20], [4, 3], n_classes=2, seed=1)
        cfg = tiny_cfg(epochs=3)
        model_a, hist_a = fit(ds, cfg)
        model_b, hist_b = fit(ds, cfg)
        for pa, pb in zip(model_a.parameters(), model_b.parameters()):
            assert torch.equal(pa, pb)
        assert [r.to_dict() for r in hist_a] == [r.to_dict() for r in hist_b]

    def test_history_file_and_invariants(self, tmp_path):
        ds = toy_unpaired([16, 16], [4, 3], n_classes=2)
        fit(ds, tiny_cfg(epochs=2), out_dir=tmp_path)
        lines = (tmp_path / "history.jsonl").read_text().splitlines()
        assert len(lines) == 2 * 2 * 2  # epochs x steps x phases
        for line in lines:
            LossReport.from_dict(json.loads(line)).check_totals()
        assert (tmp_path / "ckpt" / "final" / "manifest.json").exists()

    def test_resume_matches_straight_run(self, tmp_path):
        ds = toy_unpaired([20, 20], [4, 3], n_classes=2, seed=5)
        straight_dir = tmp_path / "straight"
        resumed_dir = tmp_path / "resumed"
        cfg4 = tiny_cfg(epochs=4, checkpoint_every=2)
        model_straight, _ = fit(ds, cfg4, out_dir=straight_dir)
        fit(ds, tiny_cfg(epochs=2, checkpoint_every=2), out_dir=resumed_dir)
        model_resumed, _ = fit(ds, cfg4, out_dir=resumed_dir,
                               resume=resumed_dir / "ckpt" / "final")
        for pa, pb in zip(model_straight.parameters(), model_resumed.parameters()):
            assert torch.equal(pa, pb)

    def test_isolation_check_mode(self):
        ds = toy_unpaired([16, 16], [4, 3], n_classes=2)
        fit(ds, tiny_cfg(epochs=1), isolation_check=True)


class TestGridSearch:
    def make_ds(self):
        cfg = GeneratorConfig(n_samples=240, n_classes=2, modality_dims=(6, 5),
                              class_separation=5.0, latent_factor_dim=3,
                              noise_sd=0.4, seed=2)
        return unpair(generate_paired(cfg), seed=2)

    def test_single_point(self, tmp_path):
        ds = self.make_ds()
        rows = grid_search_cv(ds, {"beta": [1e-4]}, tiny_cfg(epochs=1), k=2,
                              out_csv=tmp_path / "grid.csv")
        assert len(rows) == 1
        assert len(rows[0]["fold_bacc"]) == 2
        assert (tmp_path / "grid.csv").exists()

    def test_folds_partition_strata(self):
        from modislab.trainer import _cv_folds
        ds = self.make_ds()
        folds = _cv_folds(ds, 4, seed=0)
        for m in range(ds.n_modalities):
            merged = np.concatenate([fold[m] for fold in folds])
            assert sorted(merged.tolist()) == list(range(ds.counts(m)))
            for a in range(4):
                for b in range(a + 1, 4):
                    assert len(np.intersect1d(folds[a][m], folds[b][m])) == 0

    def test_trained_point_beats_lr_zero(self):
        ds = self.make_ds()
        rows = grid_search_cv(ds, {"learning_rate": [0.0, 1e-3]},
                              tiny_cfg(epochs=20), k=2)
        assert rows[0]["learning_rate"] == 1e-3
        assert rows[0]["mean_bacc"] > rows[1]["mean_bacc"]

    def test_stratum_smaller_than_k(self):
        ds = toy_unpaired([6, 6], [3, 3], n_classes=3)  # 2 records per cell
        with pytest.raises(ConfigError, match="cannot build"):
            grid_search_cv(ds, {"beta": [1e-4]}, tiny_cfg(epochs=1), k=5)

    def test_empty_grid(self):
        with pytest.raises(ConfigError):
            grid_search_cv(self.make_ds(), {}, tiny_cfg(), k=2)
