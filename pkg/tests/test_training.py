import csv
import os

import numpy as np
import pytest
import torch

from vesselseg.datasets import attach_weight_map, make_batch
from vesselseg.network import build_network
from vesselseg.synthetic import make_synthetic_dataset
from vesselseg.training import (TrainConfig, apply_overrides, fit, load_checkpoint,
                                load_config, lr_at, make_optimizer, restore,
                                save_checkpoint, save_config, train_step)
from vesselseg.uncertainty import UncertaintyParams


def tiny_config(**kw):
    base = dict(dataset="synthetic", channels=(2, 4, 8, 16), batch_size=2,
                patch_size=32, total_epochs=50, lr_halving_period=20, lr=1e-3,
                eval_interval=0)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_default_schedule_values(self):
        config = TrainConfig()
        assert lr_at(0, config) == pytest.approx(5e-5)
        assert lr_at(5000, config) == pytest.approx(2.5e-5)
        assert lr_at(19999, config) == pytest.approx(6.25e-6)

    def test_four_plateaus(self):
        config = TrainConfig()
        values = {lr_at(e, config) for e in range(0, 20000, 250)}
        assert len(values) == 4

    def test_out_of_range(self):
        config = TrainConfig()
        with pytest.raises(ValueError):
            lr_at(-1, config)
        with pytest.raises(ValueError):
            lr_at(20000, config)


class TestConfig:
    def test_round_trip(self, tmp_path):
        config = tiny_config(loss_mode="static", lambda_aux=0.01)
        path = tmp_path / "config.txt"
        save_config(config, path)
        loaded = load_config(path)
        assert loaded == config

    def test_overrides(self):
        config = TrainConfig()
        apply_overrides(config, {"loss_mode": "static", "lambda_aux": "0.01",
                                 "channels": "8,16,32,64", "use_weightmap": "false"})
        assert config.loss_mode == "static"
        assert config.lambda_aux == 0.01
        assert config.channels == (8, 16, 32, 64)
        assert config.use_weightmap is False

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            apply_overrides(TrainConfig(), {"warp_speed": "9"})

    def test_validation(self):
        with pytest.raises(ValueError):
            tiny_config(loss_mode="static", lambda_aux=0.0).validate()
        with pytest.raises(ValueError):
            tiny_config(loss_mode="guess").validate()
        with pytest.raises(ValueError):
            tiny_config(lr=-1).validate()

    def test_hash_tracks_content(self):
        a, b = tiny_config(), tiny_config(lambda_aux=0.5)
        assert a.hash() != b.hash()
        assert a.hash() == tiny_config().hash()


def one_batch(config, seed=0, n=2):
    samples, _ = make_synthetic_dataset(n, seed=seed, size=64)
    for s in samples:
        attach_weight_map(s, config.alpha, config.beta)
    rng = np.random.default_rng(seed)
    return samples, make_batch(samples, config.batch_size, False, rng,
                               config.patch_size)


class TestTrainStep:
    def test_static_lambda_one_sums(self):
        config = tiny_config(loss_mode="static", lambda_aux=1.0)
        _, batch = one_batch(config)
        model = build_network(config.network_spec(), 0)
        uparams = UncertaintyParams()
        opt = make_optimizer(model, uparams, config)
        bd = train_step(model, uparams, opt, batch, config)
        assert bd.combined == pytest.approx(bd.l_main + bd.l_aux, rel=1e-6)

    def test_uncertainty_step_zero(self):
        config = tiny_config()
        _, batch = one_batch(config)
        model = build_network(config.network_spec(), 0)
        uparams = UncertaintyParams()
        opt = make_optimizer(model, uparams, config)
        bd = train_step(model, uparams, opt, batch, config)
        assert bd.sigma_main == pytest.approx(1.0)
        assert bd.sigma_aux == pytest.approx(1.0)
        assert bd.combined == pytest.approx(bd.l_main + bd.l_aux, rel=1e-6)

    def test_sigma_params_get_gradients(self):
        config = tiny_config()
        _, batch = one_batch(config)
        model = build_network(config.network_spec(), 0)
        uparams = UncertaintyParams()
        opt = make_optimizer(model, uparams, config)
        train_step(model, uparams, opt, batch, config)
        assert uparams.s_main.grad is not None and uparams.s_main.grad.abs() > 0
        assert uparams.s_aux.grad is not None and uparams.s_aux.grad.abs() > 0

    def test_main_only_ignores_aux(self):
        config = tiny_config(loss_mode="main_only")
        _, batch = one_batch(config)
        model = build_network(config.network_spec(), 0)
        uparams = UncertaintyParams()
        opt = make_optimizer(model, uparams, config)
        bd = train_step(model, uparams, opt, batch, config)
        assert bd.combined == pytest.approx(bd.l_main, rel=1e-6)
        grad = model.aux_proj.weight.grad
        assert grad is None or grad.abs().sum() == 0

    def test_descent_on_fixed_batch(self):
        config = tiny_config(lr=1e-3)
        _, batch = one_batch(config)
        model = build_network(config.network_spec(), 0)
        uparams = UncertaintyParams()
        opt = make_optimizer(model, uparams, config)
        losses = [train_step(model, uparams, opt, batch, config).combined
                  for _ in range(50)]
        assert np.mean(losses[-5:]) < np.mean(losses[:5])

    def test_nonfinite_loss_aborts_with_diagnostics(self):
        config = tiny_config()
        _, batch = one_batch(config)
        batch.images[0, 0, 0, 0] = float("nan")
        model = build_network(config.network_spec(), 0)
        uparams = UncertaintyParams()
        opt = make_optimizer(model, uparams, config)
        with pytest.raises(RuntimeError, match="sigma_main"):
            train_step(model, uparams, opt, batch, config)


class TestFit:
    def test_smoke_descends_and_logs(self, tmp_path):
        samples, _ = make_synthetic_dataset(4, seed=0, size=64)
        config = tiny_config(total_epochs=200, lr_halving_period=100)
        ckpt, rows = fit(samples[:3], samples[3:], config, tmp_path / "run")
        assert os.path.exists(ckpt)
        assert len(rows) == 200
        first = np.mean([r[-1] for r in rows[:10]])
        last = np.mean([r[-1] for r in rows[-10:]])
        assert last < first
        with open(tmp_path / "run" / "training_log.csv") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            assert header == ["step", "lr", "l_main", "l_aux", "sigma_main",
                              "sigma_aux", "combined"]
            logged = list(reader)
        assert len(logged) == 200
        assert os.path.exists(tmp_path / "run" / "config.txt")

    def test_deterministic_given_seed(self, tmp_path):
        samples, _ = make_synthetic_dataset(3, seed=1, size=64)
        config = tiny_config(total_epochs=20)
        _, rows_a = fit(samples[:2], None, config, tmp_path / "a")
        samples, _ = make_synthetic_dataset(3, seed=1, size=64)
        _, rows_b = fit(samples[:2], None, config, tmp_path / "b")
        assert [r[-1] for r in rows_a] == [r[-1] for r in rows_b]

    def test_sigma_trajectory_positive_finite(self, tmp_path):
        samples, _ = make_synthetic_dataset(3, seed=2, size=64)
        config = tiny_config(total_epochs=60)
        _, rows = fit(samples[:2], None, config, tmp_path / "run")
        sig_aux = np.array([r[5] for r in rows])
        sig_main = np.array([r[4] for r in rows])
        assert np.isfinite(sig_aux).all() and (sig_aux > 0).all()
        assert np.isfinite(sig_main).all() and (sig_main > 0).all()

    def test_lr_column_follows_schedule(self, tmp_path):
        samples, _ = make_synthetic_dataset(3, seed=3, size=64)
        config = tiny_config(total_epochs=40, lr_halving_period=20)
        _, rows = fit(samples[:2], None, config, tmp_path / "run")
        lrs = sorted({r[1] for r in rows})
        assert lrs == [config.lr / 2, config.lr]

    def test_best_checkpoint_saved(self, tmp_path):
        samples, _ = make_synthetic_dataset(4, seed=4, size=64)
        config = tiny_config(total_epochs=20, eval_interval=10)
        fit(samples[:3], samples[3:], config, tmp_path / "run")
        assert os.path.exists(tmp_path / "run" / "checkpoint_best.pt")


class TestCheckpoint:
    def test_round_trip_one_step_bitwise(self, tmp_path):
        config = tiny_config()
        samples, batch = one_batch(config, seed=5)
        torch.manual_seed(config.seed)
        model = build_network(config.network_spec(), config.seed)
        uparams = UncertaintyParams()
        opt = make_optimizer(model, uparams, config)
        rng = np.random.default_rng(config.seed)
        for _ in range(3):
            batch = make_batch(samples, 2, True, rng, 32)
            train_step(model, uparams, opt, batch, config)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, model, uparams, opt, 3, config, rng)

        batch = make_batch(samples, 2, True, rng, 32)
        bd_direct = train_step(model, uparams, opt, batch, config)

        model2, uparams2, opt2, rng2, epoch, config2 = restore(load_checkpoint(path))
        assert epoch == 3
        batch2 = make_batch(samples, 2, True, rng2, 32)
        assert torch.equal(batch.images, batch2.images)
        bd_resumed = train_step(model2, uparams2, opt2, batch2, config2)
        assert bd_resumed.combined == bd_direct.combined
        for p1, p2 in zip(model.parameters(), model2.parameters()):
            assert torch.equal(p1, p2)

    def test_fit_resume_continues(self, tmp_path):
        samples, _ = make_synthetic_dataset(3, seed=6, size=64)
        config = tiny_config(total_epochs=10)
        out = tmp_path / "run"
        fit(samples[:2], None, config, out)
        config2 = tiny_config(total_epochs=20)
        _, rows = fit(samples[:2], None, config2, out, resume=True)
        assert rows[0][0] == 10  # picks up at the saved step
        with open(out / "training_log.csv") as fh:
            assert sum(1 for _ in fh) == 21  # header + 10 + 10

    def test_version_check(self, tmp_path):
        path = tmp_path / "bad.pt"
        torch.save({"format_version": 999}, path)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_spec_embedded(self, tmp_path):
        config = tiny_config()
        samples, batch = one_batch(config, seed=7)
        model = build_network(config.network_spec(), 0)
        uparams = UncertaintyParams()
        opt = make_optimizer(model, uparams, config)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, model, uparams, opt, 0, config,
                        np.random.default_rng(0))
        state = load_checkpoint(path)
        assert state["network_spec"]["channels"] == (2, 4, 8, 16)
        assert state["config_hash"] == config.hash()
