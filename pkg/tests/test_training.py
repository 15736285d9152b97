import numpy as np
import pytest

from pointnce.data import synth_dataset
from pointnce.encoder import embed, init_params
from pointnce.objective import bank_init
from pointnce.training import (
    AdamState,
    Checkpoint,
    RngStreams,
    RunConfig,
    adam_step,
    default_rotate_anchor,
    format_run_config,
    load_checkpoint,
    parse_run_config,
    save_checkpoint,
    train,
)


def small_config(**overrides):
    base = dict(
        dataset="",
        epochs=2,
        batch_size=8,
        points_per_cloud=32,
        lr=1e-3,
        tau=0.07,
        negatives=16,
        loss="nce",
        view="unaligned",
        layer_tap=7,
        seed=0,
    )
    base.update(overrides)
    return RunConfig(**base).validate()


def small_dataset(seed=0, per_class=8, n_points=32, aligned=False):
    return synth_dataset(
        ["sphere", "cube"], per_class, n_points, 0.2, aligned, np.random.default_rng(seed)
    )


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = init_params(np.random.default_rng(0))
        before = params.copy()
        state = AdamState.zeros(params)
        adam_step(params, params.zeros_like(), state, lr=0.1)
        assert state.step == 1
        for (_, a), (_, b) in zip(params.named_tensors(), before.named_tensors()):
            np.testing.assert_array_equal(a, b)

    def test_constant_gradient_step_magnitude(self):
        # with a constant gradient the bias-corrected update approaches lr
        params = init_params(np.random.default_rng(1))
        state = AdamState.zeros(params)
        grads = params.zeros_like()
        grads.critic_w[:] = 0.5
        prev = params.critic_w.copy()
        for _ in range(200):
            adam_step(params, grads, state, lr=0.01)
        delta = prev - params.critic_w
        np.testing.assert_allclose(delta / 200, 0.01, rtol=0.05)

    def test_single_step_hand_computed(self):
        # m=0.1g, v=0.001g^2; bias-corrected ratio is g/|g| = 1
        params = init_params(np.random.default_rng(2))
        state = AdamState.zeros(params)
        grads = params.zeros_like()
        grads.biases[6][:] = 1.0
        before = params.biases[6].copy()
        adam_step(params, grads, state, lr=0.1, betas=(0.9, 0.999), eps=1e-8)
        expected = before - 0.1 * (0.1 / (1 - 0.9)) / (np.sqrt(0.001 / (1 - 0.999)) + 1e-8)
        np.testing.assert_allclose(params.biases[6], expected, atol=1e-12)

    def test_nan_gradient_diverges(self):
        params = init_params(np.random.default_rng(3))
        grads = params.zeros_like()
        grads.weights[0][0, 0] = np.nan
        with pytest.raises(RuntimeError, match="diverged"):
            adam_step(params, grads, AdamState.zeros(params), lr=0.1)


class TestRunConfig:
    def test_parse_round_trip(self):
        cfg = small_config(lr=5e-4, view="chunk(cosine,24)", loss="infonce")
        parsed = parse_run_config(format_run_config(cfg))
        assert parsed == cfg

    def test_comments_and_whitespace(self):
        cfg = parse_run_config("# comment\nepochs = 3\n\nlr = 0.01  # trailing\n")
        assert cfg.epochs == 3 and cfg.lr == 0.01

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown key"):
            parse_run_config("wat = 1\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ValueError, match="bad value"):
            parse_run_config("epochs = soon\n")

    def test_invalid_settings_rejected(self):
        with pytest.raises(ValueError):
            small_config(layer_tap=5)
        with pytest.raises(ValueError):
            small_config(loss="triplet")
        with pytest.raises(ValueError):
            small_config(tau=0.0)

    def test_rotate_anchor_derived_from_view(self):
        assert parse_run_config("view = unaligned\n").rotate_anchor is True
        assert parse_run_config("view = chunk(cosine,16)\n").rotate_anchor is False
        assert parse_run_config("view = unaligned\nrotate_anchor = false\n").rotate_anchor is False
        assert default_rotate_anchor("rotate_z") is False


class TestCheckpointFormat:
    def make_checkpoint(self, seed=0, with_bank=True):
        params = init_params(np.random.default_rng(seed))
        adam = AdamState.zeros(params)
        adam.step = 7
        bank = bank_init(5, 128, np.random.default_rng(seed + 1)) if with_bank else None
        if bank is not None:
            bank.calibrate_z(np.ones(3) * 2.0)
        streams = RngStreams.from_seed(seed)
        streams.view.random(13)  # advance so the state is nontrivial
        return Checkpoint(
            config=small_config(),
            params=params,
            adam=adam,
            bank=bank,
            epoch=3,
            rng_state=streams.state(),
            best_loss=1.5,
            stale_epochs=2,
        )

    def test_round_trip_bit_exact(self, tmp_path):
        ckpt = self.make_checkpoint()
        path = tmp_path / "c.i3dc"
        save_checkpoint(path, ckpt)
        back = load_checkpoint(path)
        assert back.config == ckpt.config
        assert back.epoch == 3 and back.adam.step == 7
        assert back.best_loss == 1.5 and back.stale_epochs == 2
        assert back.bank.z == ckpt.bank.z and back.bank.momentum == ckpt.bank.momentum
        np.testing.assert_array_equal(back.bank.rows, ckpt.bank.rows)
        assert back.rng_state == ckpt.rng_state
        for (_, a), (_, b) in zip(back.params.named_tensors(), ckpt.params.named_tensors()):
            np.testing.assert_array_equal(a, b)
        probe = np.random.default_rng(0).standard_normal((16, 3))
        np.testing.assert_array_equal(embed(back.params, probe), embed(ckpt.params, probe))

    def test_save_is_deterministic(self, tmp_path):
        ckpt = self.make_checkpoint()
        save_checkpoint(tmp_path / "a.i3dc", ckpt)
        save_checkpoint(tmp_path / "b.i3dc", ckpt)
        assert (tmp_path / "a.i3dc").read_bytes() == (tmp_path / "b.i3dc").read_bytes()

    def test_no_bank_round_trip(self, tmp_path):
        ckpt = self.make_checkpoint(with_bank=False)
        save_checkpoint(tmp_path / "c.i3dc", ckpt)
        assert load_checkpoint(tmp_path / "c.i3dc").bank is None

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.i3dc"
        path.write_bytes(b"WHAT" + b"\x00" * 64)
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "c.i3dc"
        save_checkpoint(path, self.make_checkpoint())
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 40])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "c.i3dc"
        save_checkpoint(path, self.make_checkpoint())
        blob = bytearray(path.read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)


class TestTrainLoop:
    def test_zero_lr_keeps_params(self):
        ds = small_dataset()
        cfg = small_config(lr=1e-300, epochs=1)  # effectively zero but valid
        result = train(ds, cfg)
        fresh = init_params(RngStreams.from_seed(cfg.seed).init)
        for (_, a), (_, b) in zip(result.params.named_tensors(), fresh.named_tensors()):
            np.testing.assert_allclose(a, b, atol=1e-290)
        assert np.isfinite(result.epoch_losses[0])

    def test_single_instance_infonce_rejected(self):
        ds = small_dataset(per_class=1)
        ds.instances = ds.instances[:1]
        cfg = small_config(loss="infonce", batch_size=1, epochs=1)
        with pytest.raises(ValueError, match="at least two"):
            train(ds, cfg)

    def test_nce_loss_decreases_on_synthetic_data(self):
        # 50-instance dataset, 20 epochs: mean over 3 seeds must improve
        firsts, lasts = [], []
        for seed in (0, 1, 2):
            ds = synth_dataset(
                ["sphere", "cube", "cylinder", "cone", "torus"],
                10,
                32,
                0.2,
                False,
                np.random.default_rng(100 + seed),
            )
            cfg = small_config(epochs=20, batch_size=10, lr=1e-3, negatives=16, seed=seed)
            result = train(ds, cfg)
            firsts.append(result.epoch_losses[0])
            lasts.append(result.epoch_losses[-1])
        assert np.mean(lasts) < np.mean(firsts)

    def test_losses_finite_and_bank_unit(self):
        ds = small_dataset()
        result = train(ds, small_config(epochs=3))
        assert all(np.isfinite(x) for x in result.epoch_losses)
        np.testing.assert_allclose(np.linalg.norm(result.bank.rows, axis=1), 1.0, atol=1e-6)

    def test_infonce_has_no_bank(self):
        result = train(small_dataset(), small_config(loss="infonce", epochs=1))
        assert result.bank is None

    def test_wrong_point_count_rejected(self):
        ds = small_dataset(n_points=16)
        with pytest.raises(ValueError, match="config expects"):
            train(ds, small_config(epochs=1))

    def test_dataset_smaller_than_batch_rejected(self):
        ds = small_dataset(per_class=2)
        with pytest.raises(ValueError, match="smaller than one batch"):
            train(ds, small_config(batch_size=64, epochs=1))


class TestDeterminismAndResume:
    def test_identical_seed_identical_checkpoint_bytes(self, tmp_path):
        ds = small_dataset()
        for name in ("a", "b"):
            train(ds, small_config(epochs=2), out_path=tmp_path / f"{name}.i3dc")
        assert (tmp_path / "a.i3dc").read_bytes() == (tmp_path / "b.i3dc").read_bytes()

    def test_different_seed_differs(self, tmp_path):
        ds = small_dataset()
        train(ds, small_config(epochs=1, seed=0), out_path=tmp_path / "a.i3dc")
        train(ds, small_config(epochs=1, seed=1), out_path=tmp_path / "b.i3dc")
        assert (tmp_path / "a.i3dc").read_bytes() != (tmp_path / "b.i3dc").read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        ds = small_dataset()
        train(ds, small_config(epochs=4), out_path=tmp_path / "full.i3dc")

        cfg_half = small_config(epochs=2)
        train(ds, cfg_half, out_path=tmp_path / "half.i3dc")
        half = load_checkpoint(tmp_path / "half.i3dc")
        # continue to the full budget from the saved state
        half.config = small_config(epochs=4)
        train(ds, half.config, out_path=tmp_path / "resumed.i3dc", resume=half)
        assert (
            (tmp_path / "resumed.i3dc").read_bytes() == (tmp_path / "full.i3dc").read_bytes()
        )

    def test_resume_matches_for_infonce_too(self, tmp_path):
        ds = small_dataset()
        cfg = small_config(epochs=3, loss="infonce")
        train(ds, cfg, out_path=tmp_path / "full.i3dc")
        train(ds, small_config(epochs=1, loss="infonce"), out_path=tmp_path / "one.i3dc")
        ckpt = load_checkpoint(tmp_path / "one.i3dc")
        ckpt.config = cfg
        train(ds, cfg, out_path=tmp_path / "resumed.i3dc", resume=ckpt)
        assert (tmp_path / "resumed.i3dc").read_bytes() == (tmp_path / "full.i3dc").read_bytes()


class TestEarlyStopping:
    def test_stops_after_patience_epochs_without_improvement(self):
        ds = small_dataset()
        cfg = small_config(epochs=60, lr=1e-300, early_stop_patience=3)
        result = train(ds, cfg)
        # constant loss: first epoch sets the best, then patience runs out
        assert result.stopped_early
        assert len(result.epoch_losses) <= 10


class TestRngStreams:
    def test_state_round_trip(self):
        streams = RngStreams.from_seed(5)
        streams.view.random(7)
        state = streams.state()
        value_next = streams.negative.random()
        restored = RngStreams.from_seed(5)
        restored.set_state(state)
        assert restored.negative.random() == value_next

    def test_streams_are_independent(self):
        a = RngStreams.from_seed(1)
        b = RngStreams.from_seed(1)
        b.negative.random(100)  # consuming one stream leaves others aligned
        np.testing.assert_array_equal(a.view.random(5), b.view.random(5))
