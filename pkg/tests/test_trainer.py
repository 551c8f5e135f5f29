"""Early stopping, the training loop, checkpoint IO, and fine-tuning."""

import json

import numpy as np
import pytest
import torch

from suesr import (
    Checkpoint,
    DiscriminatorConfig,
    EarlyStopState,
    GeneratorConfig,
    LossWeights,
    TrainConfig,
    TrainingBackends,
    build_manifest,
    early_stop_update,
    finetune,
    load_checkpoint,
    load_split_arrays,
    prepare_dataset,
    save_checkpoint,
    synthesize_toy_dataset,
    train,
)
from suesr.errors import (
    CheckpointError,
    ConfigError,
    DataError,
    IncompatibilityError,
)
from suesr.objectives import RandomConvFeatureExtractor
from suesr.semantics import ThresholdSegmenter
from suesr.trainer import architecture_hash

GEN_CFG = GeneratorConfig(base_channels=8, num_rrdb=1, growth_channels=4,
                          dense_blocks_per_rrdb=1, convs_per_dense=2,
                          dropout_rate=0.1)
DISC_CFG = DiscriminatorConfig(base_channels=4, input_size=32)
WEIGHTS = LossWeights(w_pixel=1.0, w_perceptual=0.05, w_adversarial=0.001,
                      w_semantic=0.02)


def make_backends():
    return TrainingBackends(segmenter=ThresholdSegmenter(),
                            features=RandomConvFeatureExtractor(0))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("raw")
    prep = tmp_path_factory.mktemp("prep")
    synthesize_toy_dataset(root, count=8, hr_size=32, seed=21)
    manifest = build_manifest(root, (0.5, 0.25, 0.25), seed=21)
    materialized = prepare_dataset(manifest, prep, hr_size=32, factor=4)
    return materialized, prep


@pytest.fixture(scope="module")
def tiny_result(corpus):
    manifest, prep = corpus
    config = TrainConfig(max_epochs=2, patience=10, batch_size=4,
                         lr_generator=1e-4, lr_discriminator=1e-4, seed=3)
    return train(manifest, prep, GEN_CFG, DISC_CFG, WEIGHTS, config,
                 make_backends(), config_hash="cafe0123")


class TestEarlyStop:
    def test_documented_walkthrough(self):
        # values 10, 9, 9 with patience 2: stop after the third epoch,
        # best remains the first
        state = EarlyStopState()
        state, stop = early_stop_update(state, 10.0, 1, patience=2)
        assert not stop and state.best_epoch == 1
        state, stop = early_stop_update(state, 9.0, 2, patience=2)
        assert not stop and state.epochs_since_improvement == 1
        state, stop = early_stop_update(state, 9.0, 3, patience=2)
        assert stop
        assert state.best_value == 10.0 and state.best_epoch == 1

    def test_equal_value_is_not_improvement(self):
        state = EarlyStopState()
        state, _ = early_stop_update(state, 5.0, 1, patience=3)
        state, _ = early_stop_update(state, 5.0, 2, patience=3)
        assert state.best_epoch == 1
        assert state.epochs_since_improvement == 1

    def test_improvement_resets_counter(self):
        state = EarlyStopState()
        state, _ = early_stop_update(state, 1.0, 1, patience=2)
        state, stop = early_stop_update(state, 0.5, 2, patience=2)
        assert not stop
        state, stop = early_stop_update(state, 2.0, 3, patience=2)
        assert not stop and state.epochs_since_improvement == 0
        assert state.best_epoch == 3 and state.best_value == 2.0

    def test_patience_validation(self):
        with pytest.raises(ConfigError):
            early_stop_update(EarlyStopState(), 1.0, 1, patience=0)

    def test_random_sequences_match_reference(self):
        rng = np.random.default_rng(77)
        for _ in range(100):
            patience = int(rng.integers(1, 5))
            # small integer grid so ties happen often
            values = (rng.integers(0, 5, size=int(rng.integers(1, 15))) / 2.0)

            best_value, best_epoch, counter, stop_at = float("-inf"), 0, 0, None
            for e, v in enumerate(values, start=1):
                if v > best_value:
                    best_value, best_epoch, counter = float(v), e, 0
                else:
                    counter += 1
                    if counter >= patience:
                        stop_at = e
                        break

            state = EarlyStopState()
            stopped = None
            for e, v in enumerate(values, start=1):
                state, stop = early_stop_update(state, float(v), e, patience)
                if stop:
                    stopped = e
                    break
            assert stopped == stop_at
            assert state.best_value == best_value
            assert state.best_epoch == best_epoch


class TestTrainConfig:
    def test_zero_epochs_allowed(self):
        TrainConfig(max_epochs=0).validate()

    @pytest.mark.parametrize("kwargs", [
        {"max_epochs": -1},
        {"patience": 0},
        {"batch_size": 0},
        {"lr_generator": 0.0},
        {"lr_discriminator": -1e-4},
        {"finetune_lr": 0.0},
        {"adam_betas": (0.9, 1.0)},
        {"adam_betas": (-0.1, 0.999)},
        {"seed": -1},
        {"monitor": "train_loss"},
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs).validate()


class TestTraining:
    def test_history_records(self, tiny_result):
        assert len(tiny_result.history) == 2
        expected_keys = {"epoch", "steps", "d_loss", "g_pixel", "g_perceptual",
                         "g_adversarial", "g_semantic", "g_total", "val_psnr",
                         "improved"}
        for record in tiny_result.history:
            assert set(record) == expected_keys
        assert tiny_result.history[0]["epoch"] == 1
        # 4 train images, batch 4: one step per epoch
        assert tiny_result.history[0]["steps"] == 1
        assert tiny_result.stopped_epoch == 2

    def test_checkpoint_tracks_best_monitor(self, tiny_result):
        vals = [h["val_psnr"] for h in tiny_result.history]
        assert tiny_result.checkpoint.monitor_value == max(vals)
        assert tiny_result.best_epoch == 1 + int(np.argmax(vals))
        assert tiny_result.checkpoint.config_hash == "cafe0123"

    def test_replay_is_bit_identical(self, corpus, tiny_result):
        manifest, prep = corpus
        config = TrainConfig(max_epochs=2, patience=10, batch_size=4,
                             lr_generator=1e-4, lr_discriminator=1e-4, seed=3)
        again = train(manifest, prep, GEN_CFG, DISC_CFG, WEIGHTS, config,
                      make_backends(), config_hash="cafe0123")
        assert again.history == tiny_result.history
        for name in tiny_result.checkpoint.generator_params.names():
            a = tiny_result.checkpoint.generator_params[name]
            b = again.checkpoint.generator_params[name]
            assert np.array_equal(a, b), name
        for name in tiny_result.checkpoint.discriminator_params.names():
            a = tiny_result.checkpoint.discriminator_params[name]
            b = again.checkpoint.discriminator_params[name]
            assert np.array_equal(a, b), name

    def test_different_seed_changes_weights(self, corpus, tiny_result):
        manifest, prep = corpus
        config = TrainConfig(max_epochs=1, patience=10, batch_size=4, seed=4)
        other = train(manifest, prep, GEN_CFG, DISC_CFG, WEIGHTS, config,
                      make_backends())
        name = tiny_result.checkpoint.generator_params.names()[0]
        assert not np.array_equal(tiny_result.checkpoint.generator_params[name],
                                  other.checkpoint.generator_params[name])

    def test_discriminator_size_mismatch_rejected(self, corpus):
        manifest, prep = corpus
        bad_disc = DiscriminatorConfig(base_channels=4, input_size=64)
        config = TrainConfig(max_epochs=1, patience=1, batch_size=4)
        with pytest.raises(ConfigError, match="input_size"):
            train(manifest, prep, GEN_CFG, bad_disc, WEIGHTS, config,
                  make_backends())


class TestCheckpointIO:
    def test_round_trip(self, tiny_result, tmp_path):
        ckpt = tiny_result.checkpoint
        save_checkpoint(ckpt, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")

        assert loaded.epoch == ckpt.epoch
        assert loaded.monitor_value == pytest.approx(ckpt.monitor_value, abs=1e-7)
        assert loaded.config_hash == "cafe0123"
        assert loaded.generator_config == ckpt.generator_config
        assert loaded.discriminator_config == ckpt.discriminator_config
        assert loaded.arch_hash() == ckpt.arch_hash()

        for name in ckpt.generator_params.names():
            assert np.allclose(loaded.generator_params[name],
                               ckpt.generator_params[name], atol=1e-7), name
        for name in ckpt.discriminator_params.names():
            assert np.allclose(
                loaded.discriminator_params[name].astype(np.float64),
                ckpt.discriminator_params[name].astype(np.float64),
                atol=1e-7), name
        for key, arr in ckpt.optimizer_g.items():
            assert np.allclose(loaded.optimizer_g[key], arr, atol=1e-7), key
        assert loaded.optimizer_g_meta["lr"] == pytest.approx(1e-4)

    def test_batchnorm_buffers_survive(self, tiny_result, tmp_path):
        ckpt = tiny_result.checkpoint
        save_checkpoint(ckpt, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        names = loaded.discriminator_params.names()
        assert any("running_mean" in n for n in names)
        tracked = [n for n in names if "num_batches_tracked" in n]
        assert tracked
        assert loaded.discriminator_params[tracked[0]].dtype == np.int64

    def test_save_is_deterministic(self, tiny_result, tmp_path):
        save_checkpoint(tiny_result.checkpoint, tmp_path / "a")
        save_checkpoint(tiny_result.checkpoint, tmp_path / "b")
        for fname in ("weights.bin", "index.json", "meta.json"):
            assert (tmp_path / "a" / fname).read_bytes() == \
                (tmp_path / "b" / fname).read_bytes()

    def test_rebuilt_models_run(self, tiny_result):
        gen = tiny_result.checkpoint.build_generator()
        disc = tiny_result.checkpoint.build_discriminator()
        gen.eval()
        disc.eval()
        with torch.no_grad():
            sr = gen(torch.rand(1, 3, 8, 8))
            logit = disc(sr)
        assert sr.shape == (1, 3, 32, 32)
        assert logit.shape == (1, 1)

    def test_missing_file(self, tiny_result, tmp_path):
        save_checkpoint(tiny_result.checkpoint, tmp_path / "ck")
        (tmp_path / "ck" / "meta.json").unlink()
        with pytest.raises(CheckpointError, match="missing meta.json"):
            load_checkpoint(tmp_path / "ck")

    def test_truncated_weights(self, tiny_result, tmp_path):
        save_checkpoint(tiny_result.checkpoint, tmp_path / "ck")
        blob = (tmp_path / "ck" / "weights.bin").read_bytes()
        (tmp_path / "ck" / "weights.bin").write_bytes(blob[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck")

    def test_bad_offset(self, tiny_result, tmp_path):
        save_checkpoint(tiny_result.checkpoint, tmp_path / "ck")
        index = json.loads((tmp_path / "ck" / "index.json").read_text())
        index[1]["offset"] += 4
        (tmp_path / "ck" / "index.json").write_text(json.dumps(index))
        with pytest.raises(CheckpointError, match="offset mismatch"):
            load_checkpoint(tmp_path / "ck")

    def test_unknown_section(self, tiny_result, tmp_path):
        save_checkpoint(tiny_result.checkpoint, tmp_path / "ck")
        index = json.loads((tmp_path / "ck" / "index.json").read_text())
        index[0]["name"] = "bogus/" + index[0]["name"].partition("/")[2]
        (tmp_path / "ck" / "index.json").write_text(json.dumps(index))
        with pytest.raises(CheckpointError, match="unknown checkpoint section"):
            load_checkpoint(tmp_path / "ck")

    def test_corrupt_json(self, tiny_result, tmp_path):
        save_checkpoint(tiny_result.checkpoint, tmp_path / "ck")
        (tmp_path / "ck" / "index.json").write_text("{not json")
        with pytest.raises(CheckpointError, match="corrupt JSON"):
            load_checkpoint(tmp_path / "ck")

    def test_arch_hash_mismatch(self, tiny_result, tmp_path):
        save_checkpoint(tiny_result.checkpoint, tmp_path / "ck")
        meta = json.loads((tmp_path / "ck" / "meta.json").read_text())
        meta["arch_hash"] = "0" * 64
        (tmp_path / "ck" / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(CheckpointError, match="arch_hash"):
            load_checkpoint(tmp_path / "ck")


class TestFinetune:
    def test_zero_epochs_preserves_weights(self, corpus, tiny_result):
        manifest, prep = corpus
        config = TrainConfig(max_epochs=0, patience=1, batch_size=4, seed=9)
        result = finetune(tiny_result.checkpoint, manifest, prep, WEIGHTS,
                          config, make_backends())
        assert result.history == []
        assert result.checkpoint.monitor_value is None
        for name in tiny_result.checkpoint.generator_params.names():
            assert np.array_equal(result.checkpoint.generator_params[name],
                                  tiny_result.checkpoint.generator_params[name])

    def test_uses_finetune_lr(self, corpus, tiny_result):
        manifest, prep = corpus
        config = TrainConfig(max_epochs=1, patience=1, batch_size=4, seed=9,
                             finetune_lr=1e-5)
        result = finetune(tiny_result.checkpoint, manifest, prep, WEIGHTS,
                          config, make_backends())
        assert result.checkpoint.optimizer_g_meta["lr"] == pytest.approx(1e-5)
        assert result.checkpoint.optimizer_d_meta["lr"] == pytest.approx(1e-5)

    def test_architecture_mismatch_rejected(self, corpus, tiny_result):
        manifest, prep = corpus
        other = GeneratorConfig(base_channels=16, num_rrdb=1,
                                growth_channels=4, dense_blocks_per_rrdb=1,
                                convs_per_dense=2)
        config = TrainConfig(max_epochs=0, patience=1, batch_size=4)
        with pytest.raises(IncompatibilityError):
            finetune(tiny_result.checkpoint, manifest, prep, WEIGHTS, config,
                     make_backends(), generator_config=other)

    def test_matching_architecture_accepted(self, corpus, tiny_result):
        manifest, prep = corpus
        config = TrainConfig(max_epochs=0, patience=1, batch_size=4)
        result = finetune(tiny_result.checkpoint, manifest, prep, WEIGHTS,
                          config, make_backends(),
                          generator_config=GEN_CFG,
                          discriminator_config=DISC_CFG)
        assert result.checkpoint.arch_hash() == tiny_result.checkpoint.arch_hash()

    def test_architecture_hash_sensitivity(self):
        base = architecture_hash(GEN_CFG, DISC_CFG)
        assert base == architecture_hash(GEN_CFG, DISC_CFG)
        wider = GeneratorConfig(base_channels=16, num_rrdb=1,
                                growth_channels=4, dense_blocks_per_rrdb=1,
                                convs_per_dense=2, dropout_rate=0.1)
        assert architecture_hash(wider, DISC_CFG) != base


class TestLoadSplitArrays:
    def test_shapes(self, corpus):
        manifest, prep = corpus
        lr, hr = load_split_arrays(manifest, prep, "train")
        assert lr.shape == (4, 3, 8, 8)
        assert hr.shape == (4, 3, 32, 32)
        assert lr.dtype == np.float32

    def test_unknown_split(self, corpus):
        manifest, prep = corpus
        with pytest.raises(DataError, match="no entries"):
            load_split_arrays(manifest, prep, "holdout")

    def test_unprepared_manifest_rejected(self, tmp_path):
        root = tmp_path / "raw"
        synthesize_toy_dataset(root, count=4, hr_size=32, seed=1)
        manifest = build_manifest(root, (0.5, 0.25, 0.25), seed=1)
        with pytest.raises(DataError, match="no LR path"):
            load_split_arrays(manifest, root, "train")


class TestCheckpointConstruction:
    def test_checkpoint_default_fields(self, tiny_result):
        ckpt = Checkpoint(
            generator_config=GEN_CFG,
            discriminator_config=DISC_CFG,
            generator_params=tiny_result.checkpoint.generator_params,
            discriminator_params=tiny_result.checkpoint.discriminator_params,
        )
        assert ckpt.epoch == 0
        assert ckpt.monitor_value is None
        assert ckpt.optimizer_g == {}
