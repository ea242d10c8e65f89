from dataclasses import replace

import numpy as np
import pytest

from granular_ot.classifier import compute_metrics
from granular_ot.errors import ConfigError, DataError, DivergenceError, FormatError
from granular_ot.optim import Adam
from granular_ot.synthetic import GeneratorConfig, generate_dataset, write_dataset
from granular_ot.trainer import (
    Checkpoint,
    TrainConfig,
    build_model,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    evaluate,
    load_checkpoint,
    predict,
    save_checkpoint,
    split_fold,
    train,
)

GEN = GeneratorConfig(grid=4, d_v=8, train_per_class=8, test_per_class=4, signal_strength=3.0)
TINY = TrainConfig(shots=4, epochs=3, lr=1e-2, folds=2, M=2, N_p=4, K=2, context_len=4, token_dim=4)


@pytest.fixture(scope="module")
def bags():
    return generate_dataset(GEN)


@pytest.fixture(scope="module")
def data_dir(bags, tmp_path_factory):
    path = tmp_path_factory.mktemp("data")
    write_dataset(bags, str(path), GEN.classes)
    return str(path)


@pytest.fixture(scope="module")
def trained(data_dir):
    return train(TINY, data_dir)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.weight_decay, cfg.epochs, cfg.batch_size) == (9e-6, 1e-5, 200, 1)
        assert (cfg.alpha, cfg.M, cfg.sinkhorn_lambda, cfg.sinkhorn_iterations, cfg.folds) == (0.2, 4, 0.1, 100, 5)
        assert cfg.sinkhorn().uot is None

    @pytest.mark.parametrize(
        "kw",
        [dict(shots=0), dict(lr=-1.0), dict(feature_mode="pca"), dict(uot_rho1=1.0), dict(distance="l1"), dict(alpha=2.0), dict(sinkhorn_lambda=0.0)],
    )
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestFolds:
    def test_split_sizes(self, bags):
        shots, val, test = split_fold(bags, TINY, 0, 2)
        assert len(shots) == 8 and len(val) == 4 and len(test) == 8
        assert all(b.split == "test" for b in test)

    def test_folds_resample(self, bags):
        a = {b.slide_id for b in split_fold(bags, TINY, 0, 2)[0]}
        b = {b.slide_id for b in split_fold(bags, TINY, 1, 2)[0]}
        assert a != b

    def test_not_enough_slides(self, bags):
        with pytest.raises(DataError, match="shots"):
            split_fold(bags, replace(TINY, shots=7), 0, 2)

    def test_empty_test_split(self, bags):
        with pytest.raises(DataError, match="no test"):
            split_fold([b for b in bags if b.split == "train"], TINY, 0, 2)


class TestTrain:
    def test_reports_every_fold(self, trained):
        assert len(trained.folds) == 2 and len(trained.metrics.folds) == 2
        for fold in trained.folds:
            assert 0 <= fold.checkpoint.best_epoch < TINY.epochs
            assert len(fold.trajectory) == 2 * TINY.epochs
            assert fold.trajectory_csv().startswith("epoch,split,loss,f1\n0,train,")

    def test_same_seed_same_csv(self, trained, data_dir):
        again = train(TINY, data_dir)
        assert again.metrics.to_csv() == trained.metrics.to_csv()
        assert checkpoint_to_bytes(again.folds[0].checkpoint) == checkpoint_to_bytes(trained.folds[0].checkpoint)

    def test_zero_lr_matches_untrained(self, bags):
        cfg = replace(TINY, lr=0.0, folds=1)
        res = train(cfg, bags)
        model = build_model(cfg, 2, GEN.d_v, fold=0)
        test = [b for b in bags if b.split == "test"]
        scores, _ = predict(model, [(model.prepare(b), b.label) for b in test])
        assert res.metrics.folds[0] == compute_metrics(scores, [b.label for b in test])

    def test_evaluate_is_idempotent(self, trained, data_dir):
        for fold in trained.folds:
            assert evaluate(fold.checkpoint, data_dir) == fold.test

    def test_weight_decay_only_changes_values(self, bags):
        a = train(replace(TINY, folds=1), bags).folds[0].checkpoint.params
        b = train(replace(TINY, folds=1, weight_decay=0.1), bags).folds[0].checkpoint.params
        assert a.keys() == b.keys() and any(not np.array_equal(a[k], b[k]) for k in a)

    def test_batch_accumulation(self, bags):
        res = train(replace(TINY, folds=1, batch_size=4), bags)
        assert np.isfinite(res.metrics.mean().auc)

    def test_adaptor_mode(self, bags):
        cfg = replace(TINY, folds=1, epochs=1, feature_mode="adaptor", adaptor_epochs=1, adaptor_pairs=128)
        res = train(cfg, bags)
        ckpt = res.folds[0].checkpoint
        assert any(k.startswith("adaptor.img.") for k in ckpt.frozen)
        assert evaluate(ckpt, bags) == res.folds[0].test

    def test_divergence_reports_epoch_and_parameters(self, bags):
        with pytest.raises(DivergenceError, match=r"epoch 0 on slide train_c\d_\d+.*largest parameter"):
            train(replace(TINY, folds=1, lr=1e300), bags)


class TestShotsVersusTest:
    def test_training_accuracy_dominates_majority(self):
        gen = GeneratorConfig(grid=4, d_v=8, train_per_class=10, test_per_class=10, signal_strength=1.0, noise_sigma=1.5)
        wins = 0
        for seed in range(5):
            bags = generate_dataset(replace(gen, seed=seed))
            cfg = replace(TINY, folds=1, epochs=8, seed=seed)
            res = train(cfg, bags)
            model = res.folds[0].checkpoint.model()
            shots, _, test = split_fold(bags, cfg, 0, 2)
            acc = lambda part: compute_metrics(
                predict(model, [(model.prepare(b), b.label) for b in part])[0], [b.label for b in part]
            ).acc
            wins += acc(shots) >= acc(test)
        assert wins >= 3


class TestEvaluate:
    def test_dimension_mismatch_prints_both(self, trained):
        other = generate_dataset(replace(GEN, d_v=6))
        with pytest.raises(DataError, match=r"d_v=8.*d_v=6"):
            evaluate(trained.folds[0].checkpoint, other)

    def test_empty_test_split(self, trained, bags):
        with pytest.raises(DataError, match="no test"):
            evaluate(trained.folds[0].checkpoint, [b for b in bags if b.split == "train"])


class TestCheckpoint:
    def test_round_trip_restores_forward(self, trained, data_dir, tmp_path):
        ckpt = trained.folds[1].checkpoint
        path = tmp_path / "c.ckpt"
        save_checkpoint(ckpt, str(path))
        back = load_checkpoint(str(path))
        assert checkpoint_to_bytes(back) == path.read_bytes()
        assert back.config == ckpt.config and back.best_epoch == ckpt.best_epoch
        assert evaluate(back, data_dir) == evaluate(ckpt, data_dir)

    def test_random_round_trips(self):
        rng = np.random.default_rng(0)
        for i in range(10):
            ckpt = Checkpoint(
                config=replace(TINY, seed=i, lr=float(rng.random())),
                classes=int(rng.integers(2, 5)),
                d_v=int(rng.integers(1, 9)),
                params={f"p{j}": rng.normal(size=tuple(rng.integers(1, 4, size=rng.integers(0, 3)))) for j in range(4)},
                frozen={"w": rng.normal(size=(2, 3))},
                fold=i,
                best_epoch=int(rng.integers(0, 200)),
            )
            buf = checkpoint_to_bytes(ckpt)
            back = checkpoint_from_bytes(buf)
            assert checkpoint_to_bytes(back) == buf
            assert back.config == ckpt.config
            for k, v in ckpt.params.items():
                assert back.params[k].tobytes() == v.tobytes() and back.params[k].shape == v.shape

    def test_corrupted_magic(self, trained):
        buf = bytearray(checkpoint_to_bytes(trained.folds[0].checkpoint))
        buf[:5] = b"CKPT2"
        with pytest.raises(FormatError) as exc:
            checkpoint_from_bytes(bytes(buf))
        assert exc.value.exit_code == 3 and exc.value.offset == 0

    @pytest.mark.parametrize("keep", [0.1, 0.5, 0.999])
    def test_truncated(self, trained, keep):
        buf = checkpoint_to_bytes(trained.folds[0].checkpoint)
        with pytest.raises(FormatError) as exc:
            checkpoint_from_bytes(buf[: int(len(buf) * keep)])
        assert exc.value.offset is not None

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(str(tmp_path / "nope.ckpt"))


class TestAdam:
    def test_zero_decay_is_vanilla(self):
        rng = np.random.default_rng(1)
        w0, g = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        p = {"w": w0.copy()}
        Adam(p, lr=0.01, weight_decay=0.0).step({"w": g})
        m, v = 0.1 * g, 0.001 * g * g
        expected = w0 - 0.01 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
        assert p["w"].tobytes() == expected.tobytes()

    def test_decoupled_decay(self):
        p = {"w": np.array([2.0])}
        Adam(p, lr=0.1, weight_decay=0.5).step({"w": np.array([0.0])})
        assert p["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
