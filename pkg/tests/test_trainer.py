import numpy as np
import pytest
from conftest import tiny_dataset

from smcmix.dataset import ClassStats, Dataset, foreground_sampling_probs, split_classes, synth_balanced
from smcmix.model import init_model
from smcmix.tensor import ContractViolation
from smcmix.trainer import (
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    compensation_log_prior,
    evaluate,
    evaluate_params,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train,
)

SMALL = {"epochs": 3, "batch_size": 16, "encoder_widths": [32], "head_dim": 16, "decay_epochs": [2]}


def small_config(**kw):
    return TrainConfig.from_dict({**SMALL, **kw})


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.eta, c.tau, c.alpha, c.gamma, c.head_dim, c.decay_factor) == (0.1, 0.1, 1.0, 1.0, 128, 0.1)
        assert (c.epochs, c.lr, c.decay_epochs, c.batch_size) == (60, 0.1, [40, 50], 64)

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError) as exc:
            TrainConfig.from_dict({"eta": 0.1, "etta": 0.2})
        assert exc.value.key == "etta"

    @pytest.mark.parametrize("key,value", [("tau", 0), ("mix_op", "blend"), ("momentum", 1.0), ("epochs", 0)])
    def test_invalid_value_named(self, key, value):
        with pytest.raises(ConfigError) as exc:
            TrainConfig.from_dict({key: value})
        assert exc.value.key == key

    def test_thresholds_ordered(self):
        with pytest.raises(ConfigError, match="t_many"):
            TrainConfig(t_many=10, t_few=20)

    def test_hash_ignores_key_order(self):
        a = TrainConfig.from_dict({"eta": 0.3, "tau": 0.2})
        b = TrainConfig.from_dict({"tau": 0.2, "eta": 0.3})
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != a.replace(eta=0.4).config_hash()

    def test_lr_schedule(self):
        c = TrainConfig()
        assert [lr_at(c, e) for e in (0, 39, 40, 49, 50, 59)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001, 0.001])


class TestPrior:
    def test_blended_prior(self):
        stats = ClassStats.from_counts([100, 10, 1])
        q = foreground_sampling_probs([100, 10, 1], 1.0)
        np.testing.assert_allclose(np.exp(compensation_log_prior(stats, TrainConfig())), 0.5 * q + 0.5 * stats.prior)

    def test_dataset_prior_and_off(self):
        stats = ClassStats.from_counts([100, 10, 1])
        np.testing.assert_array_equal(compensation_log_prior(stats, TrainConfig(prior="dataset")), stats.log_prior)
        np.testing.assert_array_equal(compensation_log_prior(stats, TrainConfig(mix_op="none")), stats.log_prior)
        assert compensation_log_prior(stats, TrainConfig(logit_adjust=False)) is None


class TestTrain:
    def test_single_class_loss_vanishes(self):
        data = tiny_dataset([40])
        _, log = train(small_config(eta=0.0, epochs=50, decay_epochs=[]), data)
        losses = [e["total"] for e in log]
        assert all(b <= a for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 0.01

    def test_loss_decreases(self, small_longtail):
        data = small_longtail[0]
        _, log = train(small_config(epochs=15, decay_epochs=[10]), data)
        first, last = log[0], log[-1]
        assert last["bce"] < first["bce"] and last["smc"] < first["smc"]

    def test_deterministic(self, small_longtail, tmp_path):
        data = small_longtail[0]
        a, log_a = train(small_config(), data)
        b, log_b = train(small_config(), data)
        assert log_a == log_b
        save_checkpoint(a, tmp_path / "a")
        save_checkpoint(b, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_resume_bit_identical(self, small_longtail, tmp_path):
        data = small_longtail[0]
        full, _ = train(small_config(), data)
        part, _ = train(small_config(), data, stop_after=1)
        save_checkpoint(part, tmp_path / "part")
        resumed, log = train(small_config(), data, resume=load_checkpoint(tmp_path / "part"))
        save_checkpoint(full, tmp_path / "full")
        save_checkpoint(resumed, tmp_path / "resumed")
        assert (tmp_path / "full").read_bytes() == (tmp_path / "resumed").read_bytes()
        assert [e["epoch"] for e in log] == [0, 1, 2]

    def test_resume_requires_same_config(self, small_longtail):
        data = small_longtail[0]
        part, _ = train(small_config(epochs=1), data)
        with pytest.raises(ContractViolation):
            train(small_config(epochs=1, eta=0.5), data, resume=part)

    def test_eval_each_epoch(self, small_longtail, small_balanced):
        _, log = train(small_config(epochs=1), small_longtail[0], small_balanced)
        assert set(log[0]["accuracy"]) >= {"all"}

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises_with_records(self, small_longtail):
        with pytest.raises(TrainingDiverged) as exc:
            train(small_config(lr=1e12, epochs=2), small_longtail[0])
        assert exc.value.records and "fg_class" in exc.value.records[0]


class TestEvaluate:
    def test_untrained_model_is_chance(self):
        accs = []
        for seed in range(5):
            data = synth_balanced(10, 20, image_size=8, seed=seed, channels=1)
            params = init_model([32], 10, data.image_dims, seed)
            accs.append(evaluate_params(params, data, split_classes([20] * 10))["splits"]["all"])
        assert abs(np.mean(accs) - 0.10) <= 0.02

    def test_single_class_eval_set(self, small_longtail):
        ck, _ = train(small_config(epochs=1), small_longtail[0])
        data = small_longtail[0]
        keep = data.labels == 0
        one = Dataset(data.pixels[keep], data.labels[keep], data.num_classes)
        report = evaluate(ck, one)
        assert report["per_class"][1:] == [None] * 4
        assert report["splits"]["all"] == report["per_class"][0]

    def test_absent_splits_omitted(self):
        data = tiny_dataset([30, 30])
        params = init_model([8], 2, data.image_dims, 0)
        splits = split_classes([30, 30])
        assert set(evaluate_params(params, data, splits)["splits"]) == {"medium", "all"}

    def test_vocabulary_mismatch(self, small_longtail):
        ck, _ = train(small_config(epochs=1), small_longtail[0])
        with pytest.raises(ContractViolation):
            evaluate(ck, tiny_dataset([3, 3]))
