import math
from collections import Counter
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from speechcare.data import ManifestRecord
from speechcare.errors import DomainError, NumericError, ValidationError
from speechcare.nn import autodiff as ad
from speechcare.nn.autodiff import Parameter
from speechcare.nn.layers import Dense, Module
from speechcare.training import (
    Optimizer,
    RunResult,
    TrainConfig,
    batch_loss,
    compare_runs,
    cross_entropy_loss,
    focal_loss,
    oversample,
    regularized_beta,
    summarize,
    t_two_sided_p,
    train,
)


class TestLosses:
    def test_uniform_cross_entropy_is_ln3(self):
        for label in range(3):
            assert cross_entropy_loss([1 / 3] * 3, label) == pytest.approx(math.log(3), abs=1e-12)

    def test_certain_prediction_costs_nothing(self):
        assert cross_entropy_loss([0, 1, 0], 1) == 0.0
        assert focal_loss([0, 1, 0], 1, gamma=3.0, alpha=0.5) == 0.0

    def test_zero_probability_is_clamped(self):
        assert cross_entropy_loss([1, 0, 0], 2) == pytest.approx(-math.log(1e-15))

    def test_focal_direct_value(self):
        assert focal_loss([0.5, 0.25, 0.25], 0, gamma=2, alpha=1) == pytest.approx(0.25 * math.log(2), abs=1e-12)

    def test_focal_reduces_to_cross_entropy_on_many_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            p = rng.dirichlet(np.ones(3))
            y = int(rng.integers(3))
            assert abs(focal_loss(p, y, 0.0, 1.0) - cross_entropy_loss(p, y)) < 1e-12

    @settings(max_examples=200)
    @given(st.lists(st.floats(0.001, 1.0), min_size=3, max_size=3), st.integers(0, 2),
           st.floats(0, 5), st.floats(0.01, 1.0))
    def test_focal_non_negative(self, raw, y, gamma, alpha):
        p = np.array(raw) / sum(raw)
        assert focal_loss(p, y, gamma, alpha) >= 0

    def test_invalid_inputs(self):
        with pytest.raises(DomainError):
            cross_entropy_loss([0.5, 0.5, 0.5], 0)
        with pytest.raises(DomainError):
            cross_entropy_loss([1 / 3] * 3, 3)
        with pytest.raises(DomainError):
            focal_loss([1 / 3] * 3, 0, gamma=-1)
        with pytest.raises(DomainError):
            focal_loss([1 / 3] * 3, 0, alpha=0)

    def test_label_names_accepted(self):
        assert cross_entropy_loss([0.2, 0.5, 0.3], "mci") == pytest.approx(-math.log(0.5))

    def test_batch_mean_matches_loop(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(6, 3))
        labels = rng.integers(0, 3, 6)
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        cfg = TrainConfig(loss="focal", focal_gamma=1.5, focal_alpha=(0.5, 1.0, 0.8))
        graph = float(batch_loss(ad.Tensor(logits), labels, cfg).data)
        loop = np.mean([focal_loss(p, int(y), 1.5, cfg.focal_alpha[y]) for p, y in zip(probs, labels)])
        assert graph == pytest.approx(loop, abs=1e-9)
        ce = float(batch_loss(ad.Tensor(logits), labels, TrainConfig()).data)
        assert ce == pytest.approx(np.mean([cross_entropy_loss(p, int(y)) for p, y in zip(probs, labels)]), abs=1e-12)

    def test_reweighted_loss_uses_normalized_class_weights(self):
        logits = np.zeros((4, 3))
        labels = np.array([0, 0, 1, 2])
        cfg = TrainConfig(loss="reweighted", class_weights=(1.0, 2.0, 5.0))
        assert float(batch_loss(ad.Tensor(logits), labels, cfg).data) == pytest.approx(math.log(3))

    def test_focal_graph_gradient(self):
        from speechcare.nn.gradcheck import check_gradients
        w = Parameter(np.random.default_rng(2).normal(size=(4, 3)))
        x = np.random.default_rng(3).normal(size=(5, 4))
        labels = np.array([0, 1, 2, 1, 0])
        cfg = TrainConfig(loss="focal", focal_gamma=2.0)
        report = check_gradients(lambda: batch_loss(ad.matmul(x, w), labels, cfg), {"w": w})
        assert report.worst < 1e-6


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr_acoustic, cfg.lr_text, cfg.lr_other) == (1e-5, 1e-6, 1e-4)
        assert cfg.weight_decay == 1e-3 and cfg.batch_size == 4 and cfg.early_stop_patience == 5

    def test_round_trip(self):
        cfg = TrainConfig(loss="focal", focal_gamma=1.0, epochs=3)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("field,value", [("lr_text", -1.0), ("focal_gamma", -0.1), ("loss", "hinge"),
                                             ("batch_size", 0), ("focal_alpha", (1.0, 2.0, 1.0))])
    def test_invalid(self, field, value):
        with pytest.raises(ValidationError):
            TrainConfig(**{field: value})

    def test_unknown_field_named(self):
        with pytest.raises(ValidationError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})


class TestOptimizer:
    @pytest.mark.parametrize("method", ["gd", "adamw"])
    def test_zero_gradient_step_is_pure_decay(self, method):
        p = Parameter(np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32))
        before = p.data.copy()
        opt = Optimizer({"p": p}, {"p": 1e-2}, 1e-3, method)
        opt.step({"p": np.zeros_like(p.data)})
        np.testing.assert_array_equal(p.data, before * (1 - 1e-2 * 1e-3))

    def test_gradient_descent_update(self):
        p = Parameter(np.array([1.0, -2.0]))
        Optimizer({"p": p}, {"p": 0.1}, 0.0, "gd").step({"p": np.array([0.5, 1.0])})
        np.testing.assert_allclose(p.data, [0.95, -2.1])

    def test_adamw_first_step_moves_by_lr(self):
        p = Parameter(np.array([1.0, -2.0]))
        Optimizer({"p": p}, {"p": 0.1}, 0.0, "adamw").step({"p": np.array([0.5, -3.0])})
        np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)


class LinearModel(Module):
    """Two-feature linear classifier in the model interface used by ``train``."""

    def __init__(self, seed=0):
        self.layer = Dense(2, 3, np.random.default_rng(seed), dtype=np.float64)

    def forward(self, batch, training=False, rng=None):
        return Out(self.layer(ad.Tensor(batch.x)))


@dataclass
class Out:
    logits: ad.Tensor


@dataclass
class ToyBatch:
    x: np.ndarray
    labels: np.ndarray


@dataclass
class ToyExample:
    x: np.ndarray
    label: int


def toy_collate(examples):
    return ToyBatch(np.stack([e.x for e in examples]), np.array([e.label for e in examples]))


def toy_data(n=120, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.array([[-3.0, 0.0], [3.0, 0.0], [0.0, 4.0]])
    labels = rng.integers(0, 3, n)
    return [ToyExample(centers[y] + rng.normal(0, 0.5, 2), int(y)) for y in labels]


class TestTrain:
    def test_train_loss_decreases_on_separable_problem(self):
        data = toy_data()
        cfg = TrainConfig(lr_other=0.05, optimizer="gd", epochs=5, dropout=0.0, batch_size=8)
        result = train(LinearModel(), data, [], cfg, toy_collate)
        assert result.epochs_run == 5
        assert all(b < a for a, b in zip(result.train_loss, result.train_loss[1:]))

    def test_zero_learning_rates_leave_parameters_unchanged(self):
        model = LinearModel()
        before = model.state_dict()
        cfg = TrainConfig(lr_acoustic=0.0, lr_text=0.0, lr_other=0.0, epochs=3)
        train(model, toy_data(40), toy_data(20, seed=1), cfg, toy_collate)
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(value, before[name])

    def test_identical_runs_are_bit_identical(self):
        cfg = TrainConfig(lr_other=0.01, epochs=4)
        a = train(LinearModel(), toy_data(), toy_data(30, 1), cfg, toy_collate)
        b = train(LinearModel(), toy_data(), toy_data(30, 1), cfg, toy_collate)
        assert a.to_json() == b.to_json()

    def test_early_stopping_and_best_checkpoint(self):
        # a huge learning rate makes validation loss blow up after the first epoch
        cfg = TrainConfig(lr_other=50.0, optimizer="gd", epochs=30, early_stop_patience=2)
        model = LinearModel()
        result = train(model, toy_data(), toy_data(30, 1), cfg, toy_collate)
        assert result.epochs_run == len(result.val_loss)
        if result.stopped_early:
            assert result.epochs_run - 1 - result.best_epoch == 2
        best = min(result.val_loss)
        assert result.val_loss[result.best_epoch] == best

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self):
        class Exploding(LinearModel):
            def forward(self, batch, training=False, rng=None):
                return Out(ad.scale(self.layer(ad.Tensor(batch.x)), np.inf))

        with pytest.raises(NumericError):
            train(Exploding(), toy_data(8), [], TrainConfig(epochs=1), toy_collate)

    def test_empty_training_split(self):
        with pytest.raises(ValidationError):
            train(LinearModel(), [], [], TrainConfig(), toy_collate)

    def test_run_result_round_trip(self):
        r = RunResult(seed=3, train_loss=[1.0, 0.5], val_loss=[1.1, 0.6], metrics={"auc_micro": 0.9}, best_epoch=1)
        again = RunResult.from_dict(r.to_dict())
        assert again == r and again.epochs_run == 2


def rec(uid, gender="female", language="english", augment=False):
    return ManifestRecord(uid=uid, gender=gender, language=language, audio_path=f"{uid}.wav", age=70,
                          education="high_school", label="control", augment=augment)


class TestOversample:
    def test_balanced_input_unchanged(self):
        records = [rec("a", "female"), rec("b", "male")]
        assert oversample(records, "gender") == records

    def test_ten_and_five(self):
        records = [rec(f"f{i}", "female") for i in range(10)] + [rec(f"m{i}", "male") for i in range(5)]
        out = oversample(records, "gender", seed=1)
        counts = Counter(r.gender for r in out)
        assert counts == {"female": 10, "male": 10}
        assert sum(r.augment for r in out) == 5

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.sampled_from(["english", "spanish", "mandarin", "other"]), min_size=1, max_size=40),
           st.integers(0, 100))
    def test_histogram_equalized_and_superset(self, languages, seed):
        records = [rec(f"r{i}", language=lang) for i, lang in enumerate(languages)]
        out = oversample(records, "language", seed=seed)
        counts = Counter(r.language for r in out)
        assert len(set(counts.values())) == 1
        assert counts[languages[0]] == max(Counter(languages).values())
        assert out[:len(records)] == records
        assert len({r.uid for r in out}) == len(out)

    def test_empty_listed_group_warns(self):
        with pytest.warns(UserWarning, match="mandarin"):
            oversample([rec("a")], "language", groups=["english", "mandarin"])


class TestStatistics:
    def test_hand_computed_example(self):
        diffs = [0.5, 1.0, 1.5, 2.0, 2.5]
        cmp = compare_runs(diffs, [0.0] * 5)
        sd = math.sqrt(sum((d - 1.5) ** 2 for d in diffs) / 4)
        assert cmp.t == pytest.approx(1.5 / (sd / math.sqrt(5)), abs=1e-9)
        assert cmp.t == pytest.approx(4.2426, abs=1e-3)
        assert cmp.cohens_d == pytest.approx(1.897, abs=1e-3)
        assert cmp.p == pytest.approx(stats.ttest_rel(diffs, [0.0] * 5).pvalue, abs=1e-9)

    def test_identical_runs(self):
        cmp = compare_runs([0.8, 0.9, 0.85], [0.8, 0.9, 0.85])
        assert cmp.tie and cmp.cohens_d == 0.0 and math.isnan(cmp.p)

    def test_constant_difference(self):
        cmp = compare_runs([2, 2, 2, 2, 2], [1, 1, 1, 1, 1])
        assert cmp.tie and cmp.cohens_d == math.inf
        assert cmp.to_dict()["cohens_d"] == "inf" and cmp.to_dict()["p"] is None

    def test_length_checks(self):
        with pytest.raises(ValidationError):
            compare_runs([1.0], [1.0])
        with pytest.raises(ValidationError):
            compare_runs([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_run_results_accepted(self):
        a = [RunResult(seed=s, metrics={"auc_micro": v}) for s, v in enumerate([0.9, 0.92, 0.95])]
        b = [RunResult(seed=s, metrics={"auc_micro": v}) for s, v in enumerate([0.8, 0.85, 0.83])]
        assert compare_runs(a, b).t == pytest.approx(compare_runs([0.9, 0.92, 0.95], [0.8, 0.85, 0.83]).t)

    @settings(max_examples=100)
    @given(st.floats(0.01, 30), st.integers(1, 60))
    def test_p_value_matches_scipy(self, t, df):
        assert t_two_sided_p(t, df) == pytest.approx(2 * stats.t.sf(t, df), abs=1e-6)

    @settings(max_examples=100)
    @given(st.floats(0.1, 20), st.floats(0.1, 20), st.floats(0.0, 1.0))
    def test_incomplete_beta_matches_scipy(self, a, b, x):
        assert regularized_beta(a, b, x) == pytest.approx(stats.beta.cdf(x, a, b), abs=1e-9)

    def test_summary_matches_direct_computation(self):
        values = [0.81, 0.84, 0.79, 0.9, 0.86]
        mean, std = summarize(values, "auc_micro")
        assert abs(mean - np.mean(values)) < 1e-12
        assert abs(std - np.std(values, ddof=1)) < 1e-12
