import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xcrossnet import data, optim, oracle
from xcrossnet.errors import DataError, NumericError
from xcrossnet.model import ModelConfig, ParamEntry, ParamRegistry, XCrossNetModel

TINY = ModelConfig(dense_fields=4, sparse_fields=4, vocab_sizes=(4,) * 4,
                   embed_dim=4, product_size=4, cross_depth=2,
                   mlp_widths=(8,), seed=5)


def tiny_batch(rng, n=6, config=TINY):
    dense = rng.uniform(-1, 1, (n, config.dense_fields))
    sparse = np.column_stack([rng.integers(0, v, n) for v in config.vocab_sizes])
    labels = rng.integers(0, 2, n).astype(np.float64)
    return data.Dataset(dense, sparse, labels)


def fsum_logloss(preds, labels):
    terms = []
    for p, y in zip(preds, labels):
        p = min(max(p, 1e-7), 1 - 1e-7)
        terms.append(y * math.log(p) + (1 - y) * math.log1p(-p))
    return -math.fsum(terms) / len(terms)


class TestLogloss:
    def test_half_predictions_give_ln2(self):
        assert abs(optim.logloss([0.5, 0.5], [1, 0]) - math.log(2)) < 1e-15

    def test_perfect_predictions_clamped(self):
        loss = optim.logloss([1.0, 0.0], [1, 0])
        assert math.isfinite(loss)
        assert 0 < loss < 2e-7

    def test_matches_fsum_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            preds = rng.uniform(0, 1, 64)
            labels = rng.integers(0, 2, 64).astype(float)
            a = optim.logloss(preds, labels)
            b = fsum_logloss(preds, labels)
            assert abs(a - b) / abs(b) < 1e-12

    def test_empty_input(self):
        with pytest.raises(DataError):
            optim.logloss([], [])

    @given(st.lists(st.floats(min_value=0, max_value=1), min_size=1, max_size=64),
           st.data())
    @settings(max_examples=100, deadline=None)
    def test_never_non_finite(self, preds, data_):
        labels = data_.draw(st.lists(st.sampled_from([0.0, 1.0]),
                                     min_size=len(preds), max_size=len(preds)))
        assert math.isfinite(optim.logloss(preds, labels))


class TestObjective:
    def one_param_registry(self, value):
        arr = np.array([value])
        return ParamRegistry([ParamEntry("p", arr, np.zeros(1))])

    def test_zero_lambda(self):
        assert optim.objective(1.25, self.one_param_registry(3.0), 0.0) == 1.25

    def test_worked_example(self):
        # single parameter 2.0, lambda 0.5, loss 1 -> 1 + 0.5 * 4 = 3
        assert optim.objective(1.0, self.one_param_registry(2.0), 0.5) == 3.0

    def test_never_below_loss(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            reg = self.one_param_registry(rng.normal())
            lam = float(rng.uniform(0, 2))
            assert optim.objective(0.7, reg, lam) >= 0.7

    def test_objective_gradient_matches_finite_differences(self):
        # FD of loss + lam * ||theta||^2 vs backward grad + 2 lam theta
        lam = 0.05
        model, batch = oracle.gradcheck_point(TINY, seed=99)
        optim.batch_loss_and_grad(model, batch)
        analytic = model.registry.get_grad_flat() + \
            2.0 * lam * model.registry.get_flat()
        theta0 = model.registry.get_flat()

        def f(theta):
            model.registry.set_flat(theta)
            loss = oracle.batch_logloss(model, batch)
            return optim.objective(loss, model.registry, lam)

        numeric = oracle.finite_diff(f, theta0)
        model.registry.set_flat(theta0)
        worst = max(oracle.relative_error(a, n)
                    for a, n in zip(analytic, numeric))
        assert worst < 1e-4


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        m = XCrossNetModel.init(TINY)
        before = m.registry.get_flat()
        m.zero_grad()
        state = optim.AdamState.init(m.registry)
        optim.adam_step(m.registry, state, lr=0.001, lam=0.0)
        assert np.array_equal(m.registry.get_flat(), before)

    def test_first_step_magnitude(self):
        # scalar parameter, g = 1: bias-corrected update is lr / (1 + eps)
        value = np.array([0.0])
        grad = np.ones(1)
        reg = ParamRegistry([ParamEntry("p", value, grad)])
        state = optim.AdamState.init(reg)
        optim.adam_step(reg, state, lr=0.001, lam=0.0)
        expected = -0.001 * 1.0 / (1.0 + 1e-8)
        assert abs(value[0] - expected) < 1e-15
        assert state.t == 1

    def test_determinism_over_steps(self):
        def run():
            m = XCrossNetModel.init(TINY)
            state = optim.AdamState.init(m.registry)
            batch = tiny_batch(np.random.default_rng(3))
            for _ in range(10):
                optim.batch_loss_and_grad(m, batch)
                optim.adam_step(m.registry, state, lr=0.01, lam=1e-4)
            return m.registry.get_flat()

        assert np.array_equal(run(), run())

    def test_second_moment_nonnegative_and_t_monotone(self):
        m = XCrossNetModel.init(TINY)
        state = optim.AdamState.init(m.registry)
        batch = tiny_batch(np.random.default_rng(4))
        for step in range(5):
            optim.batch_loss_and_grad(m, batch)
            optim.adam_step(m.registry, state, lr=0.01, lam=0.0)
            assert state.t == step + 1
            assert all(np.all(v >= 0) for v in state.v)


class TestFit:
    def synth_small(self):
        spec = dataclasses.replace(data.DEFAULT_SYNTH_SPEC,
                                   n_train=12_000, n_valid=4_000)
        sd = data.synth_generate(spec)
        return sd.train_dataset(), sd.valid_dataset()

    def test_zero_lr_keeps_parameters_and_loss(self):
        train, _ = self.synth_small()
        m = XCrossNetModel.init(TINY)
        before = m.registry.get_flat()
        cfg = optim.TrainConfig(lr=0.0, batch_size=1024, l2=0.0, epochs=2,
                                seed=0, eval_every=0, shuffle=False)
        log = optim.fit(m, train, cfg)
        assert np.array_equal(m.registry.get_flat(), before)
        # identical batches both epochs, frozen model: identical losses
        losses = [r["train_logloss"] for r in log]
        half = len(losses) // 2
        assert losses[:half] == losses[half:]

    def test_validation_logloss_decreases_over_first_epochs(self):
        train, valid = self.synth_small()
        m = XCrossNetModel.init(TINY)
        cfg = optim.TrainConfig(lr=0.001, batch_size=512, l2=1e-4, epochs=3,
                                seed=1, eval_every=1)
        log = optim.fit(m, train, cfg, valid=valid)
        vals = [r["val_logloss"] for r in log if "val_logloss" in r]
        assert len(vals) == 3
        for earlier, later in zip(vals, vals[1:]):
            assert later <= earlier + 0.002

    def test_single_instance_memorization(self):
        train, _ = self.synth_small()
        one = train.subset([0])
        m = XCrossNetModel.init(TINY)
        cfg = optim.TrainConfig(lr=0.001, batch_size=1, l2=0.0, epochs=2000,
                                seed=2, eval_every=0)
        log = optim.fit(m, one, cfg)
        assert log[-1]["train_logloss"] < 0.01

    def test_non_finite_loss_raises(self):
        train, _ = self.synth_small()
        m = XCrossNetModel.init(TINY)
        flat = m.registry.get_flat()
        flat[0] = np.nan
        m.registry.set_flat(flat)
        cfg = optim.TrainConfig(lr=0.001, batch_size=256, epochs=1, seed=0)
        with pytest.raises(NumericError):
            optim.fit(m, train, cfg)

    def test_empty_dataset(self):
        m = XCrossNetModel.init(TINY)
        empty = data.Dataset(np.zeros((0, 4)), np.zeros((0, 4), dtype=np.int64),
                             np.zeros(0))
        with pytest.raises(DataError):
            optim.fit(m, empty, optim.TrainConfig(epochs=1))

    def test_dimension_mismatch(self):
        m = XCrossNetModel.init(TINY)
        wrong = data.Dataset(np.zeros((4, 7)), np.zeros((4, 4), dtype=np.int64),
                             np.zeros(4))
        with pytest.raises(DataError):
            optim.fit(m, wrong, optim.TrainConfig(epochs=1))

    def test_log_record_schema(self):
        train, valid = self.synth_small()
        m = XCrossNetModel.init(TINY)
        cfg = optim.TrainConfig(lr=0.001, batch_size=4096, epochs=1, seed=0,
                                eval_every=1)
        seen = []
        optim.fit(m, train, cfg, valid=valid, callbacks=[seen.append])
        assert {"step", "epoch", "train_logloss", "wall_ms"} <= set(seen[0])
        assert "val_auc" in seen[-1] and "val_logloss" in seen[-1]
        steps = [r["step"] for r in seen]
        assert steps == sorted(steps)
