import numpy as np
import pytest

from xcrossnet import data, optim, oracle
from xcrossnet.errors import CheckpointError, DataError, DimensionError
from xcrossnet.model import (ModelConfig, XCrossNetModel, balance_index,
                             load_checkpoint, save_checkpoint)

SMALL = ModelConfig(dense_fields=3, sparse_fields=4, vocab_sizes=(5, 5, 5, 5),
                    embed_dim=5, product_size=6, cross_depth=2,
                    mlp_widths=(8,), seed=11)

CRITEO = ModelConfig.criteo_default(vocab_sizes=(3,) * 26, seed=0)


def random_batch(config, rng, n=4):
    dense = rng.uniform(-1, 1, (n, config.dense_fields))
    sparse = np.column_stack([rng.integers(0, v, n) for v in config.vocab_sizes])
    labels = rng.integers(0, 2, n).astype(np.float64)
    return data.Dataset(dense, sparse, labels)


class TestInit:
    def test_same_seed_bitwise_identical(self):
        a = XCrossNetModel.init(SMALL)
        b = XCrossNetModel.init(SMALL)
        assert np.array_equal(a.registry.get_flat(), b.registry.get_flat())

    def test_different_seed_differs(self):
        import dataclasses
        other = dataclasses.replace(SMALL, seed=12)
        a = XCrossNetModel.init(SMALL)
        b = XCrossNetModel.init(other)
        assert not np.array_equal(a.registry.get_flat(), b.registry.get_flat())

    def test_criteo_dimension_arithmetic(self):
        assert CRITEO.x0_dim == 13 * 5 + 200 == 265
        assert CRITEO.mlp_input_dim == 530

    def test_stage_param_counts(self):
        m = XCrossNetModel.init(CRITEO)
        counts = m.num_parameters()
        assert counts["cross"] == 2 * 13 * 4 == 104
        assert counts["embedding"] == 20 * sum(CRITEO.vocab_sizes)
        assert counts["concat"] == 2 * (13 * 5 + 2 * 100)
        assert counts["total"] == sum(v for k, v in counts.items() if k != "total")

    def test_invalid_config_reports_all_problems(self):
        bad = ModelConfig(dense_fields=0, sparse_fields=2, vocab_sizes=(1,),
                          embed_dim=0, product_size=1, cross_depth=1,
                          mlp_widths=(0,))
        problems = bad.validate()
        assert len(problems) >= 4
        with pytest.raises(ValueError):
            XCrossNetModel.init(bad)


class TestRegistry:
    def test_documented_ordering(self):
        m = XCrossNetModel.init(SMALL)
        names = m.registry.names()
        assert names == (
            ["cross.w0", "cross.b0", "cross.w1", "cross.b1"]
            + [f"embed.field{i}" for i in range(4)]
            + ["product.theta", "product.order1", "concat.w", "concat.b",
               "mlp.w0", "mlp.b0", "mlp.out_w", "mlp.out_b"])

    def test_flat_roundtrip(self):
        m = XCrossNetModel.init(SMALL)
        flat = m.registry.get_flat()
        assert flat.shape == (m.num_parameters()["total"],)
        rng = np.random.default_rng(0)
        new = rng.normal(size=flat.shape)
        m.registry.set_flat(new)
        assert np.array_equal(m.registry.get_flat(), new)
        # registry views alias the layer arrays
        assert m.cross.weights[0][0] == new[0]

    def test_set_flat_wrong_size(self):
        m = XCrossNetModel.init(SMALL)
        with pytest.raises(DimensionError):
            m.registry.set_flat(np.zeros(3))


class TestForwardBackward:
    def test_zero_model_predicts_half(self):
        m = XCrossNetModel.zeros(SMALL)
        batch = random_batch(SMALL, np.random.default_rng(1), n=1)
        prob, _ = m.forward(batch.instance(0))
        assert prob == 0.5

    def test_forward_is_pure(self):
        m = XCrossNetModel.init(SMALL)
        inst = random_batch(SMALL, np.random.default_rng(2), n=1).instance(0)
        p1, _ = m.forward(inst)
        p2, _ = m.forward(inst)
        assert p1 == p2

    def test_logit_gradient_is_prob_minus_label(self):
        m = XCrossNetModel.init(SMALL)
        inst = random_batch(SMALL, np.random.default_rng(3), n=1).instance(0)
        prob, cache = m.forward(inst)
        m.zero_grad()
        m.backward(cache, 1.0)
        # out_bias sees the logit gradient directly
        assert m.registry["mlp.out_b"].grad[0] == prob - 1.0

    def test_saturated_correct_prediction_has_tiny_gradient(self):
        m = XCrossNetModel.init(SMALL)
        m.registry["mlp.out_b"].values[0] = 40.0  # force prob ~ 1
        inst = random_batch(SMALL, np.random.default_rng(4), n=1).instance(0)
        prob, cache = m.forward(inst)
        m.zero_grad()
        m.backward(cache, 1.0)
        assert abs(m.registry["mlp.out_b"].grad[0]) < 1e-12

    def test_batch_gradient_is_mean_of_instances(self):
        m = XCrossNetModel.init(SMALL)
        batch = random_batch(SMALL, np.random.default_rng(5), n=3)
        optim.batch_loss_and_grad(m, batch)
        batched = m.registry.get_grad_flat()

        manual = np.zeros_like(batched)
        for i in range(len(batch)):
            m.zero_grad()
            prob, cache = m.forward(batch.instance(i))
            m.backward(cache, batch.instance(i).label)
            manual = manual + m.registry.get_grad_flat()
        manual *= 1.0 / len(batch)
        assert np.array_equal(batched, manual)

    def test_gradient_reduction_order_invariance(self):
        # per-instance gradients reduced in ascending index order are the
        # same bits no matter which order they were computed in
        m = XCrossNetModel.init(SMALL)
        batch = random_batch(SMALL, np.random.default_rng(6), n=5)

        def grad_of(i):
            m.zero_grad()
            _, cache = m.forward(batch.instance(i))
            m.backward(cache, batch.instance(i).label)
            return m.registry.get_grad_flat()

        forward_order = [grad_of(i) for i in range(len(batch))]
        reverse_order = [grad_of(i) for i in reversed(range(len(batch)))]
        reverse_order.reverse()  # restore ascending index order
        total_fwd = np.zeros_like(forward_order[0])
        total_rev = np.zeros_like(forward_order[0])
        for g in forward_order:
            total_fwd += g
        for g in reverse_order:
            total_rev += g
        assert np.array_equal(total_fwd, total_rev)

    def test_full_model_gradcheck(self):
        model, batch = oracle.gradcheck_point(SMALL, seed=1234)
        worst = oracle.gradcheck_model(model, batch)
        assert max(worst.values()) < 1e-4

    def test_dimension_fuzzing(self):
        m = XCrossNetModel.init(SMALL)
        rng = np.random.default_rng(7)
        bad_dense = data.Instance(rng.normal(size=5), np.zeros(4, dtype=np.int64), 0)
        with pytest.raises(DimensionError):
            m.forward(bad_dense)
        bad_sparse = data.Instance(rng.normal(size=3), np.zeros(2, dtype=np.int64), 0)
        with pytest.raises(DimensionError):
            m.forward(bad_sparse)
        oov = data.Instance(rng.normal(size=3),
                            np.array([0, 0, 0, 9], dtype=np.int64), 0)
        with pytest.raises(DataError):
            m.forward(oov)


class TestCheckpoint:
    def test_bitwise_roundtrip(self, tmp_path):
        m = XCrossNetModel.init(SMALL)
        path = tmp_path / "model.xcn"
        save_checkpoint(m, path)
        loaded = load_checkpoint(path)
        assert np.array_equal(loaded.registry.get_flat(), m.registry.get_flat())
        assert loaded.config == m.config
        # saving the loaded model reproduces the same bytes
        path2 = tmp_path / "model2.xcn"
        save_checkpoint(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_truncated_blob(self, tmp_path):
        m = XCrossNetModel.init(SMALL)
        path = tmp_path / "model.xcn"
        save_checkpoint(m, path)
        blob = path.read_bytes()
        (tmp_path / "bad.xcn").write_bytes(blob[:-16])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.xcn")

    def test_unknown_version(self, tmp_path):
        m = XCrossNetModel.init(SMALL)
        path = tmp_path / "model.xcn"
        save_checkpoint(m, path)
        header, _, blob = path.read_bytes().partition(b"\n")
        patched = header.replace(b'"version": 1', b'"version": 99')
        (tmp_path / "bad.xcn").write_bytes(patched + b"\n" + blob)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.xcn")

    def test_garbage_header(self, tmp_path):
        (tmp_path / "bad.xcn").write_bytes(b"\x00\x01\x02 not json\n1234")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.xcn")


class TestBalanceIndex:
    def test_criteo_both_conventions(self):
        cfg = ModelConfig(dense_fields=13, sparse_fields=26, vocab_sizes=(2,) * 26,
                          product_size=100, cross_depth=4)
        assert abs(balance_index(cfg, "cross_only") - 0.52) < 1e-15
        assert abs(balance_index(cfg, "include_input") - 0.65) < 1e-15

    def test_symmetric_config_gives_one(self):
        # equal field counts and equal branch widths
        cfg = ModelConfig(dense_fields=4, sparse_fields=4, vocab_sizes=(3,) * 4,
                          product_size=4, cross_depth=1)
        assert balance_index(cfg, "include_input") == 1.0

    def test_unknown_convention(self):
        with pytest.raises(ValueError):
            balance_index(SMALL, "whatever")
