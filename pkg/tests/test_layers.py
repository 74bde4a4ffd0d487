import numpy as np
import pytest

from refgame import autodiff as ad
from refgame.autodiff import Tensor, backward
from refgame.checkpoint import load_checkpoint, save_checkpoint
from refgame.layers import (
    AdamState,
    EmbeddingTable,
    Linear,
    NonFiniteGradient,
    RnnCell,
    adam_step,
)
from refgame.rng import RngStream


class TestInitialization:
    def test_linear_weight_bound(self):
        layer = Linear.init(20, 50, RngStream(1).child("lin"))
        assert np.all(np.abs(layer.weight.data) <= 1.0 / np.sqrt(20) + 1e-15)
        assert np.array_equal(layer.bias.data, np.zeros(50))

    def test_same_seed_identical_params(self):
        a = Linear.init(8, 4, RngStream(42).child("x"))
        b = Linear.init(8, 4, RngStream(42).child("x"))
        assert np.array_equal(a.weight.data, b.weight.data)

    def test_sampler_mean_near_zero(self):
        # law-of-large-numbers check on the uniform initializer
        layer = Linear.init(100, 100, RngStream(5).child("big"))
        assert abs(layer.weight.data.mean()) < 0.01

    def test_invalid_dims_rejected(self):
        with pytest.raises(ValueError):
            Linear.init(0, 4, RngStream(1))

    def test_embedding_fan_in_is_embed_dim(self):
        table = EmbeddingTable.init(1100, 10, RngStream(2).child("emb"))
        assert np.all(np.abs(table.table.data) <= 1.0 / np.sqrt(10) + 1e-15)


class TestLayerForward:
    def test_rnn_output_in_tanh_range(self):
        cell = RnnCell.init(10, 50, RngStream(3).child("rnn"))
        rng = RngStream(4)
        x = Tensor(rng.uniform(-5, 5, (7, 10)))
        h = Tensor(rng.uniform(-5, 5, (7, 50)))
        out = cell.step(x, h)
        assert np.all(out.data > -1.0) and np.all(out.data < 1.0)
        assert np.allclose(out.data, cell.step_apply(x.data, h.data))

    def test_linear_graph_matches_apply(self):
        layer = Linear.init(6, 3, RngStream(9).child("lin"))
        x = RngStream(10).uniform(-1, 1, (4, 6))
        assert np.allclose(layer(Tensor(x)).data, layer.apply(x))

    def test_embedding_one_hot_exact_row(self):
        table = EmbeddingTable.init(12, 5, RngStream(6).child("emb"))
        one_hot = np.zeros((1, 12))
        one_hot[0, 7] = 1.0
        via_soft = table.lookup_soft(Tensor(one_hot)).data[0]
        assert np.array_equal(via_soft, table.table.data[7])
        assert np.array_equal(table.lookup([7]).data[0], table.table.data[7])

    def test_embedding_convex_combination_linear(self):
        table = EmbeddingTable.init(6, 4, RngStream(8).child("emb"))
        p = np.array([[0.25, 0.25, 0.0, 0.5, 0.0, 0.0]])
        got = table.lookup_soft(Tensor(p)).data[0]
        expected = 0.25 * table.table.data[0] + 0.25 * table.table.data[1] + 0.5 * table.table.data[3]
        assert np.allclose(got, expected, atol=1e-12)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0]))
        state = AdamState.for_params([p])
        adam_step([p], [np.zeros(2)], state, lr=0.001)
        assert np.array_equal(p.data, [1.0, -2.0])
        assert state.step == 1

    def test_first_step_magnitude(self):
        # bias-corrected first step with constant gradient 1: m_hat = v_hat = 1,
        # so the parameter moves by lr / (1 + eps)
        p = Tensor(np.array([0.5]))
        state = AdamState.for_params([p])
        adam_step([p], [np.ones(1)], state, lr=0.001)
        expected_delta = 0.001 / (1.0 + 1e-8)
        assert abs((0.5 - p.data[0]) - expected_delta) < 1e-15

    def test_two_clones_stay_identical(self):
        def run():
            p = Tensor(np.array([0.3, 0.7]))
            state = AdamState.for_params([p])
            for i in range(10):
                adam_step([p], [np.array([0.1 * i, -0.2])], state, lr=0.01)
            return p.data

        assert np.array_equal(run(), run())

    def test_lr_zero_is_noop(self):
        p = Tensor(np.array([1.0, 2.0, 3.0]))
        state = AdamState.for_params([p])
        adam_step([p], [np.array([5.0, -1.0, 0.2])], state, lr=0.0)
        assert np.array_equal(p.data, [1.0, 2.0, 3.0])

    def test_non_finite_gradient_rejected(self):
        p = Tensor(np.array([1.0]))
        state = AdamState.for_params([p])
        with pytest.raises(NonFiniteGradient):
            adam_step([p], [np.array([np.nan])], state, lr=0.001)
        assert p.data[0] == 1.0 and state.step == 0

    def test_shape_mismatch_rejected(self):
        p = Tensor(np.array([1.0]))
        state = AdamState.for_params([p])
        with pytest.raises(ValueError):
            adam_step([p], [np.ones(2)], state, lr=0.001)

    def test_grads_read_from_tensors(self):
        p = Tensor(np.array([2.0]))
        loss = ad.mul(p, p).sum()
        backward(loss)
        state = AdamState.for_params([p])
        adam_step([p], None, state, lr=0.001)
        assert p.data[0] < 2.0


class TestCheckpoint:
    def test_roundtrip_lossless(self, tmp_path):
        rng = RngStream(17)
        params = {
            "sender.encoder.weight": rng.uniform(-1, 1, (50, 20)),
            "sender.encoder.bias": rng.uniform(-1, 1, (50,)),
            "receiver.embedding.table": rng.uniform(-1, 1, (1100, 10)),
        }
        meta = {"vocab_size": 1100, "dataset_seed": 1, "network_seed": 2}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, meta)
        loaded, loaded_meta = load_checkpoint(path)
        assert loaded_meta == meta
        assert list(loaded) == list(params)
        for name in params:
            assert np.array_equal(loaded[name], params[name])

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b'{"format": "something-else"}\n')
        with pytest.raises(ValueError, match="not a"):
            load_checkpoint(path)

    def test_rejects_truncation(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"w": np.ones((4, 4))}, {})
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)
