import math

import numpy as np
import pytest

from transferbench import nnet
from transferbench.data import Dataset, SyntheticSpec, gen_synthetic
from transferbench.errors import CorruptionError, DataError, FormatError, NumericError, ShapeError
from transferbench.selftest import draw_gradient_case, finite_difference_gradient


def one_layer_net(w, b, input_shape=None):
    """Dense softmax net with explicit weights for hand-computed cases."""
    in_dim, out_dim = w.shape
    arch = nnet.ArchSpec(
        input_shape=input_shape or (in_dim, 1, 1),
        layers=(nnet.flatten(), nnet.dense(in_dim, out_dim)),
        num_classes=out_dim,
    )
    net = nnet.init_network(arch, seed=0)
    net.weights[1]["w"] = np.asarray(w, dtype=np.float64)
    net.weights[1]["b"] = np.asarray(b, dtype=np.float64)
    return net


class TestForward:
    def test_zero_weights_give_uniform(self):
        net = one_layer_net(np.zeros((5, 4)), np.zeros(4))
        probs = nnet.forward(net, np.linspace(0, 1, 5))
        assert np.allclose(probs, 0.25, atol=0)

    def test_hand_softmax(self):
        # identity weights, input (2,0): probs (e^2/(e^2+1), 1/(e^2+1))
        net = one_layer_net(np.eye(2), np.zeros(2))
        probs = nnet.forward(net, np.array([2.0, 0.0]))
        e2 = math.exp(2.0)
        assert probs[0] == pytest.approx(e2 / (e2 + 1.0), abs=1e-12)
        assert probs[1] == pytest.approx(1.0 / (e2 + 1.0), abs=1e-12)

    def test_normalization(self, tiny_net, tiny_dataset, rng):
        for _ in range(50):
            x = rng.uniform(0, 1, tiny_net.arch.input_size)
            probs = nnet.forward(tiny_net, x)
            assert probs.shape == (3,)
            assert np.all(probs >= 0)
            assert abs(probs.sum() - 1.0) <= 1e-9

    def test_shape_error(self, tiny_net):
        with pytest.raises(ShapeError):
            nnet.forward(tiny_net, np.zeros(7))

    def test_nonfinite_error(self, tiny_net):
        bad = np.zeros(tiny_net.arch.input_size)
        bad[0] = np.nan
        with pytest.raises(NumericError):
            nnet.forward(tiny_net, bad)

    def test_batch_matches_single(self, tiny_net, rng):
        xs = rng.uniform(0, 1, (8, tiny_net.arch.input_size))
        batch = nnet.forward_batch(tiny_net, xs)
        for i in range(8):
            assert np.array_equal(batch[i], nnet.forward(tiny_net, xs[i]))


class TestCrossEntropy:
    def test_uniform_is_log_k(self):
        assert nnet.cross_entropy(np.full(10, 0.1), 3) == pytest.approx(math.log(10), abs=1e-12)

    def test_certain_is_zero(self):
        probs = np.zeros(4)
        probs[2] = 1.0
        assert nnet.cross_entropy(probs, 2) == 0.0

    def test_direct_value(self):
        probs = np.array([0.03, 0.97])
        assert nnet.cross_entropy(probs, 0) == pytest.approx(-math.log(0.03), abs=1e-12)

    def test_zero_prob_floored(self):
        probs = np.array([0.0, 1.0])
        assert nnet.cross_entropy(probs, 0) == pytest.approx(-math.log(1e-12), abs=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            nnet.cross_entropy(np.array([0.5, 0.5]), 2)


class TestInputGradient:
    def test_zero_weight_net_zero_gradient(self):
        net = one_layer_net(np.zeros((6, 3)), np.zeros(3))
        g = nnet.input_gradient(net, np.linspace(0, 1, 6), 1)
        assert np.array_equal(g, np.zeros(6))

    def test_hand_chain_rule_2x2(self):
        # logits = W^T-free: logits = x @ W; grad_x CE = W (p - onehot(y))^T
        w = np.array([[1.0, -0.5], [0.25, 2.0]])
        net = one_layer_net(w, np.zeros(2))
        x = np.array([0.3, 0.8])
        y = 0
        probs = nnet.forward(net, x)
        expected = w @ (probs - np.array([1.0, 0.0]))
        g = nnet.input_gradient(net, x, y)
        assert np.allclose(g, expected, atol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(99)
        for _ in range(20):
            net, pixels, label = draw_gradient_case(rng)
            g = nnet.input_gradient(net, pixels, label)
            g_fd = finite_difference_gradient(net, pixels, label)
            assert np.linalg.norm(g - g_fd) <= 1e-5 * max(np.linalg.norm(g_fd), 1e-12)


class TestTraining:
    def test_zero_epochs_is_seeded_init(self, tiny_dataset, tiny_arch):
        net = nnet.train_model(
            tiny_dataset, tiny_arch, nnet.TrainSettings(epochs=0, holdout_frac=0.2), seed=3
        )
        ref = nnet.init_network(tiny_arch, seed=3)
        for got, want in zip(net.weights, ref.weights):
            for key in want:
                assert np.array_equal(got[key], want[key])
        assert net.clean_accuracy < 0.7  # near chance for 3 classes

    def test_separable_blobs_reach_99(self):
        data = gen_synthetic(
            SyntheticSpec(num_classes=2, dim=16, per_class=60, cluster_std=0.02), seed=1
        )
        arch = nnet.ArchSpec(data.shape, (nnet.flatten(), nnet.dense(16, 2)), 2)
        net = nnet.train_model(
            data, arch, nnet.TrainSettings(epochs=20, learning_rate=0.2, holdout_frac=0.0), seed=2
        )
        x, y = data.pixel_matrix(), data.labels()
        assert nnet.accuracy(net, x, y) >= 0.99

    def test_same_seed_identical_weights(self, tiny_dataset, tiny_arch):
        cfg = nnet.TrainSettings(epochs=5, learning_rate=0.1)
        a = nnet.train_model(tiny_dataset, tiny_arch, cfg, seed=21)
        b = nnet.train_model(tiny_dataset, tiny_arch, cfg, seed=21)
        for wa, wb in zip(a.weights, b.weights):
            for key in wa:
                assert np.array_equal(wa[key], wb[key])

    def test_empty_dataset_rejected(self, tiny_arch, tiny_dataset):
        empty = Dataset([], tiny_dataset.num_classes, tiny_dataset.shape, "empty")
        with pytest.raises(DataError):
            nnet.train_model(empty, tiny_arch, nnet.TrainSettings(epochs=1), seed=0)

    def test_non_chaining_arch_rejected(self):
        with pytest.raises(ShapeError):
            nnet.infer_shapes(
                nnet.ArchSpec((4, 1, 1), (nnet.flatten(), nnet.dense(5, 2)), 2)
            )


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tiny_net, tmp_path, rng):
        path = tmp_path / "net.tbnet"
        nnet.save_model(tiny_net, path)
        loaded = nnet.load_model(path)
        assert loaded.name == tiny_net.name
        assert loaded.seed == tiny_net.seed
        assert loaded.clean_accuracy == tiny_net.clean_accuracy
        for _ in range(100):
            x = rng.uniform(0, 1, tiny_net.arch.input_size)
            assert np.array_equal(nnet.forward(loaded, x), nnet.forward(tiny_net, x))

    def test_same_net_same_bytes(self, tiny_net, tmp_path):
        a, b = tmp_path / "a.tbnet", tmp_path / "b.tbnet"
        nnet.save_model(tiny_net, a)
        nnet.save_model(tiny_net, b)
        assert a.read_bytes() == b.read_bytes()

    def test_wrong_magic_rejected(self, tiny_net, tmp_path):
        path = tmp_path / "net.tbnet"
        nnet.save_model(tiny_net, path)
        blob = path.read_bytes()
        path.write_bytes(b"XXNET1\n" + blob[7:])
        with pytest.raises(FormatError):
            nnet.load_model(path)

    def test_truncated_blob_rejected(self, tiny_net, tmp_path):
        path = tmp_path / "net.tbnet"
        nnet.save_model(tiny_net, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(CorruptionError):
            nnet.load_model(path)

    def test_length_field_mismatch_rejected(self, tiny_net, tmp_path):
        path = tmp_path / "net.tbnet"
        nnet.save_model(tiny_net, path)
        blob = bytearray(path.read_bytes())
        # first length field sits right after the header line
        offset = blob.index(b"\n", len(nnet.MAGIC)) + 1
        blob[offset : offset + 8] = (2**40).to_bytes(8, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptionError):
            nnet.load_model(path)

    def test_conv_net_round_trip(self, tmp_path, rng):
        arch = nnet.ArchSpec(
            (6, 6, 1),
            (nnet.conv(1, 3, 3, 1), nnet.relu(), nnet.flatten(), nnet.dense(48, 2)),
            2,
        )
        net = nnet.init_network(arch, seed=4)
        path = tmp_path / "conv.tbnet"
        nnet.save_model(net, path)
        loaded = nnet.load_model(path)
        x = rng.uniform(0, 1, 36)
        assert np.array_equal(nnet.forward(loaded, x), nnet.forward(net, x))
