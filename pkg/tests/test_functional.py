import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from manetl import functional as F
from manetl.exceptions import ConfigurationError, DimensionError, ManetlError, NumericalError
from manetl.tensor import Parameter, Tensor, detect_anomaly, no_grad, topological_order

from oracles import avg_pool_loops, conv2d_loops, dense_loops, gap_loops, softmax_scalar


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestConv2d:
    def test_identity_kernel(self):
        out = F.conv2d(Tensor([[[[3.0]]]]), Tensor([[[[1.0]]]]), Tensor([0.0]))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 3.0

    def test_zero_input_gives_bias(self, rng):
        bias = Tensor([0.5, -2.0, 7.0])
        out = F.conv2d(Tensor(np.zeros((2, 2, 5, 5))), Tensor(rng.standard_normal((3, 2, 3, 3))),
                       bias, stride=1, padding=1)
        for c in range(3):
            assert np.all(out.data[:, c] == bias.data[c])

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = F.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                       Tensor(b, dtype=np.float64), 1, 1)
        assert np.max(np.abs(out.data - conv2d_loops(x, w, b, 1, 1))) < 1e-6

    @pytest.mark.parametrize("k,stride,padding", list(itertools.product((1, 3, 5), (1, 2, 3), (0, 1, 2))))
    def test_grid_float32(self, k, stride, padding):
        rng = np.random.default_rng(k * 100 + stride * 10 + padding)
        x = rng.standard_normal((2, 2, 7, 6)).astype(np.float32)
        w = rng.standard_normal((3, 2, k, k)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
        assert out.dtype == np.float32
        ref = conv2d_loops(x, w, b, stride, padding)
        assert out.shape == ref.shape
        # float32 accumulation over at most 50 products
        assert np.max(np.abs(out.data - ref)) < 1e-5

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(DimensionError, match="axis \\(1\\)"):
            F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError, match="axis 2"):
            F.conv2d(Tensor(np.zeros((1, 1, 2, 4))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_conv_spec_output_size(self):
        spec = F.ConvSpec(480, 48, 5, 5, 1, 2)
        assert spec.output_size(14, 14) == (14, 14)
        with pytest.raises(ConfigurationError):
            F.ConvSpec(1, 1, 3, 3, stride=0)


class TestDense:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4)).astype(np.float32)
        out = F.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_input(self):
        out = F.dense(Tensor(np.zeros((2, 3))), Tensor(np.ones((4, 3))), Tensor([1, 2, 3, 4]))
        np.testing.assert_array_equal(out.data, [[1, 2, 3, 4]] * 2)

    def test_matches_summation(self, rng):
        x, w, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 3)), rng.standard_normal(4)
        out = F.dense(*(Tensor(a, dtype=np.float64) for a in (x, w, b)))
        assert np.max(np.abs(out.data - dense_loops(x, w, b))) < 1e-6

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            F.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestBatchNorm:
    def test_train_normalizes(self, rng):
        x = Tensor(rng.standard_normal((16, 5)) * 3 + 2, dtype=np.float64)
        out = F.batch_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)), np.zeros(5), np.ones(5),
                           True)
        assert np.all(np.abs(out.data.mean(axis=0)) < 1e-5)
        assert np.all(np.abs(out.data.var(axis=0) - 1) < 1e-5)

    def test_constant_column(self):
        x = Tensor(np.array([[2.0, 1.0], [2.0, 3.0], [2.0, 5.0]]))
        out = F.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2),
                           True)
        assert np.all(out.data[:, 0] == 0)

    def test_eval_hand_formula(self):
        mu, var, gamma, beta = 0.5, 4.0, 2.0, -1.0
        x = np.array([[1.0], [3.0], [-2.0]])
        out = F.batch_norm(Tensor(x, dtype=np.float64), Tensor([gamma], dtype=np.float64),
                           Tensor([beta], dtype=np.float64), np.array([mu]), np.array([var]),
                           False)
        expected = [(v - mu) / math.sqrt(var + 1e-5) * gamma + beta for v in x[:, 0]]
        np.testing.assert_allclose(out.data[:, 0], expected, atol=1e-12)

    def test_running_stats_momentum(self):
        x = np.array([[1.0], [3.0]])
        rm, rv = np.zeros(1), np.ones(1)
        F.batch_norm(Tensor(x, dtype=np.float64), Tensor([1.0]), Tensor([0.0]), rm, rv, True)
        assert rm[0] == pytest.approx(0.1 * 2.0)
        # unbiased batch variance of [1, 3] is 2
        assert rv[0] == pytest.approx(0.9 + 0.1 * 2.0)

    def test_batch_of_one_rejected(self):
        with pytest.raises(ConfigurationError):
            F.batch_norm(Tensor(np.zeros((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                         np.zeros(3), np.ones(3), True)


def test_relu_cases():
    assert np.all(F.relu(Tensor([-3.0, -0.1])).data == 0)
    np.testing.assert_array_equal(F.relu(Tensor([0.5, 2.0])).data, [0.5, 2.0])
    np.testing.assert_array_equal(F.relu(Tensor([-1.0, 0.0, 2.5])).data, [0, 0, 2.5])


class TestPooling:
    def test_avg_constant(self):
        out = F.avg_pool2d(Tensor(np.full((1, 2, 6, 6), 4.5)), 3, 2)
        assert np.all(out.data == 4.5)

    def test_avg_two_by_two(self):
        out = F.avg_pool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
        assert out.item() == 2.5

    def test_avg_oracle(self, rng):
        x = rng.standard_normal((2, 3, 8, 7))
        out = F.avg_pool2d(Tensor(x, dtype=np.float64), 5, 3)
        assert np.max(np.abs(out.data - avg_pool_loops(x, 5, 3))) < 1e-6

    def test_avg_window_too_large(self):
        with pytest.raises(DimensionError):
            F.avg_pool2d(Tensor(np.zeros((1, 1, 4, 4))), 5, 3)

    def test_gap(self, rng):
        assert np.all(F.global_avg_pool(Tensor(np.full((2, 3, 4, 4), 1.5))).data == 1.5)
        assert F.global_avg_pool(Tensor([[[[0.0, 0.0], [0.0, 4.0]]]])).item() == 1.0
        x = rng.standard_normal((2, 3, 5, 4))
        assert np.max(np.abs(F.global_avg_pool(Tensor(x, dtype=np.float64)).data
                             - gap_loops(x))) < 1e-6

    def test_max_pool(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        np.testing.assert_array_equal(F.max_pool2d(x, 2, 2).data[0, 0], [[5, 7], [13, 15]])
        same = F.max_pool2d(x, 3, 1, 1)
        assert same.shape == (1, 1, 4, 4)
        assert same.data[0, 0, 0, 0] == 5


class TestSoftmax:
    def test_uniform(self):
        out = F.softmax(Tensor(np.zeros((2, 4))))
        np.testing.assert_allclose(out.data, 0.25)

    def test_large_logits(self):
        out = F.softmax(Tensor(np.array([[1000.0, 0.0]])))
        assert np.all(np.isfinite(out.data))
        assert out.data[0, 0] == pytest.approx(1.0)
        assert out.data[0, 1] == pytest.approx(0.0, abs=1e-300)

    def test_explicit_oracle(self):
        out = F.softmax(Tensor(np.array([[1.0, 2.0, 3.0]]), dtype=np.float64))
        assert np.max(np.abs(out.data[0] - softmax_scalar([1.0, 2.0, 3.0]))) < 1e-7

    @settings(max_examples=200, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=8),
                      elements=st.floats(-1e4, 1e4)))
    def test_rows_sum_to_one(self, logits):
        out = F.softmax(Tensor(logits, dtype=np.float64))
        assert np.all(np.abs(out.data.sum(axis=1) - 1.0) < 1e-6)


class TestDropout:
    def test_eval_identity(self, rng):
        x = Tensor(rng.standard_normal((4, 5)))
        out = F.dropout(x, 0.7, False)
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_rate_identity(self, rng):
        x = Tensor(rng.standard_normal((4, 5)))
        np.testing.assert_array_equal(F.dropout(x, 0.0, True, rng).data, x.data)

    def test_statistics(self):
        x = Tensor(np.ones(200_000))
        out = F.dropout(x, 0.7, True, np.random.default_rng(42)).data
        survivors = out[out != 0]
        assert abs(survivors.size / out.size - 0.3) < 0.02
        np.testing.assert_allclose(survivors, np.float32(1 / 0.3))

    def test_invalid_rate(self):
        with pytest.raises(ConfigurationError):
            F.dropout(Tensor(np.ones(3)), 1.0, True, np.random.default_rng(0))


class TestConcat:
    def test_shapes_and_slices(self, rng):
        a = Tensor(rng.standard_normal((2, 2, 3, 3)))
        b = Tensor(rng.standard_normal((2, 3, 3, 3)))
        out = F.concat_channels(a, b)
        assert out.shape[1] == 5
        np.testing.assert_array_equal(out.data[:, :2], a.data)
        np.testing.assert_array_equal(out.data[:, 2:], b.data)

    def test_empty_second(self, rng):
        a = Tensor(rng.standard_normal((2, 2, 3, 3)))
        out = F.concat_channels(a, Tensor(np.zeros((2, 0, 3, 3))))
        np.testing.assert_array_equal(out.data, a.data)

    def test_spatial_mismatch(self):
        with pytest.raises(DimensionError):
            F.concat_channels(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 4, 3))))


class TestCrossEntropy:
    def test_uniform_is_log_k(self):
        loss = F.cross_entropy(Tensor(np.zeros((3, 7)), dtype=np.float64), [0, 3, 6])
        assert loss.item() == pytest.approx(math.log(7), abs=1e-12)

    def test_margin_monotone(self):
        losses = []
        for margin in (0.0, 1.0, 5.0, 20.0, 80.0):
            logits = np.array([[margin, 0.0, 0.0]])
            losses.append(F.cross_entropy(Tensor(logits, dtype=np.float64), [0]).item())
        assert all(a > b for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 1e-30

    def test_two_term_formula(self):
        loss = F.cross_entropy(Tensor([[1.0, 2.0]], dtype=np.float64), [1])
        expected = -math.log(math.exp(2) / (math.exp(1) + math.exp(2)))
        assert abs(loss.item() - expected) < 1e-7

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            F.cross_entropy(Tensor(np.zeros((1, 3))), [3])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Parameter(rng.standard_normal((3, 4)))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_relu_negative_zero_grad(self):
        x = Parameter(-np.ones(5))
        F.relu(x).sum().backward()
        np.testing.assert_array_equal(x.grad, np.zeros(5))

    def test_non_scalar_rejected(self):
        x = Parameter(np.ones(3))
        with pytest.raises(ManetlError):
            (x * 2.0).backward()

    def test_accumulation_doubles(self, rng):
        x = Parameter(rng.standard_normal((2, 1, 5, 5)))
        w = Parameter(rng.standard_normal((2, 1, 3, 3)))
        loss = F.cross_entropy(F.global_avg_pool(F.relu(F.conv2d(x, w, None, 1, 1))), [0, 1])
        loss.backward()
        once = w.grad.copy()
        loss.backward()
        np.testing.assert_array_equal(w.grad, 2 * once)

    def test_graph_is_acyclic(self, rng):
        x = Parameter(rng.standard_normal((2, 3)))
        y = F.relu(x) + x * 2.0
        z = (y * y).sum()
        order = topological_order(z)
        position = {id(t): i for i, t in enumerate(order)}
        for node in order:
            for parent in node.parents:
                assert position[id(parent)] < position[id(node)]

    def test_no_grad(self):
        x = Parameter(np.ones(3))
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y.parents == ()

    def test_anomaly_mode(self):
        with detect_anomaly(), pytest.raises(NumericalError):
            Tensor([1.0]) * np.inf

    def test_float32_preserved(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
        w = Parameter(rng.standard_normal((2, 3, 3, 3)).astype(np.float32))
        out = F.conv2d(x, w, None, 1, 1)
        out.sum().backward()
        assert out.dtype == np.float32 and w.grad.dtype == np.float32
