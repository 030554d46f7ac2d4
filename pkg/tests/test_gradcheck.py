import numpy as np
import pytest

from manetl import functional as F
from manetl import gradsuite
from manetl.exceptions import NumericalError
from manetl.gradcheck import finite_diff_check
from manetl.tensor import Parameter, Tensor, inject_fault


def test_sum_of_squares_passes():
    p = Parameter(np.random.default_rng(0).standard_normal((3, 4)), dtype=np.float64)
    report = finite_diff_check(lambda: (p * p).sum(), [p], names=["p"])
    assert report.passed
    assert report.checked == {"p": 12}
    assert report.max_error < 1e-9


def test_wrong_gradient_is_reported():
    p = Parameter(np.array([1.0, 2.0]), dtype=np.float64)
    with inject_fault("mul", 1.5):
        report = finite_diff_check(lambda: (p * p).sum(), [p], names=["p"])
    assert not report.passed
    assert report.failures() == {"p": pytest.approx(1 / 3)}
    assert report.worst()[0] == "p"


def test_element_sampling():
    p = Parameter(np.random.default_rng(1).standard_normal(50), dtype=np.float64)
    report = finite_diff_check(lambda: (p * p).sum(), [p], max_elements=5,
                               rng=np.random.default_rng(0))
    assert report.checked == {"param0": 5}


def test_params_restored_and_grads_cleared():
    data = np.random.default_rng(2).standard_normal(6)
    p = Parameter(data.copy(), dtype=np.float64)
    finite_diff_check(lambda: (p * p * p).sum(), [p])
    assert p.data.tobytes() == data.tobytes()
    assert p.grad is None


def test_non_finite_objective():
    p = Parameter(np.array([np.inf]), dtype=np.float64)
    with pytest.raises(NumericalError):
        finite_diff_check(lambda: (p * p).sum(), [p])


def test_gradient_below_noise_floor_counts_as_zero():
    # the true gradient is zero; a central difference sees only rounding noise
    p = Parameter(np.array([0.3]), dtype=np.float64)
    big = Tensor(np.array([1e6]), dtype=np.float64)
    report = finite_diff_check(lambda: (big + p * 0.0).sum(), [p], h=1e-6)
    assert report.passed


@pytest.mark.parametrize("seed", range(3))
def test_primitive_suite(seed):
    for result in gradsuite.primitive_checks(seed):
        assert result.passed, (result.name, result.report.errors)
        assert result.tol == 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_composed_suite(seed):
    for result in gradsuite.composed_checks(seed):
        assert result.passed, (result.name, result.report.errors)


@pytest.mark.parametrize("op,check", [("conv2d", "conv2d"), ("batch_norm", "batch_norm_train"),
                                      ("max_pool2d", "max_pool2d"), ("softmax", "softmax"),
                                      ("channel_scale", "channel_scale")])
def test_fault_injection_is_caught(op, check):
    with inject_fault(op, 1.1):
        results = {r.name: r for r in gradsuite.primitive_checks(0)}
    assert not results[check].passed
    assert results["dense"].passed


def test_fault_does_not_leak():
    x = Parameter(np.array([[1.0, -1.0]]), dtype=np.float64)
    with inject_fault("relu", 2.0):
        F.relu(x).sum().backward()
    assert x.grad.tolist() == [[2.0, 0.0]]
    x.grad = None
    F.relu(x).sum().backward()
    assert x.grad.tolist() == [[1.0, 0.0]]
