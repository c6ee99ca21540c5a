import numpy as np
import pytest

from arhnet import tensor as T
from arhnet.errors import UsageError
from arhnet.gradcheck import OP_NAMES, finite_difference_check, relative_error, run_gradchecks


def test_relative_error():
    assert relative_error(np.array([1.0]), np.array([1.0])) == 0.0
    assert relative_error(np.array([1.0]), np.array([-1.0])) == 1.0
    assert relative_error(np.array([0.0]), np.array([0.0])) == 0.0


@pytest.mark.parametrize("name", OP_NAMES)
def test_op_gradients(name):
    (result,) = run_gradchecks([name])
    assert result.passed, f"{name}: {result.error:.3e}"


def test_end_to_end_gradient():
    (result,) = run_gradchecks(["end_to_end"])
    assert result.passed, f"{result.error:.3e}"


def test_sum_of_squares(float64, rng):
    theta = T.parameter(rng.standard_normal((3, 4)))
    assert finite_difference_check(lambda t: T.reduce_sum(t * t), theta) < 1e-6


def flipped_square(x):
    def backward_fn(g):
        T._accumulate(x, -2.0 * g * x.data)

    return T._result(x.data * x.data, (x,), backward_fn, "flipped_square")


def test_broken_backward_is_caught(float64, rng):
    theta = T.parameter(rng.uniform(0.5, 1.5, size=(2, 3)))
    assert finite_difference_check(lambda t: T.reduce_sum(flipped_square(t)), theta) > 0.1


def test_sweep_reports_each_eps():
    (result,) = run_gradchecks(["sigmoid"], sweep=True)
    assert set(result.sweep) == {1e-2, 1e-3, 1e-4}
    assert all(v < 1e-3 for v in result.sweep.values())


def test_unknown_op():
    with pytest.raises(UsageError):
        run_gradchecks(["nonsense"])
