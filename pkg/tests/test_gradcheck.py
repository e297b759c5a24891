"""The finite-difference checker must accept correct gradients and, more
importantly, reject planted-bug gradients — otherwise it proves nothing."""

import numpy as np
import pytest

from mabvit.errors import NumericError
from mabvit.gradcheck import grad_check
from mabvit.tensor import Tensor


def test_accepts_correct_gradient(rng):
    w = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    x = Tensor(rng.standard_normal((2, 3)))

    report = grad_check(lambda: (x @ w).sigmoid().sum(), [w])
    assert report.passed
    assert report.worst <= 1e-4
    assert report.summary().startswith("PASS: 1 parameter tensors")


def test_rejects_planted_wrong_gradient(rng):
    class BadSquare(Tensor):
        """x^2 whose backward claims d/dx = x instead of 2x."""

        def square_bad(self):
            x = self

            def bw(g):
                x._accumulate(g * x.data)

            return Tensor._make(x.data * x.data, (x,), bw)

    w = BadSquare(rng.standard_normal(5) + 2.0, requires_grad=True)
    report = grad_check(lambda: w.square_bad().sum(), [w])
    assert not report.passed
    assert report.worst > 0.4  # claims x where truth is 2x: rel err ~ 1/2
    assert report.summary().startswith("FAIL")


def test_rejects_sign_flip(rng):
    class BadNeg(Tensor):
        def neg_bad(self):
            x = self

            def bw(g):
                x._accumulate(g)  # wrong sign

            return Tensor._make(-x.data, (x,), bw)

    w = BadNeg(rng.standard_normal(4) + 1.0, requires_grad=True)
    report = grad_check(lambda: w.neg_bad().sum(), [w])
    assert not report.passed


def test_multiple_params_reported_separately(rng):
    a = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    report = grad_check(lambda: ((a * b) + a.exp()).sum(), [a, b])
    assert report.passed
    assert len(report.max_rel_err) == 2
    assert len(report.max_abs_err) == 2


def test_unused_param_counts_as_zero_gradient(rng):
    used = Tensor(rng.standard_normal(3), requires_grad=True)
    unused = Tensor(rng.standard_normal(3), requires_grad=True)
    report = grad_check(lambda: (used * used).sum(), [used, unused])
    assert report.passed  # analytic None == fd zero


def test_perturbation_is_restored(rng):
    w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    before = w.data.copy()
    grad_check(lambda: (w * w).sum(), [w])
    np.testing.assert_array_equal(w.data, before)
    assert w.grad is None  # checker cleans up after itself


def test_nonfinite_base_point_raises():
    w = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    with np.errstate(invalid="ignore"), pytest.raises(NumericError):
        grad_check(lambda: (w.log()).sum(), [w])  # log(-1) = nan


def test_bad_eps_rejected(rng):
    w = Tensor(rng.standard_normal(2), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: w.sum(), [w], eps=0.0)
    with pytest.raises(ValueError):
        grad_check(lambda: w.sum(), [w], eps=0.5)


def test_near_zero_gradients_use_absolute_error():
    # d/dx of x^2 at x=0 is 0; relative error is meaningless there but the
    # check must still pass via the absolute-error fallback.
    w = Tensor(np.zeros(3), requires_grad=True)
    report = grad_check(lambda: (w * w).sum(), [w])
    assert report.passed
