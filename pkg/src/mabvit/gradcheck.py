"""Finite-difference verification of analytic gradients.

This is the package's independent oracle: every differentiable operation is
validated against central differences computed in float64, never against the
autograd engine itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError
from .tensor import Tensor, zero_grads

# Below this magnitude the relative error is meaningless; fall back to the
# absolute error instead.
ABS_FALLBACK_FLOOR = 1e-6


@dataclass
class GradReport:
    """Outcome of one finite-difference check over a parameter list."""

    max_rel_err: list[float] = field(default_factory=list)
    max_abs_err: list[float] = field(default_factory=list)
    passed: bool = True
    tolerance: float = 0.0

    @property
    def worst(self) -> float:
        return max(self.max_rel_err, default=0.0)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: {len(self.max_rel_err)} parameter tensors, "
            f"worst rel err {self.worst:.3e} (tol {self.tolerance:.1e})"
        )


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a deterministic scalar function of ``params`` (a closure
    re-running the forward pass on each call).  Each parameter entry is
    perturbed by ``+-eps`` in turn; the resulting slope is compared with the
    gradient produced by one ``backward()`` sweep.
    """
    if not (0.0 < eps <= 1e-3):
        raise ValueError(f"eps must be in (0, 1e-3], got {eps}")

    zero_grads(params)
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("f() returned a non-finite value at the base point")
    loss.backward()
    analytic = []
    for p in params:
        analytic.append(np.zeros_like(p.data) if p.grad is None else p.grad.copy())

    report = GradReport(tolerance=tol)
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"f() returned a non-finite value while perturbing parameter {k}")
            fd[i] = (f_plus - f_minus) / (2.0 * eps)

        a = analytic[k].reshape(-1)
        abs_err = np.abs(a - fd)
        denom = np.maximum(np.abs(a), np.abs(fd))
        rel_err = np.where(denom > ABS_FALLBACK_FLOOR, abs_err / np.maximum(denom, 1e-300), abs_err)
        report.max_abs_err.append(float(abs_err.max(initial=0.0)))
        report.max_rel_err.append(float(rel_err.max(initial=0.0)))
        if report.max_rel_err[-1] > tol:
            report.passed = False

    zero_grads(params)
    return report
