"""Finite-difference verification of recorded adjoints.

The checker is deliberately independent of the engine internals: it re-runs
the forward function with perturbed plain-numpy inputs and compares central
differences against the gradients produced by ``backward()``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import DiffArray


@dataclass
class InputReport:
    shape: tuple
    max_rel_err: float
    max_abs_err: float


@dataclass
class GradCheckReport:
    passed: bool
    tol: float
    max_rel_err: float
    inputs: list[InputReport] = field(default_factory=list)

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        per = ", ".join(f"{r.shape}: {r.max_rel_err:.3e}" for r in self.inputs)
        return f"gradcheck {status} (tol {self.tol:.1e}, max rel err {self.max_rel_err:.3e}; {per})"


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return np.abs(analytic - numeric) / scale


def finite_diff_check(
    fn: Callable[..., DiffArray],
    inputs: Sequence[np.ndarray],
    tol: float = 1e-4,
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare ``backward()`` gradients of a scalar-valued ``fn`` with central differences.

    ``fn`` receives one DiffArray per entry of ``inputs`` and must return a
    scalar DiffArray.  Gradients are checked element by element at 64-bit
    precision; the report carries the worst relative error per input.
    """
    # order="C" so the flat reshape below is a writable view; np.array's
    # default order="K" keeps e.g. transposed layouts, for which reshape(-1)
    # silently copies and in-place perturbations would be lost.
    inputs = [np.array(x, dtype=np.float64, order="C") for x in inputs]
    leaves = [DiffArray(x, requires_grad=True) for x in inputs]
    out = fn(*leaves)
    if not isinstance(out, DiffArray) or out.size != 1:
        raise ValueError("finite_diff_check: fn must return a scalar DiffArray")
    out.backward()
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves
    ]

    def value_at(arrays) -> float:
        return float(fn(*[DiffArray(a) for a in arrays]).data)

    report = GradCheckReport(passed=True, tol=tol, max_rel_err=0.0)
    for k, x in enumerate(inputs):
        numeric = np.zeros_like(x)
        flat = x.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = value_at(inputs)
            flat[i] = orig - h
            f_minus = value_at(inputs)
            flat[i] = orig
            num_flat[i] = (f_plus - f_minus) / (2.0 * h)
        err = _rel_err(analytic[k], numeric)
        rep = InputReport(x.shape, float(err.max()), float(np.abs(analytic[k] - numeric).max()))
        report.inputs.append(rep)
        report.max_rel_err = max(report.max_rel_err, rep.max_rel_err)
    report.passed = report.max_rel_err <= tol
    return report


def finite_diff_spot(
    loss_fn: Callable[[], float],
    array: np.ndarray,
    flat_indices: Sequence[int],
    h: float = 1e-5,
) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. selected entries of ``array``.

    The array is perturbed in place and restored, so it can be a live model
    parameter buffer; ``loss_fn`` must recompute the loss from current state.
    """
    flat = array.reshape(-1)
    out = np.zeros(len(flat_indices))
    for j, i in enumerate(flat_indices):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = loss_fn()
        flat[i] = orig - h
        f_minus = loss_fn()
        flat[i] = orig
        out[j] = (f_plus - f_minus) / (2.0 * h)
    return out
