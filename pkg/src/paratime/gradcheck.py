"""Finite-difference verification of analytic gradients.

The checker compares tape gradients against central differences coordinate
by coordinate. Coordinates where the two one-sided secants disagree sharply
(a kink, e.g. relu crossing zero) are excluded and reported rather than
failed, since no central difference is meaningful there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tape, Tensor

__all__ = ["GradCheckReport", "grad_check"]


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_checked: int
    excluded: list[int] = field(default_factory=list)
    worst_index: int = -1

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max_rel_err={self.max_rel_err:.3e} (tol={self.tol:.1e}, "
            f"worst at flat index {self.worst_index}, {self.n_checked} checked, "
            f"{len(self.excluded)} kink-excluded)"
        )


def grad_check(
    f,
    x: Tensor,
    step: float = 1e-5,
    tol: float = 1e-4,
    kink_tol: float = 1e-3,
) -> GradCheckReport:
    """Check the analytic gradient of scalar-valued ``f`` with respect to ``x``.

    ``f`` must be deterministic and is re-evaluated with ``x.data`` perturbed
    in place, so it may either use its argument or close over ``x`` (the
    usual pattern for model parameters). 64-bit data is required; central
    differences are not trustworthy in 32-bit.
    """
    if x.dtype != np.float64:
        raise ContractError(f"grad_check requires float64 input, got {x.dtype}")

    prev_rg = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    if y.size != 1:
        raise ContractError(f"grad_check target must be scalar, got shape {y.shape}")
    tape.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.requires_grad = prev_rg
    x.grad = None

    base = float(y.data.reshape(-1)[0])
    if not np.isfinite(base):
        raise NumericError("grad_check: base evaluation is non-finite")

    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    max_rel = 0.0
    worst = -1
    excluded: list[int] = []
    n_checked = 0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x).data.reshape(-1)[0])
        flat[i] = orig - step
        fm = float(f(x).data.reshape(-1)[0])
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"grad_check: non-finite evaluation at flat index {i}")
        d_plus = (fp - base) / step
        d_minus = (base - fm) / step
        if abs(d_plus - d_minus) > kink_tol * max(1.0, abs(d_plus), abs(d_minus)):
            excluded.append(i)
            continue
        numeric = (fp - fm) / (2.0 * step)
        rel = abs(numeric - aflat[i]) / max(abs(numeric), abs(aflat[i]), 1e-6)
        n_checked += 1
        if rel > max_rel:
            max_rel, worst = rel, i
    return GradCheckReport(max_rel_err=max_rel, tol=tol, n_checked=n_checked, excluded=excluded, worst_index=worst)
