"""Finite-difference verification of analytic gradients.

Every differentiable path in the package is checked against central
differences in float64. The per-entry relative error uses the denominator
``max(|analytic|, |numeric|, floor)``; the floor (default 1e-3) absorbs
finite-difference roundoff on entries whose true gradient is ~0, while a
genuine backprop bug still shows up at O(1) because real gradient entries
sit far above the floor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
_REL_FLOOR = 1e-3


def finite_difference(fn, arrays: dict[str, np.ndarray], step: float = DEFAULT_STEP) -> dict[str, np.ndarray]:
    """Central-difference gradient of the scalar ``fn()`` w.r.t. each array.

    ``fn`` must read the arrays in place; they are perturbed one entry at a
    time and restored exactly.
    """
    grads: dict[str, np.ndarray] = {}
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise ValueError(f"finite_difference needs float64 arrays, {name} is {arr.dtype}")
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn()
            flat[i] = orig - step
            f_minus = fn()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
        grads[name] = g
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = _REL_FLOOR) -> float:
    """Largest per-entry relative disagreement between two gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


@dataclass
class GradCheckReport:
    """Outcome of one analytic-vs-finite-difference comparison."""

    component: str
    tolerance: float
    group_errors: dict[str, float] = field(default_factory=dict)
    resamples: int = 0

    @property
    def max_error(self) -> float:
        return max(self.group_errors.values()) if self.group_errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [
            f"[{status}] {self.component}: max rel err {self.max_error:.3e} "
            f"(tolerance {self.tolerance:.1e}, resamples {self.resamples})"
        ]
        for name, err in sorted(self.group_errors.items()):
            lines.append(f"    {name:30s} {err:.3e}")
        return "\n".join(lines)


def compare_gradients(component: str, analytic: dict[str, np.ndarray],
                      numeric: dict[str, np.ndarray],
                      tolerance: float = DEFAULT_TOLERANCE,
                      resamples: int = 0) -> GradCheckReport:
    report = GradCheckReport(component=component, tolerance=tolerance, resamples=resamples)
    for name in numeric:
        report.group_errors[name] = relative_error(analytic[name], numeric[name])
    return report
