"""Central-difference check of reverse-mode gradients."""
from dataclasses import dataclass, field

import numpy as np

from .core import DiffArray, backward


@dataclass
class GradCheckReport:
    max_rel_error: list = field(default_factory=list)
    tolerance: float = 1e-4
    epsilon: float = 1e-6

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.max_rel_error)

    @property
    def worst(self):
        return max(self.max_rel_error, default=0.0)


def grad_check(f, inputs, epsilon=1e-6, tolerance=1e-4, floor=1e-4):
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` with central differences.

    The relative error per element is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    values = [np.array(x.value if isinstance(x, DiffArray) else x, dtype=np.float64) for x in inputs]
    leaves = [DiffArray(v, requires_grad=True) for v in values]
    backward(f(*leaves))

    def evaluate(vals):
        return float(f(*[DiffArray(v) for v in vals]).value)

    report = GradCheckReport(tolerance=tolerance, epsilon=epsilon)
    for i, v in enumerate(values):
        numeric = np.zeros_like(v)
        flat = v.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            hi = evaluate(values)
            flat[j] = orig - epsilon
            lo = evaluate(values)
            flat[j] = orig
            numeric.reshape(-1)[j] = (hi - lo) / (2 * epsilon)
        analytic = leaves[i].grad
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        report.max_rel_error.append(float(np.max(np.abs(analytic - numeric) / denom)) if v.size else 0.0)
    return report
