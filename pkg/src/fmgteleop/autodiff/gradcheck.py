"""Finite-difference verification of reverse-mode gradients."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    per_param: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    def __str__(self):
        status = "ok" if self.passed else "FAILED"
        return f"grad_check {status}: max rel. error {self.max_rel_error:.3e} at {self.worst_param!r}"


def numeric_grad(fn, arr, step=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. every element of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn().data)
        flat[i] = orig - step
        fm = float(fn().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def grad_check(fn, params, tolerance=1e-4, step=1e-5, analytic=None):
    """Compare reverse-mode gradients of scalar ``fn()`` against central differences.

    ``params`` maps names to leaf tensors (64-bit). The error for a tensor is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``, i.e.
    relative to that tensor's gradient scale; the report keeps the worst.
    ``analytic`` may supply precomputed gradients (used for negative controls).
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, {name!r} is {p.data.dtype}")
    if analytic is None:
        for p in params.values():
            p.grad = None
        fn().backward()
        analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
                    for name, p in params.items()}
    per_param = {}
    for name, p in params.items():
        num = numeric_grad(fn, p.data, step)
        ana = analytic[name]
        scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0))
        diff = np.abs(ana - num).max(initial=0.0)
        per_param[name] = 0.0 if scale == 0 else diff / scale
    worst = max(per_param, key=per_param.get)
    return GradCheckReport(per_param[worst], worst, per_param, tolerance)
