"""Finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, precision


@dataclass
class GradCheckReport:
    max_relative_error: float
    passed: bool
    tolerance: float
    location: str = ""
    details: list = field(default_factory=list)

    @property
    def pass_(self) -> bool:
        return self.passed


def _relative(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor] | Tensor,
               tolerance: float = 1e-6, names: Sequence[str] | None = None,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f()`` against central differences
    with step ``1e-5 * (1 + |x_i|)`` for every entry of every input.

    ``f`` takes no arguments and must read the current values of ``inputs``;
    inputs are perturbed in place. Large inputs can be subsampled with
    ``max_entries`` (entries chosen by ``rng``).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    with precision(np.float64):
        for x in inputs:
            if x.data.dtype != np.float64:
                raise TypeError("grad_check needs float64 inputs")
            x.requires_grad = True
            x.grad = None
        out = f()
        if not np.all(np.isfinite(out.data)):
            return GradCheckReport(np.inf, False, tolerance, "forward output")
        out.backward()
        worst, where = 0.0, ""
        details = []
        for name, x in zip(names, inputs):
            analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
            if not np.all(np.isfinite(analytic)):
                bad = np.argwhere(~np.isfinite(analytic))[0]
                return GradCheckReport(np.inf, False, tolerance, f"{name}{tuple(bad)} analytic")
            flat = x.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
            numeric = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                h = 1e-5 * (1.0 + abs(orig))
                flat[i] = orig + h
                up = float(f().data)
                flat[i] = orig - h
                down = float(f().data)
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    return GradCheckReport(np.inf, False, tolerance,
                                           f"{name}{np.unravel_index(i, x.shape)} numeric")
                numeric[j] = (up - down) / (2 * h)
            err = _relative(analytic.reshape(-1)[idx], numeric)
            m = float(err.max()) if err.size else 0.0
            details.append((name, m))
            if m > worst:
                worst = m
                where = f"{name}{np.unravel_index(idx[int(err.argmax())], x.shape)}"
        return GradCheckReport(worst, worst <= tolerance, tolerance, where, details)
