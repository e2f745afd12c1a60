"""Central finite-difference checks for recorded ops, run in float64."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from bssgan.tensor.core import Tape, Tensor, backward, check_mode


def numerical_gradient(fn: Callable[[dict[str, Tensor]], Tensor], inputs: Mapping[str, np.ndarray], name: str, h: float = 1e-3) -> np.ndarray:
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    grad = np.zeros_like(base[name])
    flat = base[name].reshape(-1)
    gflat = grad.reshape(-1)
    with check_mode():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            plus = fn({k: Tensor(v) for k, v in base.items()}).item()
            flat[i] = old - h
            minus = fn({k: Tensor(v) for k, v in base.items()}).item()
            flat[i] = old
            gflat[i] = (plus - minus) / (2.0 * h)
    return grad


def analytic_gradient(fn, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    with check_mode():
        tensors = {k: Tensor(np.array(v, dtype=np.float64), name=k, requires_grad=True) for k, v in inputs.items()}
        with Tape() as tape:
            loss = fn(tensors)
        return backward(tape, loss, tensors)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradcheck(fn, inputs: Mapping[str, np.ndarray], h: float = 1e-3) -> dict[str, float]:
    """Per-input max relative error between backward() and central differences.

    ``fn`` maps a dict of tensors to a scalar tensor and must be a pure
    function of its inputs (fix any randomness inside it).
    """
    analytic = analytic_gradient(fn, inputs)
    return {
        name: relative_error(analytic[name], numerical_gradient(fn, inputs, name, h))
        for name in inputs
    }
