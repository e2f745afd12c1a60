from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from bssgan.errors import ConfigError, NumericError
from bssgan.tensor.core import Tensor


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``.

    Every gradient is checked before any parameter moves, so a non-finite
    gradient leaves both the parameters and the state untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise ConfigError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r} at Adam step {state.t + 1}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype, copy=False)
    return state


class Adam:
    """Adam bound to one parameter dictionary."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 2e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        adam_step(self.params, grads, self.state, self.lr)

    def state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        """Flat view of the optimizer state for checkpointing."""
        out = {f"{prefix}t": np.array([self.state.t], dtype=np.float32)}
        for name in self.state.m:
            out[f"{prefix}m/{name}"] = self.state.m[name]
            out[f"{prefix}v/{name}"] = self.state.v[name]
        return out

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray], prefix: str) -> None:
        self.state.t = int(tensors[f"{prefix}t"][0])
        for key, arr in tensors.items():
            if key.startswith(f"{prefix}m/"):
                self.state.m[key[len(prefix) + 2 :]] = np.array(arr)
            elif key.startswith(f"{prefix}v/"):
                self.state.v[key[len(prefix) + 2 :]] = np.array(arr)
