"""Adam optimizer and He weight initialization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor4
from .errors import ShapeError


@dataclass
class AdamState:
    """Per-parameter moment accumulators and step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: Tensor4) -> "AdamState":
        return cls(m=np.zeros_like(param.data), v=np.zeros_like(param.data))


def adam_step(param: Tensor4, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, applied to param.data in place."""
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    if grad.shape != param.data.shape:
        raise ShapeError(f"adam_step: grad shape {grad.shape} != param dims {param.dims}")
    if state.m.shape != param.data.shape or state.v.shape != param.data.shape:
        raise ShapeError("adam_step: state shape does not match parameter")

    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    param.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.data.dtype)


def he_init(shape: tuple[int, int, int, int], rng: np.random.Generator,
            fan_in: int | None = None, dtype=np.float64,
            requires_grad: bool = True) -> Tensor4:
    """Zero-mean Gaussian tensor with variance 2 / fan_in.

    fan_in defaults to in_ch * kh * kw of a convolution weight (shape axis 1
    times the kernel area); transposed-convolution weights, whose input
    channel count sits on axis 0, pass it explicitly.
    """
    if len(shape) != 4:
        raise ShapeError(f"he_init expects a 4-dim shape, got {shape}")
    if fan_in is None:
        fan_in = shape[1] * shape[2] * shape[3]
    if fan_in <= 0:
        raise ShapeError(f"he_init: fan_in must be positive, got {fan_in}")
    std = float(np.sqrt(2.0 / fan_in))
    data = rng.normal(0.0, std, size=shape).astype(dtype)
    return Tensor4(data, requires_grad=requires_grad)


@dataclass
class AdamParams:
    """Hyperparameters of the optimizer, grouped for passing around."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict[str, AdamState] = field(default_factory=dict)

    def step(self, name: str, param: Tensor4, lr: float | None = None) -> None:
        if param.grad is None:
            return
        if name not in self.states:
            self.states[name] = AdamState.zeros_like(param)
        adam_step(param, param.grad, self.states[name],
                  lr if lr is not None else self.lr,
                  self.beta1, self.beta2, self.eps)
