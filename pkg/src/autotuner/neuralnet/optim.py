"""Parameters, He initialization, Adam and global gradient-norm clipping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor with a dotted name such as ``conv1.weight``."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class NonFiniteGradientError(FloatingPointError):
    pass


def he_init(shape, fan_in: int, seed=None) -> np.ndarray:
    """Normal(0, sqrt(2 / fan_in)) samples; ``seed`` may be an int or a Generator."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def clip_grad_norm(params, threshold: float = 100.0) -> float:
    """Rescale all gradients in place so their joint L2 norm is at most ``threshold``.

    Returns the norm measured before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if not np.isfinite(total):
        raise NonFiniteGradientError("gradient norm is not finite; aborting")
    if total > threshold:
        scale = threshold / total
        for g in grads:
            g *= scale
    return total


@dataclass
class AdamState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState) -> None:
    """Bias-corrected Adam update of ``params`` in place from their ``.grad``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        if m.shape != p.data.shape:
            raise ValueError(f"moment shape mismatch for {p.name}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
