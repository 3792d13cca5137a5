"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray | None],
              state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One Adam update. Returns new parameter arrays; ``state`` is updated in place.

    A ``None`` gradient is treated as zero.
    """
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(params) != len(state.first_moment) or len(grads) != len(params):
        raise ShapeError("adam_step", (len(params),), (len(grads),))
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr_t = state.learning_rate * np.sqrt(1 - b2 ** t) / (1 - b1 ** t)
    out = []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        eps_hat = state.epsilon * np.sqrt(1 - b2 ** t)
        out.append(p - (lr_t * m / (np.sqrt(v) + eps_hat)).astype(p.dtype))
    return out, state


class Adam:
    """Adam over a list of leaf tensors, updating ``.data`` from ``.grad``."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(learning_rate=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        new, _ = adam_step([p.data for p in self.params], [p.grad for p in self.params],
                           self.state)
        for p, d in zip(self.params, new):
            p.data = d
