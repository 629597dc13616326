"""AdamW with decoupled weight decay and a step-decay schedule.

Weight decay is applied directly to the parameter (not through the
moments), and one-dimensional parameters (biases, layer-norm scale and
shift) are exempt. After one step with gradient g, a decayed parameter
moves by ``-lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta`` where
theta is the pre-step value.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def decay_exempt(name: str, param: Tensor) -> bool:
    """Biases and norm parameters (anything 1-D) skip weight decay."""
    return param.data.ndim < 2


class AdamW:
    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 2.5e-5,
        weight_decay: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        """Update every parameter that received a gradient."""
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and not decay_exempt(name, p):
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for name in self.params:
            self.m[name] = np.asarray(state["m"][name], dtype=np.float64).reshape(
                self.m[name].shape
            )
            self.v[name] = np.asarray(state["v"][name], dtype=np.float64).reshape(
                self.v[name].shape
            )


def step_decay_lr(base_lr: float, epoch: int, decay_epochs, factor: float = 0.1) -> float:
    """Learning rate divided by 10 at each listed epoch boundary."""
    drops = sum(1 for e in decay_epochs if epoch >= e)
    return base_lr * (factor**drops)
