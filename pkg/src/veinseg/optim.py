"""RMSprop: per-element running average of squared gradients scales the step."""
from __future__ import annotations

import numpy as np

from .errors import IdentityError, ShapeError
from .tensor import Tensor4


class Rmsprop:
    """acc <- rho*acc + (1-rho)*g^2;  theta <- theta - lr*g/sqrt(acc + eps)."""

    def __init__(self, params: dict[str, Tensor4], lr: float = 1e-4,
                 rho: float = 0.9, eps: float = 1e-8):
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.acc: dict[str, np.ndarray] = {
            name: np.zeros(t.dims, dtype=t.dtype) for name, t in params.items()}

    def step(self, params: dict[str, Tensor4],
             grads: dict[str, Tensor4]) -> dict[str, Tensor4]:
        """One update; returns the new parameter tensors."""
        new_params = {}
        for name, theta in params.items():
            if name not in grads:
                raise IdentityError(f"no gradient supplied for parameter {name!r}")
            g = grads[name].data
            if g.shape != theta.dims:
                raise ShapeError(f"gradient dims {g.shape} mismatch parameter "
                                 f"{name!r} dims {theta.dims}")
            acc = self.acc[name]
            acc *= self.rho
            acc += (1.0 - self.rho) * (g * g)
            new_params[name] = Tensor4(theta.data - self.lr * g / np.sqrt(acc + self.eps))
        return new_params

    def state_tensors(self) -> dict[str, Tensor4]:
        return {name: Tensor4(a.copy()) for name, a in self.acc.items()}

    def load_state(self, tensors: dict[str, Tensor4]) -> None:
        if tensors.keys() != self.acc.keys():
            raise IdentityError("optimizer state names do not match parameters")
        for name, t in tensors.items():
            if t.dims != self.acc[name].shape:
                raise ShapeError(f"optimizer state dims mismatch for {name!r}")
            self.acc[name] = t.data.copy()
