"""
Adam with per-parameter freezing.

Frozen parameters keep their values and moment estimates bit-identical across steps.
"""
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from services.tensor import Tensor
from utils.validation import check_finite, check_positive

logger = logging.getLogger(__name__)


@dataclass
class Parameter:
    """Trainable tensor plus its Adam state"""
    tensor: Tensor
    name: str
    frozen: bool = False
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    step: int = 0

    def __post_init__(self):
        self.tensor.requires_grad = True
        if self.m is None:
            self.m = np.zeros_like(self.tensor.data)
        if self.v is None:
            self.v = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    def reset_state(self) -> None:
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.step = 0


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Iterable[Parameter], lr: float, config: AdamConfig = AdamConfig()) -> int:
    """
    One bias-corrected Adam update on every non-frozen parameter, then clear all grads.

    Args:
        params: parameters to update
        lr: learning rate, must be > 0

    Returns:
        Number of parameters updated
    """
    check_positive("learning rate", lr)

    updated = 0
    for p in params:
        grad = p.tensor.grad
        if p.frozen or grad is None:
            p.tensor.grad = None
            continue
        check_finite(f"gradient of {p.name}", grad)

        p.step += 1
        p.m = config.beta1 * p.m + (1 - config.beta1) * grad
        p.v = config.beta2 * p.v + (1 - config.beta2) * grad * grad
        m_hat = p.m / (1 - config.beta1 ** p.step)
        v_hat = p.v / (1 - config.beta2 ** p.step)
        update = lr * m_hat / (np.sqrt(v_hat) + config.eps)
        p.tensor.data = (p.tensor.data - update).astype(p.tensor.data.dtype, copy=False)
        p.tensor.grad = None
        updated += 1
    return updated


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None


def set_trainable(params: Iterable[Parameter], trainable) -> int:
    """Freeze every parameter whose name is not selected by `trainable(name)`"""
    active = 0
    for p in params:
        p.frozen = not trainable(p.name)
        active += 0 if p.frozen else 1
    return active
