"""Momentum SGD with weight decay and the stepwise learning-rate schedule.

The update is written as a descent step::

    dw <- mu * dw - lr * (g + wd * w)
    w  <- w + dw

where ``g`` is the batch-mean gradient of the loss.  Written with
``+ lr * (<dE/dw> - wd * w)`` the rule would ascend the loss, so the
gradient term carries a minus sign here while the decay term keeps the
sign that shrinks ``w`` (with ``g = 0, mu = 0`` a step gives
``w * (1 - lr * wd)``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from hpsim.exceptions import ConfigurationError, DimensionError

SCHEDULE_FACTOR = 250.0 ** (-1.0 / 3.0)
SCHEDULE_MILESTONES = (0.25, 0.5, 0.75)


@dataclass(frozen=True)
class HyperParams:
    """``fc_lr`` is the learning rate for per-sub-batch FC updates in variable
    batch mode; ``None`` means use ``lr``."""

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 90
    milestones: tuple[float, ...] = SCHEDULE_MILESTONES
    factor: float = SCHEDULE_FACTOR
    fc_lr: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(self.milestones))
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.lr >= 0.0:
            raise ConfigurationError(f"lr must be non-negative, got {self.lr}")
        if not self.weight_decay >= 0.0:
            raise ConfigurationError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.fc_lr is not None and not self.fc_lr >= 0.0:
            raise ConfigurationError(f"fc_lr must be non-negative, got {self.fc_lr}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(f"malformed hyperparameters: {exc}") from exc


def momentum_update(w, dw, g, lr: float, momentum: float, weight_decay: float):
    """Return ``(w', dw')``; pure, works on arrays or scalars."""
    if np.shape(w) != np.shape(dw) or np.shape(w) != np.shape(g):
        raise DimensionError(f"shapes differ: w {np.shape(w)}, dw {np.shape(dw)}, g {np.shape(g)}")
    new_dw = momentum * dw - lr * (g + weight_decay * w)
    return w + new_dw, new_dw


def lr_at(progress: float, base_lr: float, milestones=SCHEDULE_MILESTONES, factor: float = SCHEDULE_FACTOR) -> float:
    """Learning rate after multiplying by ``factor`` at each milestone already passed."""
    passed = sum(1 for m in milestones if progress > m)
    return base_lr * factor**passed


@dataclass
class OptimizerState:
    """Momentum buffers for one parameter list and a count of updates applied."""

    buffers: list[np.ndarray]
    updates: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params])

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float, hp: HyperParams) -> None:
        """Apply one momentum update in place to ``params``."""
        if len(params) != len(grads) or len(params) != len(self.buffers):
            raise DimensionError("params, grads and momentum buffers differ in length")
        for i, (w, g) in enumerate(zip(params, grads)):
            new_w, new_dw = momentum_update(w, self.buffers[i], g, lr, hp.momentum, hp.weight_decay)
            w[...] = new_w
            self.buffers[i] = new_dw
        self.updates += 1
