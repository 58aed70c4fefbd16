"""Single-worker synchronous SGD, the oracle the cluster is checked against."""

from __future__ import annotations

import numpy as np

from hpsim.model import Model, backward, forward
from hpsim.optimizer import HyperParams, OptimizerState


class SingleWorkerSGD:
    """Plain momentum SGD on one model copy with batch-mean gradients."""

    def __init__(self, model: Model, hp: HyperParams):
        self.model = model.copy()
        self.hp = hp
        self.state = OptimizerState.zeros_like(self.model.params)

    def step(self, batch: np.ndarray, targets: np.ndarray, lr: float | None = None) -> float:
        dtype = self.model.conv_params[0].dtype
        batch = np.asarray(batch, dtype=dtype)
        targets = np.asarray(targets, dtype=dtype)
        cache = forward(self.model, batch)
        grads = backward(self.model, cache, targets)
        self.state.step(self.model.params, grads.all, self.hp.lr if lr is None else lr, self.hp)
        return grads.loss


def max_relative_divergence(params: list[np.ndarray], reference: list[np.ndarray]) -> float:
    """Largest per-tensor ``max|p - r| / max|r|`` over a parameter list.

    A reference tensor that is identically zero is compared in absolute terms.
    """
    worst = 0.0
    for p, r in zip(params, reference, strict=True):
        diff = float(np.max(np.abs(p.astype(np.float64) - r.astype(np.float64)), initial=0.0))
        scale = float(np.max(np.abs(r), initial=0.0))
        worst = max(worst, diff / scale if scale > 0 else diff)
    return worst
