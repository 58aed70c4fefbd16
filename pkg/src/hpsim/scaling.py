"""Hyperparameter transforms for multiplying the batch size by ``k``.

Weight decay is rescaled so that one decay step at the larger batch matches
``k`` decay steps at the smaller batch (momentum ignored)::

    (1 - lr * wd) ** k == 1 - lr' * wd'

with ``lr' = sqrt(k) * lr``.  Solving for ``wd'`` gives the exact rule;
``sqrt(k) * wd`` is its small-``lr`` limit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from hpsim.exceptions import DomainError

RULES = ("theory_sqrt", "heuristic_linear")


def _check_k(k: float) -> None:
    if not k > 0:
        raise DomainError(f"batch multiplier k must be positive, got {k}")


def scale_lr(lr: float, k: float, rule: str = "theory_sqrt") -> float:
    _check_k(k)
    if not lr > 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    if rule == "theory_sqrt":
        return lr * math.sqrt(k)
    if rule == "heuristic_linear":
        return lr * k
    raise DomainError(f"unknown rule {rule!r}; expected one of {RULES}")


def scale_weight_decay_exact(lr: float, weight_decay: float, k: float) -> float:
    """``wd' = (1 - (1 - lr*wd)**k) / (sqrt(k) * lr)``."""
    _check_k(k)
    decay = lr * weight_decay
    if not 0 <= decay < 1:
        raise DomainError(f"lr * weight_decay must lie in [0, 1), got {decay}")
    if decay == 0:
        return 0.0
    # 1 - (1 - x)**k without cancellation for small x
    shrink = -math.expm1(k * math.log1p(-decay))
    return shrink / (math.sqrt(k) * lr)


def scale_weight_decay_approx(weight_decay: float, k: float) -> float:
    _check_k(k)
    return math.sqrt(k) * weight_decay


@dataclass(frozen=True)
class ScalePlan:
    k: float
    lr: float
    weight_decay: float
    rule: str
    lr_scaled: float
    weight_decay_exact: float
    weight_decay_approx: float
    weight_decay_practical: float

    def to_dict(self) -> dict:
        return asdict(self)


def plan(lr: float, weight_decay: float, k: float, rule: str = "theory_sqrt") -> ScalePlan:
    """Bundle the scaled values for one batch-size change.

    The exact and approximate decay always use the sqrt(k) learning rate they
    were derived for.  ``weight_decay_practical`` is the value to pair with
    ``lr_scaled`` under ``rule``: the exact decay for the theory rule, and the
    unchanged decay for the linear heuristic.
    """
    lr_scaled = scale_lr(lr, k, rule)
    exact = scale_weight_decay_exact(lr, weight_decay, k)
    practical = exact if rule == "theory_sqrt" else weight_decay
    return ScalePlan(
        k=k,
        lr=lr,
        weight_decay=weight_decay,
        rule=rule,
        lr_scaled=lr_scaled,
        weight_decay_exact=exact,
        weight_decay_approx=scale_weight_decay_approx(weight_decay, k),
        weight_decay_practical=practical,
    )
