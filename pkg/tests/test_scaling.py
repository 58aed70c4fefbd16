import math

import numpy as np
import pytest

from hpsim.exceptions import DomainError
from hpsim.scaling import plan, scale_lr, scale_weight_decay_approx, scale_weight_decay_exact


def test_scale_lr_rules():
    assert scale_lr(0.01, 8) == pytest.approx(0.0282843, abs=1e-7)
    assert scale_lr(0.01, 8, "heuristic_linear") == pytest.approx(0.08, rel=1e-15)
    assert scale_lr(0.3, 1) == scale_lr(0.3, 1, "heuristic_linear") == 0.3


def test_scale_lr_rejects_bad_input():
    with pytest.raises(DomainError):
        scale_lr(0.01, 0)
    with pytest.raises(DomainError):
        scale_lr(0.01, 2, "cubic")


def test_exact_decay_reference_value():
    assert scale_weight_decay_exact(0.01, 0.0005, 8) == pytest.approx(0.0014141888, abs=1e-9)


def test_approx_decay_reference_value():
    assert scale_weight_decay_approx(0.0005, 8) == pytest.approx(0.0014142136, abs=1e-10)


def test_exact_decay_degenerate_cases():
    assert scale_weight_decay_exact(0.01, 0.0005, 1) == pytest.approx(0.0005, rel=1e-14)
    assert scale_weight_decay_exact(0.01, 0.0, 8) == 0.0


def test_exact_decay_domain():
    with pytest.raises(DomainError):
        scale_weight_decay_exact(1.0, 1.0, 2)


def test_small_lr_limit():
    # the relative gap is (k-1)*lr*wd/2 to leading order: 1.75e-9 here
    exact = scale_weight_decay_exact(1e-6, 0.0005, 8)
    gap = 1 - exact / scale_weight_decay_approx(0.0005, 8)
    assert gap == pytest.approx(7 * 1e-6 * 0.0005 / 2, rel=1e-6)


def test_exact_below_approx_within_gap_bound(rng):
    for _ in range(200):
        lr = 10 ** rng.uniform(-5, -1)
        wd = 10 ** rng.uniform(-5, -2)
        k = int(rng.integers(2, 65))
        exact, approx = scale_weight_decay_exact(lr, wd, k), scale_weight_decay_approx(wd, k)
        assert exact <= approx
        assert 1 - exact / approx <= (k - 1) * lr * wd / 2 + 1e-15


def test_lr_monotone_in_k():
    ks = np.linspace(1, 64, 50)
    for rule in ("theory_sqrt", "heuristic_linear"):
        vals = [scale_lr(0.01, k, rule) for k in ks]
        assert all(a < b for a, b in zip(vals, vals[1:]))
    assert all(scale_lr(0.01, k, "heuristic_linear") >= scale_lr(0.01, k) for k in ks)


def test_plan_practical_decay():
    p = plan(0.01, 0.0005, 8, "heuristic_linear")
    assert p.lr_scaled == pytest.approx(0.08) and p.weight_decay_practical == 0.0005
    q = plan(0.01, 0.0005, 8)
    assert q.weight_decay_practical == q.weight_decay_exact
    assert math.isclose(q.to_dict()["lr_scaled"], 0.01 * math.sqrt(8))
