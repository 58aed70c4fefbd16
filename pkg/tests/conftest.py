import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hpsim.model import ConvLayer, FCLayer, ModelSpec, toy_spec  # noqa: E402

ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy():
    return toy_spec()


@pytest.fixture
def deep_spec():
    """Two conv and two FC layers, so FC-internal collectives are exercised."""
    return ModelSpec(
        input_shape=(3, 8, 8),
        conv_layers=(ConvLayer(3, 4, 3, 1, 1, True), ConvLayer(4, 4, 4, 2, 1, True)),
        fc_layers=(FCLayer(64, 12, relu=True), FCLayer(12, 5)),
    )


@pytest.fixture
def criterion(request):
    """Record an acceptance criterion outcome for the end-of-run summary."""
    name = request.node.get_closest_marker("criterion").args[0]

    def record(ok: bool, detail: str = ""):
        ACCEPTANCE_RESULTS[name] = (bool(ok), detail)
        assert ok, f"{name}: {detail}"

    yield record
    if name not in ACCEPTANCE_RESULTS:
        ACCEPTANCE_RESULTS[name] = (False, "did not complete")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion label")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[0])):
        ok, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}  {detail}")
