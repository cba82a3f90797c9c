import numpy as np
import pytest

from lgvlab.model import Batch, ModelSpec, init_weights

# criterion number -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE: dict = {}


def record(n: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_batch(rng, n, d, classes):
    return Batch(rng.uniform(0, 1, size=(n, d)), rng.integers(0, classes, size=n))


@pytest.fixture
def small_net(rng):
    spec = ModelSpec((5, 7, 6, 3), "tanh")
    w = init_weights(spec, 3) + 0.1 * rng.standard_normal(spec.n_params)
    return spec, w, random_batch(rng, 9, 5, 3)
