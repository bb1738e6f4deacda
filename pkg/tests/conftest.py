import time

import numpy as np
import pytest

from pdfembed.encoder import ModelConfig
from pdfembed.objectives import ObjectiveSpec
from pdfembed.synthgen import SynthConfig, generate
from pdfembed.training import Schedule, train

# Acceptance results collected by tests/test_acceptance.py, printed at the end.
ACCEPTANCE = {}

E2E_SYNTH = SynthConfig(seed=0)
E2E_SCHEDULE = Schedule(epochs=40, lr=5.0, batch_size=50)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}. {line}")


@pytest.fixture(scope="session")
def e2e_data():
    """2,000 train and 400 test pairs from disjoint pair indices."""
    return generate(E2E_SYNTH, 2000), generate(E2E_SYNTH, 400, offset=1_000_000)


@pytest.fixture(scope="session")
def e2e_models(e2e_data):
    """KL-exponential and one-hot encoders trained with the same schedule and seed."""
    train_set, _ = e2e_data
    config = ModelConfig()
    out = {}
    for name in ("kl-exp", "onehot"):
        spec = ObjectiveSpec.from_name(name)
        t0 = time.perf_counter()
        result = train(config, train_set, spec, E2E_SCHEDULE, seed=0)
        out[name] = (result, spec, time.perf_counter() - t0)
    return config, out


@pytest.fixture
def criterion():
    """``criterion(key, ok, line)`` records an acceptance result and prints it."""

    def record(key, ok, line):
        ACCEPTANCE[key] = (bool(ok), line)
        print(f"[{'PASS' if ok else 'FAIL'}] {key}. {line}")
        return ok

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
