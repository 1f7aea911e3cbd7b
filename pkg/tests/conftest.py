import numpy as np
import pytest

from hipda import synth
from hipda.trainer import TrainConfig


@pytest.fixture(scope="session")
def outcome_model():
    return synth.default_outcome_model()


@pytest.fixture(scope="session")
def small_pair(outcome_model):
    """Labeled SOF-like source (n=400) and an unlabeled UKB-like target (n=60)."""
    src = synth.generate(synth.get_spec("sof-like"), outcome_model, 400, 0)
    tgt = synth.generate(synth.get_spec("ukb-female-like"), None, 60, 1)
    return src, tgt


def fast_config(**kw) -> TrainConfig:
    base = dict(hidden=8, max_epochs=3, patience=2, batch_size=32)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "CRITERIA", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
