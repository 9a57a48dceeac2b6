import numpy as np
import pytest

from gesture_kd.config import ModelConfig
from gesture_kd.synth import generate_to_disk

TINY = ModelConfig(seq_len=4, d_model=6, heads=2, ff_dim=8, blocks=1, fc_dim=5, num_classes=3,
                   lstm_hidden=4, chunk_size=2, dropout=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_to_disk(root, num_classes=4, subjects=6, trials=5, seed=0)
    return root


@pytest.fixture(autouse=True)
def invariant_checks():
    from gesture_kd import autograd as ag

    ag.set_invariant_checks(True)
    yield
    ag.set_invariant_checks(False)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.VERDICTS:
            terminalreporter.write_line(line)
