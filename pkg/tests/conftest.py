import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sftlab.autodiff import precision  # noqa: E402


@pytest.fixture
def wide():
    with precision("wide"):
        yield


SMALL_SYNTH = dict(source_train=320, source_test_clean=40, source_test_other=20, stage_size=32, target_dev=40,
                   target_test_in=20, target_test_out=20)


@pytest.fixture(scope="session")
def small_corpus():
    from sftlab.data import SynthConfig, make_corpus

    return make_corpus(SynthConfig(seed=0, **SMALL_SYNTH))


@pytest.fixture(scope="session")
def trained_transformer(small_corpus):
    """Toy Transformer after a short source training run (shared, do not mutate)."""
    from sftlab.adaptation import OptimizerState, TrainConfig, run_stage
    from sftlab.data import SOURCE_TRAIN
    from sftlab.models import TransformerConfig, TransformerModel

    model = TransformerModel.init(TransformerConfig(), seed=0)
    run_stage(model, small_corpus[SOURCE_TRAIN], None, OptimizerState(), TrainConfig(epochs=3, seed=0))
    return model


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES):
            terminalreporter.write_line(line)
