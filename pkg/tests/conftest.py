import pytest

from tracemil.model import ModelConfig
from tracemil.synth import SynthConfig, make_dataset
from tracemil.train import TrainConfig, train

SMALL_SYNTH = SynthConfig(n_bags=60, instances_per_bag=4, feature_dim=6, signal_instances=2,
                          signal_strength=3.0, disagreement_rate=0.0, seed=3)
SMALL_MODEL = ModelConfig(in_dim=6, encoder_hidden=(8,), embed_dim=6, attn_dim=4, head_hidden=6)
SMALL_TRAIN = TrainConfig(epochs=4, checkpoint_every=2, seed=3)


@pytest.fixture(scope="session")
def small_dataset():
    return make_dataset(SMALL_SYNTH)


@pytest.fixture(scope="session")
def small_run(small_dataset):
    return train(SMALL_TRAIN, small_dataset.train, small_dataset.val, SMALL_MODEL, small_dataset.fingerprint())



# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
