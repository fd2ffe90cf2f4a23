"""Shared fixtures: synthetic corpora and trained models.

Everything here is deterministic; session scope keeps the expensive
model fits to one apiece for the whole run.
"""

import numpy as np
import pytest

from aqcodec import CodecConfig
from aqcodec.model import train_encoder

from synth import pseudo_speech, speech_corpus

# Criterion results are echoed in the terminal summary so the pass/fail
# lines survive pytest's output capture.
_CRITERION_LINES: list[str] = []


def record_criterion(line: str) -> None:
    _CRITERION_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERION_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_corpus():
    return speech_corpus(8, 7.0, seed=5)


@pytest.fixture(scope="session")
def tiny_model(tiny_corpus):
    """Small but fully functional model for mechanics tests."""
    cfg = CodecConfig(k_sem=16, num_stages=3, use_stages=3, gl_iterations=8)
    return train_encoder(cfg, tiny_corpus, trained_on="tiny-fixture")


@pytest.fixture(scope="session")
def accept_train():
    return speech_corpus(40, 6.0, seed=11)


@pytest.fixture(scope="session")
def accept_held():
    return speech_corpus(6, 3.0, seed=77)


@pytest.fixture(scope="session")
def accept_model(accept_train):
    """Quality-bearing model: 64 semantic codes, 3 acoustic stages."""
    cfg = CodecConfig(k_sem=64, num_stages=3, use_stages=3, gl_iterations=24)
    return train_encoder(cfg, accept_train, trained_on="accept-fixture")


@pytest.fixture(scope="session")
def target_train():
    """Speaker-5 adaptation set; f0 and vowel spacing sit outside the
    broad corpus speakers."""
    return [pseudo_speech(5.0, seed=900 + i, speaker=5) for i in range(16)]


@pytest.fixture(scope="session")
def target_held():
    return [pseudo_speech(3.0, seed=950 + i, speaker=5) for i in range(5)]


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
