import numpy as np
import pytest
import torch

from bottlevc.config import load_config
from bottlevc.corpus import SpeakerRegistry
from bottlevc.synth import default_speakers, synth_utterance
from bottlevc.training import TrainItem

torch.set_num_threads(1)


def smoke_items(n_speakers=2, n_utts=4, n_samples=8192):
    items = []
    for i, spk in enumerate(default_speakers(n_speakers)):
        for u in range(n_utts):
            w, _ = synth_utterance(spk, n_samples, seed=i * 10 + u)
            items.append(TrainItem(w.samples, i, f"{spk.name}/u{u}"))
    return items


@pytest.fixture(scope="session")
def smoke_set():
    registry = SpeakerRegistry([s.name for s in default_speakers(2)])
    return smoke_items(), registry


@pytest.fixture
def smoke_config():
    return load_config(preset="smoke")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = [v for r in terminalreporter.getreports("passed") + terminalreporter.getreports("failed")
             if r.when == "call" for k, v in r.user_properties if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
