import dataclasses

import pytest
import torch

from msstyle.batch import FeatureStats, Featurizer, PhonemeInventory, WindowDataset
from msstyle.config import TINY_MODEL, TINY_SCHEDULE
from msstyle.corpus import generate_toy_corpus
from msstyle.model import build_model


@pytest.fixture(scope="session")
def toy8():
    return generate_toy_corpus(7, 8)


@pytest.fixture(scope="session")
def toy_tools(toy8):
    inv = PhonemeInventory.from_corpus(toy8)
    stats = FeatureStats.from_corpus(toy8)
    return inv, stats


@pytest.fixture
def dataset(toy8, toy_tools):
    inv, stats = toy_tools
    return WindowDataset(toy8, Featurizer(TINY_MODEL, inv, stats))


@pytest.fixture
def model(toy_tools):
    inv, stats = toy_tools
    return build_model(TINY_MODEL, inv, stats, seed=11)


@pytest.fixture
def short_schedule():
    return dataclasses.replace(TINY_SCHEDULE, stage1_steps_per_level=6, stage2_steps=6, stage3_steps=6,
                               batch_size=4, warmup_steps=5)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("AC")[1].split(" ")[0])):
            terminalreporter.write_line(line)
