from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from smcmix.dataset import Dataset, synth_balanced, synth_longtail
from smcmix.mixer import MaskRect, MixRecord, soft_label

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def record(fg, bg, lam=0.5, num_classes=10):
    return MixRecord(fg, bg, lam, lam, MaskRect(0, 0, 8, 8), soft_label(num_classes, fg, bg, lam))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_longtail():
    return synth_longtail(5, 10, 40, image_size=8, seed=3, channels=1)


@pytest.fixture(scope="session")
def small_balanced():
    return synth_balanced(5, 6, image_size=8, seed=3, channels=1)


def tiny_dataset(counts, shape=(1, 8, 8), seed=0):
    labels = np.repeat(np.arange(len(counts)), counts)
    pixels = np.random.default_rng(seed).uniform(0, 1, (len(labels), *shape)).astype(np.float32)
    return Dataset(pixels, labels, len(counts))


# one line per acceptance criterion, echoed after the run and kept on disk
ACCEPTANCE_LINES: list[str] = []
ACCEPTANCE_DETAILS: list[str] = []
ACCEPTANCE_REPORT = Path(__file__).resolve().parent.parent / "acceptance_report.txt"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
    ACCEPTANCE_REPORT.write_text("\n".join([*ACCEPTANCE_LINES, "", *ACCEPTANCE_DETAILS]) + "\n", encoding="utf-8")
