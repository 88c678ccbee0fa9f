import numpy as np
import pytest

from distilqa.encoder import ModelConfig, init_model
from distilqa.qa import SpanHead

TOY = ModelConfig(layers=1, hidden=8, ff=16, heads=2, vocab=100, max_positions=16)


@pytest.fixture
def toy_config():
    return TOY


@pytest.fixture
def toy_pair():
    """Seeded 4-layer teacher / 2-layer student sharing the head count."""
    teacher_cfg = ModelConfig(layers=4, hidden=8, ff=12, heads=2, vocab=12, max_positions=8)
    student_cfg = ModelConfig(layers=2, hidden=4, ff=6, heads=2, vocab=12, max_positions=8)
    teacher = init_model(teacher_cfg, 11, std=0.5, requires_grad=False)
    t_head = SpanHead.init(8, 12, std=0.5, requires_grad=False)
    student = init_model(student_cfg, 21, std=0.5)
    s_head = SpanHead.init(4, 22, std=0.5)
    return teacher, t_head, student, s_head


@pytest.fixture
def toy_batch():
    rng = np.random.default_rng(5)
    ids = rng.integers(4, 12, size=(2, 5))
    mask = np.ones((2, 5), dtype=bool)
    mask[1, 3:] = False
    span = mask.copy()
    span[:, :2] = False
    return ids, mask, span


# -- acceptance reporting -----------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one verdict line per acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({detail})"
        print(_ACCEPTANCE[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
