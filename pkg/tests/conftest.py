import numpy as np
import pytest
import torch

from diffcbed.scm import Dag, Scm

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def chain3():
    """0 -> 1 -> 2 with unit noise."""
    w = np.zeros((3, 3))
    w[0, 1] = 1.5
    w[1, 2] = -0.8
    return Scm(Dag(3, ((0, 1), (1, 2))), w, np.ones(3))


_acceptance_lines: list[str] = []


@pytest.fixture
def criterion():
    """Records one PASS/FAIL line per acceptance criterion for the run summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _acceptance_lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(_acceptance_lines):
            terminalreporter.write_line(line)
