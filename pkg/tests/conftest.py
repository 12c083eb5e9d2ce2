import numpy as np
import pytest

from bam.model import ModelSpec, Node
from bam.tensor import SparseCountTensor

X1 = SparseCountTensor.from_dense(np.array([[2, 1, 1, 0], [0, 0, 1, 2], [0, 0, 1, 1]]))
X2 = SparseCountTensor.from_dense(np.array([[4, 3, 0], [0, 0, 3], [0, 0, 3]]))
X3 = SparseCountTensor((2, 2), {(0, 0): 3, (1, 0): 3, (1, 1): 3}, mask=[(0, 1)])
X4 = SparseCountTensor((2, 2), {(0, 0): 4, (1, 0): 4, (1, 1): 1}, mask=[(0, 1)])
S_SMALL = SparseCountTensor.from_dense(np.array([[2, 1], [0, 1]]))


def two_node(edge=None, cards=(2, 2)):
    """Fully observed model on (i, j); ``edge`` is None, "i->j" or "j->i"."""
    parents = {None: ((), ()), "i->j": ((), (0,)), "j->i": ((1,), ())}[edge]
    return ModelSpec((Node("i", cards[0]), Node("j", cards[1])), parents, (0, 1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES = []


def report(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
