import pytest

from aggtopk.model import Dataset
from helpers import make_d0


@pytest.fixture
def d0() -> Dataset:
    return make_d0()
