import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from trajdiff import problems  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(params=["tabletop", "two_car"])
def small_task(request):
    return problems.tabletop(6) if request.param == "tabletop" else problems.two_car(5)
