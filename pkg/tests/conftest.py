from __future__ import annotations

import pytest

from optistate import get_profile


@pytest.fixture(scope="session")
def v100():
    return get_profile("v100-node")


@pytest.fixture(scope="session")
def h100():
    return get_profile("h100-node")
