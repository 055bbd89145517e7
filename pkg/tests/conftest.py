import pytest

from helpers import running


@pytest.fixture
def running_fixture():
    return running()
