import pytest

from mimhsi import autodiff as ad


@pytest.fixture(autouse=True)
def _fresh_tape():
    ad.clear_tape()
    yield
    ad.clear_tape()
