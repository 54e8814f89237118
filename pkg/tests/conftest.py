import pytest

from flexilora import numcore as nc


@pytest.fixture
def f64():
    with nc.precision("f64"):
        nc.new_graph()
        yield
    nc.new_graph()


@pytest.fixture(autouse=True)
def _reset_graph():
    nc.new_graph()
    yield
