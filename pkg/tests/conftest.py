import pytest

from implite import testing
from implite.runner import ImpModel


@pytest.fixture(scope="session")
def tiny_model_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("models") / "tiny.impb"
    testing.build_tiny_model(path, seed=0)
    return str(path)


@pytest.fixture(scope="session")
def tiny_model(tiny_model_path):
    return ImpModel.load(tiny_model_path)


@pytest.fixture(scope="session")
def test_image():
    return testing.random_rgb(seed=7, width=80, height=60)
