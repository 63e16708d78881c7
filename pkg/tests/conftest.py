import sys
from pathlib import Path

import pytest

HERE = Path(__file__).parent
FIXTURES = HERE / "fixtures"
sys.path.insert(0, str(HERE))


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def stub_engine_path():
    return str(FIXTURES / "stub_engine.py")


@pytest.fixture
def fixture_catalog():
    from jsguide.catalog import load_catalog

    return load_catalog(FIXTURES / "catalog.json")
