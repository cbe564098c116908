import pytest

from hdix.raster import make_fixture
from hdix.sift import detect

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def text_512():
    return make_fixture("random_text_like", 512, seed=1)


@pytest.fixture(scope="session")
def text_512_kps(text_512):
    return detect(text_512)


@pytest.fixture(scope="session")
def blob_256():
    return make_fixture("gaussian_blob", 256, sigma=8)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
