import pathlib

import pytest

import canarylab
from canarylab.attack import parse_script
from canarylab.program import parse_program

DATA_DIR = pathlib.Path(__file__).parent / "data"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # Pass/fail lines recorded by the acceptance gate; printed here so they
    # survive output capture.
    from tests.acceptance_log import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def corpus_program(name):
    return parse_program(canarylab.corpus_path(name).read_text())


def corpus_script(name):
    return parse_script(canarylab.corpus_path(name).read_text())


@pytest.fixture(scope="session")
def demo():
    return corpus_program("demo.json")


@pytest.fixture(scope="session")
def twobuf():
    return corpus_program("twobuf.json")


@pytest.fixture(scope="session")
def chain():
    return corpus_program("chain.json")


@pytest.fixture(scope="session")
def single():
    return corpus_program("single.json")


@pytest.fixture(scope="session")
def overflow_demo():
    return corpus_program("overflow_demo.json")
