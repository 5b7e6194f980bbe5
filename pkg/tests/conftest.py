import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

import acceptance_log  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    lines = acceptance_log.lines()
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """The generator defaults written to disk once per session."""
    from multianomaly.datagen import SyntheticSpec, generate, save_dataset

    out = tmp_path_factory.mktemp("default-data")
    data = generate(SyntheticSpec())
    save_dataset(data, out)
    return data, out
