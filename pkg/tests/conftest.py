import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fmgteleop.synth import generate_session, make_config  # noqa: E402


@pytest.fixture(scope="session")
def small_config():
    return make_config(seed=3, n_sessions=4, frames_per_session=300, baseline_frames=30)


@pytest.fixture(scope="session")
def small_sessions(small_config):
    return [generate_session(small_config, i)[0] for i in range(small_config.n_sessions)]


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collect criterion lines; they are printed again in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def log(line):
        lines.append(line)
        print(line)

    return log


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
