import pytest

from niom.harness.synth import build_benchmark


@pytest.fixture(scope="session")
def bench10(tmp_path_factory):
    """Manifest path of a freshly generated 10-pair synthetic benchmark."""
    return build_benchmark(tmp_path_factory.mktemp("bench10"), n_pairs=10, seed=0)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Collects ``(criterion, passed, detail)`` lines for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(lines):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
