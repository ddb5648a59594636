import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    ``criterion(n, ok, detail)`` records and asserts; a test that dies before
    recording is reported as FAIL with the error.
    """
    results = request.config.stash[_RESULTS]
    seen = []

    def record(number, ok, detail=""):
        seen.append(number)
        results[number] = ("PASS" if ok else "FAIL", detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, f"criterion {number}: {detail}"

    yield record
    marker = request.node.get_closest_marker("criterion")
    if marker is not None and marker.args[0] not in seen:
        results.setdefault(marker.args[0], ("FAIL", "test raised before reporting"))


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}")
