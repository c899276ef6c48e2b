import pytest

_ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Attach measured values to an acceptance test; echoed in the terminal summary."""
    details = {}
    _ACCEPTANCE.append((request.node, details))
    return details


def pytest_runtest_makereport(item, call):
    if call.when == "call":
        item.stash.setdefault(_OUTCOME, []).append(call.excinfo is None)


_OUTCOME = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for node, details in _ACCEPTANCE:
        ok = all(node.stash.get(_OUTCOME, [False]))
        shown = ", ".join(f"{k}={v}" for k, v in details.items())
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {node.name}  {shown}")
