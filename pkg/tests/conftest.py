import contextlib

import pytest

_RESULTS: dict = {}


@pytest.fixture
def criterion():
    """Context manager that records one PASS/FAIL line per acceptance criterion.

    The body stores a short summary in ``state["detail"]``; any exception
    (including a failed assert) marks the criterion FAIL and is re-raised.
    """

    @contextlib.contextmanager
    def run(key, title):
        state = {"detail": ""}
        try:
            yield state
        except BaseException as e:
            msg = str(e).splitlines()[0] if str(e) else type(e).__name__
            _RESULTS[key] = f"FAIL {key}. {title}: {state['detail']} [{msg}]".replace(":  [", ": [")
            print(_RESULTS[key])
            raise
        _RESULTS[key] = f"PASS {key}. {title}: {state['detail']}"
        print(_RESULTS[key])

    return run


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS, key=lambda k: (len(str(k)), str(k))):
        terminalreporter.write_line(_RESULTS[key])
