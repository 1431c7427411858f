import os
from contextlib import contextmanager

import hypothesis
import pytest

hypothesis.settings.register_profile("default", deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_ACCEPTANCE: dict[str, tuple[str, str]] = {}
_SEVERITY = {"PASS": 0, "SKIP": 1, "FAIL": 2}


def _record(number: str, status: str, title: str) -> None:
    # several tests may share a criterion; the worst outcome wins
    old = _ACCEPTANCE.get(number)
    if old is None or _SEVERITY[status] >= _SEVERITY[old[0]]:
        _ACCEPTANCE[number] = (status, title)


@pytest.fixture
def criterion(request):
    """Record a pass/fail line for one acceptance criterion.

    Usage: ``with criterion("3", "tamper evidence"): ...``
    """

    @contextmanager
    def record(number: str, title: str):
        try:
            yield
        except pytest.skip.Exception as exc:
            _record(number, "SKIP", f"{title} ({exc})")
            raise
        except BaseException:
            _record(number, "FAIL", title)
            raise
        _record(number, "PASS", title)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE, key=lambda n: int(n)):
        status, title = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}")


@pytest.fixture
def store(tmp_path):
    from cidchain.cas import LocalStore

    return LocalStore(tmp_path / "store")
