"""Acceptance criteria 1-12, one test each.

Every test writes a single ``[PASS]``/``[FAIL]`` line straight to the terminal
(bypassing capture) and asserts the check's verdict. The stream
criteria (8-11) share cached runs and take tens of minutes on one core.
"""
import pytest

from vcotta import verify


@pytest.mark.parametrize("check", verify.ALL_CHECKS, ids=lambda c: f"criterion_{c.criterion:02d}")
def test_criterion(check, capsys):
    res = check()
    with capsys.disabled():
        print("\n" + res.line())
    assert res.passed, res.line()
