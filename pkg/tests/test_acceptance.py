"""Acceptance gate: each criterion at its stated tolerance and runtime budget.

Every test prints one PASS/FAIL line (shown even when output is captured).
"""

import pytest

from rslab.acceptance import CRITERIA


@pytest.mark.parametrize("cid", list(CRITERIA))
def test_criterion(cid, capsys):
    result = CRITERIA[cid]()
    with capsys.disabled():
        print("\n" + result.line())
    assert result.passed, result.detail
    assert result.within_time, f"runtime {result.runtime:.2f}s exceeds {result.limit:g}s"
