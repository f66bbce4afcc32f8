"""Shared pytest plumbing.

The acceptance tests register one human-readable line per criterion; the
terminal-summary hook prints them after the run regardless of capture
settings, so the pass/fail ledger is always visible.
"""

from __future__ import annotations

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    word = "PASS" if passed else "FAIL"
    _ACCEPTANCE_LINES.append(f"criterion {number:2d} {word}  {detail}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
