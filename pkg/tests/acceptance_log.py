"""Collects one verdict line per acceptance criterion for the terminal summary."""

from __future__ import annotations

import functools
import sys

LINES: dict[int, str] = {}


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{number}] {'PASS' if ok else 'FAIL'} {title}: {detail}"
    LINES[number] = line
    print(line, file=sys.stderr)
    assert ok, line


def criterion(number: int, title: str):
    """Record a FAIL line when the wrapped test dies before reaching its verdict."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except Exception as exc:
                LINES.setdefault(number, f"[{number}] FAIL {title}: {type(exc).__name__}: {exc}")
                raise
        return run
    return wrap
