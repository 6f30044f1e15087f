"""Collects one PASS/FAIL/SKIP line per acceptance criterion for the terminal summary."""

import functools
import time

import pytest

RESULTS = []


def criterion(number: int, title: str):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except pytest.skip.Exception as exc:
                RESULTS.append((number, "SKIP", title, str(exc.msg)))
                raise
            except BaseException as exc:
                RESULTS.append((number, "FAIL", title, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"))
                raise
            took = time.perf_counter() - start
            RESULTS.append((number, "PASS", title, f"{detail + '; ' if detail else ''}{took:.1f}s"))

        return run

    return wrap


def summary_lines():
    return [f"[{status}] criterion {n:>2}: {title} ({detail})" for n, status, title, detail in sorted(RESULTS)]
