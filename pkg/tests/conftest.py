from __future__ import annotations

import pytest

from _support import TINY, load_dir
from essd.synth import benchmark_suite, generate


@pytest.fixture(scope="session")
def tiny():
    return load_dir(TINY)


@pytest.fixture(scope="session")
def smoke_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    generate(benchmark_suite("smoke", seed=1), out)
    return out


@pytest.fixture(scope="session")
def smoke(smoke_dir):
    return load_dir(smoke_dir)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        ok, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
