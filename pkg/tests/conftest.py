import contextlib
import io
import os

import pytest
from threadpoolctl import threadpool_limits

from efayolo.cli import main


def run_cli(*argv):
    """Run the CLI in-process; returns (exit code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            code = main([str(a) for a in argv])
        except SystemExit as exc:  # argparse usage errors
            code = exc.code
    return code, out.getvalue(), err.getvalue()


def parse_kv(text):
    out = {}
    for line in text.splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            out[k.strip()] = v.strip()
    return out


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """The default ``train-toy`` run (size 64, width 0.25, 200 steps, seed 42), trained once per session."""
    out_dir = tmp_path_factory.mktemp("toy")
    with threadpool_limits(limits=1):
        code, stdout, stderr = run_cli("train-toy", "--out-dir", out_dir)
    assert code == 0, stderr
    return {"dir": out_dir, "report": parse_kv(stdout), "stdout": stdout}


@pytest.fixture
def in_tmp(tmp_path):
    old = os.getcwd()
    os.chdir(tmp_path)
    yield tmp_path
    os.chdir(old)


# filled by test_acceptance; echoed after the run so the verdicts are visible without -s
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
