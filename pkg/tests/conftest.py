"""Collects acceptance verdicts and prints one line per criterion at session end."""
import os
from pathlib import Path

import pytest
import torch

CRITERIA = {
    1: "algebraic identities",
    2: "differentiability",
    3: "GAFM identity and sensitivity",
    4: "toy guidance adaptation",
    5: "refine phase reduces KLD",
    6: "self-augmentation delta",
    7: "metric oracles",
    8: "reproducibility",
}


def pytest_configure(config):
    config.guidnoise_checks = {}
    torch.set_num_threads(int(os.environ.get("GUIDNOISE_THREADS", "1")))


@pytest.fixture
def record(request):
    """``record(criterion, name, passed, detail)`` stores one check verdict."""
    def _record(criterion: int, name: str, passed: bool, detail: str) -> bool:
        request.config.guidnoise_checks.setdefault(criterion, []).append((name, bool(passed), detail))
        return bool(passed)
    return _record


def acceptance_lines(checks: dict) -> list[str]:
    lines = []
    for k, title in CRITERIA.items():
        got = checks.get(k)
        if not got:
            lines.append(f"criterion {k} [{title}]: NOT RUN")
            continue
        verdict = "PASS" if all(ok for _, ok, _ in got) else "FAIL"
        detail = "; ".join(f"{name} {'ok' if ok else 'FAILED'} ({d})" for name, ok, d in got)
        lines.append(f"criterion {k} [{title}]: {verdict} :: {detail}")
    extra = checks.get("desk")
    if extra:
        for name, ok, d in extra:
            lines.append(f"desk-model check [{name}]: {'PASS' if ok else 'FAIL'} ({d})")
    return lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    checks = config.guidnoise_checks
    if not checks:
        return
    lines = acceptance_lines(checks)
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
    out = Path(os.environ.get("GUIDNOISE_ACCEPT_OUT", Path(__file__).parent.parent / "acceptance_output"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "acceptance_summary.txt").write_text("\n".join(lines) + "\n")
