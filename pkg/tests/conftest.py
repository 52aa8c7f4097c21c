from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import settings

torch.set_num_threads(1)
settings.register_profile("edgereg", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("edgereg")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def central_fd(fn, x: torch.Tensor, index, h: float) -> float:
    """Central difference of a scalar function w.r.t. one entry of ``x``."""
    x = x.detach().clone()
    orig = x[index].item()
    with torch.no_grad():
        x[index] = orig + h
        up = float(fn(x))
        x[index] = orig - h
        down = float(fn(x))
    return (up - down) / (2 * h)


# acceptance bookkeeping: criterion number -> list of (test name, outcome, detail)
_ACCEPTANCE: dict[int, list[tuple[str, str, str]]] = {}
ACCEPTANCE_DETAILS: dict[str, str] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        outcome = "PASS" if call.excinfo is None else "FAIL"
        detail = ACCEPTANCE_DETAILS.get(item.name, "")
        if call.excinfo is not None and not detail:
            detail = call.excinfo.exconly().splitlines()[0][:160]
        _ACCEPTANCE.setdefault(marker.args[0], []).append((item.name, outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        parts = _ACCEPTANCE[n]
        verdict = "PASS" if all(o == "PASS" for _, o, _ in parts) else "FAIL"
        failed = [f"{name}: {d}" for name, o, d in parts if o == "FAIL"]
        notes = [d for name, o, d in parts if o == "PASS" and d]
        tr.write_line(f"criterion {n:2d}: {verdict}  ({len(parts)} checks)")
        for line in failed + notes:
            tr.write_line(f"    {line}")
