"""Shared fixtures and the acceptance-criteria summary hook.

Tests marked ``@pytest.mark.criterion(n, "description")`` feed a PASS/FAIL
line per criterion printed after the run. A criterion passes only if every
test carrying its number passed.
"""

import numpy as np
import pytest

from segsurv.volume import Mask3D, ProbMap3D, Volume3D

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(num, description): acceptance criterion this test verifies")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and not rep.failed:
        return
    num, desc = marker.args
    entry = _CRITERIA.setdefault(num, {"desc": desc, "ok": True})
    if not rep.passed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        entry = _CRITERIA[num]
        verdict = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d}: {verdict} - {entry['desc']}")


def make_mask(voxels, dims=(8, 8, 8), spacing=(1.0, 1.0, 1.0)) -> Mask3D:
    """Mask with ones at the given (x, y, z) index triples."""
    data = np.zeros(dims, dtype=np.uint8)
    for v in voxels:
        data[tuple(v)] = 1
    return Mask3D(data, spacing, (0.0, 0.0, 0.0))


def random_mask(rng, dims=(8, 8, 8), spacing=(1.0, 1.0, 1.0),
                density=0.3, nonempty=True) -> Mask3D:
    data = (rng.random(dims) < density).astype(np.uint8)
    if nonempty and data.sum() == 0:
        data[tuple(rng.integers(0, d) for d in dims)] = 1
    return Mask3D(data, spacing, (0.0, 0.0, 0.0))


def make_volume(data, spacing=(1.0, 1.0, 1.0)) -> Volume3D:
    return Volume3D(np.asarray(data, dtype=np.float64), spacing, (0.0, 0.0, 0.0))


def make_probmap(data, spacing=(1.0, 1.0, 1.0)) -> ProbMap3D:
    return ProbMap3D(np.asarray(data, dtype=np.float64), spacing, (0.0, 0.0, 0.0))


def cox_grid_search(x, time, event, lo=-5.0, hi=5.0, step=1e-4):
    """Single-coefficient Cox oracle: dense grid minimization of the
    Breslow negative log partial likelihood."""
    x = np.asarray(x, dtype=np.float64)
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.int64)
    order = np.argsort(time, kind="stable")
    xs = x[order]
    ev = event[order] == 1
    start = np.searchsorted(time[order], time[order], side="left")

    betas = lo + step * np.arange(round((hi - lo) / step) + 1)
    best_beta, best_nll = None, np.inf
    for chunk in np.array_split(betas, max(1, betas.size // 4096)):
        eta = xs[:, None] * chunk[None, :]
        m = eta.max(axis=0)
        w = np.exp(eta - m[None, :])
        suffix = np.cumsum(w[::-1], axis=0)[::-1]
        log_den = m[None, :] + np.log(suffix[start])
        nll = -(eta[ev] - log_den[ev]).sum(axis=0)
        k = int(np.argmin(nll))
        if nll[k] < best_nll:
            best_nll, best_beta = float(nll[k]), float(chunk[k])
    return best_beta


def concordance_enumeration(risk, time, event):
    """Pair-by-pair concordance oracle; returns None without comparable
    pairs."""
    total = 0
    agree = 0.0
    n = len(time)
    for i in range(n):
        for j in range(n):
            if event[i] != 1 or not time[i] < time[j]:
                continue
            total += 1
            if risk[i] > risk[j]:
                agree += 1.0
            elif risk[i] == risk[j]:
                agree += 0.5
    return None if total == 0 else agree / total


@pytest.fixture
def rng():
    return np.random.default_rng(20260819)
