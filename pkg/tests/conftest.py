import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=15, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)


def random_mask(rng, shape, kind=None):
    """A nonempty, not-full binary mask: blobs, boxes or sparse noise."""
    kind = kind or rng.choice(["blob", "box", "noise"])
    if kind == "box":
        m = np.zeros(shape, dtype=bool)
        lo = [rng.integers(0, s) for s in shape]
        hi = [rng.integers(l + 1, s + 1) for l, s in zip(lo, shape)]
        m[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
    elif kind == "noise":
        m = rng.random(shape) < rng.uniform(0.05, 0.5)
    else:
        c = np.array([rng.uniform(0, s - 1) for s in shape])
        r = rng.uniform(1.0, max(1.0, max(shape) / 2))
        g = np.indices(shape).transpose(1, 2, 3, 0)
        m = np.sum((g - c) ** 2, axis=-1) <= r * r
    if not m.any():
        m[tuple(rng.integers(0, s) for s in shape)] = True
    if m.all():
        m[tuple(rng.integers(0, s) for s in shape)] = False
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report: one line per criterion -----------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "detail": []})
    if rep.failed:
        entry["ok"] = False
        entry["detail"].append(item.name)
    elif rep.when == "call" and rep.skipped:
        entry["ok"] = False
        entry["detail"].append(item.name + " (skipped)")
    detail = getattr(item, "_acceptance_detail", None)
    if detail and rep.when == "call":
        entry["detail"].append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        extra = "; ".join(e["detail"])
        terminalreporter.write_line(f"[{'PASS' if e['ok'] else 'FAIL'}] {n:>2}. {e['title']}"
                                    + (f"  ({extra})" if extra else ""))


@pytest.fixture
def detail(request):
    """Attach a one-line measurement to the acceptance summary."""
    def set_detail(text):
        request.node._acceptance_detail = text
    return set_detail
