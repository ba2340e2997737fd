import numpy as np
import pytest

from smtnav import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


def check_store_grads(loss_fn, store: ad.ParamStore, names=None, h: float = 1e-5,
                      max_entries: int | None = None, rng=None) -> float:
    """Worst relative error between backward() and central differences over ``names``.

    ``loss_fn`` rebuilds the graph from ``store`` and returns a 1x1 Tensor.
    With ``max_entries`` only that many random coordinates per tensor are probed.
    """
    names = store.names() if names is None else names
    store.zero_grad()
    ad.backward(loss_fn())
    worst = 0.0
    for n in names:
        p = store[n]
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)
        idx = list(np.ndindex(p.shape))
        if max_entries is not None and len(idx) > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = [idx[i] for i in rng.choice(len(idx), max_entries, replace=False)]
        num = np.zeros(len(idx))
        with ad.no_grad():
            for j, i in enumerate(idx):
                old = p.value[i]
                p.value[i] = old + h
                fp = float(loss_fn().value[0, 0])
                p.value[i] = old - h
                fm = float(loss_fn().value[0, 0])
                p.value[i] = old
                num[j] = (fp - fm) / (2 * h)
        an = np.array([analytic[i] for i in idx])
        worst = max(worst, rel_error(an, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary: one line per criterion ------------------------------

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, title = mark.args
    entry = _CRITERIA.setdefault(num, {"title": title, "status": "PASS", "details": []})
    if rep.failed:
        entry["status"] = "FAIL"
    elif rep.skipped and entry["status"] == "PASS":
        entry["status"] = "SKIP"
    if rep.when == "call":
        entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        e = _CRITERIA[num]
        line = f"criterion {num:2d} {e['status']}: {e['title']}"
        if e["details"]:
            line += "  [" + "; ".join(e["details"]) + "]"
        terminalreporter.write_line(line)
