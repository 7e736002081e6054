import numpy as np
import pytest

from twinguard.twin import DtConfig, TcnTwin

FD_STEP = 1e-5
FD_TOL = 1e-4


def numeric_grad(f, x, h=FD_STEP):
    """Central differences of the scalar f with respect to every entry of x (x is restored)."""
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


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / den


def assert_grad(analytic, f, x, tol=FD_TOL):
    num = numeric_grad(f, x)
    err = rel_error(analytic, num)
    assert err < tol, f"relative error {err:.3g}"
    return err


def small_twin(seed, hidden=4, tau=4, keep=0.9):
    cfg = DtConfig(tau=tau, hidden=hidden, n_blocks=2, dilations=(1, 2), keep_prob=keep, seed=seed)
    m = TcnTwin(9, 3, cfg)
    rng = np.random.default_rng(seed)
    m.x_mean, m.x_std = rng.standard_normal(12) * 0.1, rng.uniform(0.5, 2.0, 12)
    m.y_mean, m.y_std = rng.uniform(0.5, 1.5, 9), rng.uniform(0.5, 2.0, 9)
    for k in m.raw:
        if k.endswith(".b"):
            m.raw[k] = rng.standard_normal(m.raw[k].shape) * 0.3
    m.refresh(20)
    return m


# acceptance verdicts keyed by criterion number, printed after the run
ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    n, title = mark.args
    detail = item.funcargs.get("detail") or {}
    text = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in detail.items())
    ACCEPTANCE[n] = (rep.passed, title, rep.duration, text)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, secs, text = ACCEPTANCE[n]
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title}  [{secs:.0f} s]"
        terminalreporter.write_line(line + (f"  ({text})" if text else ""))
