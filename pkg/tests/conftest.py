import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from shardwise.tensor import Graph, grad

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(b), initial=0.0)), 1e-300)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


def numeric_grad(fn, params, rel_step=1e-6):
    """Central differences of scalar ``fn(params)`` for every entry of every parameter.

    The step for each tensor is ``rel_step`` times its largest magnitude (at least 1).
    """
    out = {}
    for name, value in params.items():
        base = np.array(value, dtype=np.float64)
        h = rel_step * max(1.0, float(np.max(np.abs(base))))
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += h
            minus = base.copy()
            minus[idx] -= h
            fp = float(np.asarray(fn({**params, name: plus})).reshape(()))
            fm = float(np.asarray(fn({**params, name: minus})).reshape(()))
            g[idx] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def autodiff_grad(fn, params):
    with Graph() as g:
        leaves = {k: g.leaf(v) for k, v in params.items()}
        loss = fn(leaves)
    return {k: v.numpy() for k, v in grad(g, loss, leaves).items()}


def eager(fn):
    """Evaluate ``fn`` on plain arrays and return a float."""
    return lambda p: fn(p).numpy()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def grad_rel_err(auto, numeric) -> float:
    """max |auto - numeric| over all entries, relative to the largest numeric entry."""
    a = np.concatenate([np.ravel(auto[k]) for k in numeric])
    n = np.concatenate([np.ravel(numeric[k]) for k in numeric])
    return rel_err(a, n)


# acceptance criteria append "PASS|FAIL <id> ..." lines here; they are echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].lstrip("C"))):
            terminalreporter.write_line(line)
