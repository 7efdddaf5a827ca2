import numpy as np
import pytest

from tslstm.model import ModelConfig, init_params


def fd_grad(f, x, eps=1e-5):
    """Central differences of scalar f() w.r.t. every entry of x (in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        up = f()
        x[idx] = old - eps
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def rel_err(a, n, floor=1e-6):
    a, n = np.asarray(a), np.asarray(n)
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)).max())


def norm_err(a, n):
    """Tensor-level relative error ||a - n|| / max(||a||, ||n||)."""
    a, n = np.ravel(a), np.ravel(n)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - n) / scale)


def grad_ok(analytic, numeric, tol=1e-6, entry_tol=1e-4):
    return norm_err(analytic, numeric) < tol and rel_err(analytic, numeric) < entry_tol


def random_model(seed, vocab=8, feat=6, hidden=3, scale=0.5):
    rng = np.random.default_rng(seed)
    params = init_params(ModelConfig(vocab, feat, hidden, hidden, hidden, hidden), rng)
    for arr in params.tensors().values():
        arr[...] = rng.uniform(-scale, scale, size=arr.shape)
    return params


def zero_model(vocab=8, feat=6, hidden=3):
    params = random_model(0, vocab, feat, hidden)
    for arr in params.tensors().values():
        arr[...] = 0.0
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
