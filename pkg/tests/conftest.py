import numpy as np
import pytest
from hypothesis import settings

from softcam import autodiff as ad
from softcam import models as M

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def numeric_grad(f, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` in float64."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, n) -> float:
    a, n = np.asarray(a, np.float64), np.asarray(n, np.float64)
    scale = max(np.abs(n).max(), 1e-6)
    return float(np.abs(a - n).max() / scale)


def tape_grad(fn, *arrays):
    """Gradients of scalar ``fn(*tensors)`` w.r.t. every input array."""
    with ad.Tape() as tape:
        ts = [tape.watch(ad.Tensor(a)) for a in arrays]
        out = fn(*ts)
    table = ad.backward(tape, out)
    return [table.get(t, np.zeros(t.shape, np.float32)) for t in ts]


def small_model(seed=0, head="blackbox", channels=(4, 6), size=8, n_classes=2, preset="resnet", hidden=None):
    cfg = M.BackboneConfig.from_channels(channels, input_shape=(1, size, size), seed=seed)
    return M.init_weights(cfg, n_classes, head=head, preset=preset, hidden=hidden, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, str] = {}


def report_criterion(name: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE[name] = f"{name} {'PASS' if passed else 'FAIL'}: {detail}"
    print(ACCEPTANCE[name])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for name in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[name])
