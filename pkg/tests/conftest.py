import numpy as np
import pytest

from stride.model import ForecasterConfig, ForecasterModel
from stride.numerics import Tape, backward
from stride.training import head_loss


def micro_config(task="cop", window=3):
    # 8x10 input pools to 4x5 -> 2x2 -> 1x1, so the latent has 2 elements.
    return ForecasterConfig(task=task, in_channels=2, height=8, width=10, block_channels=(2, 3, 2),
                            convs_per_block=2, h1=3, h2=2, window=window)


def micro_model(seed=0, task="cop", window=3, bias_scale=0.1):
    cfg = micro_config(task, window)
    m = ForecasterModel.initialize(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for k, v in m.params.items():
        if k.endswith(".b") or k.endswith("b_in") or k.endswith("b_rec"):
            v[...] = rng.normal(size=v.shape) * bias_scale
    return m


def full_loss(model, frames, y, need_grads=True):
    """Windowed head loss through the encoder; returns (loss, grads)."""
    tape = Tape() if need_grads else None
    lat = model.encode(frames, tape)
    loss, grads, dlat = head_loss(model, lat, y, need_latent_grad=need_grads)
    if need_grads:
        enc, _ = backward(tape, dlat, model.params)
        grads.update(enc)
    return loss, grads


def fd_grad(f, arr, eps=1e-5):
    """Central finite differences of scalar ``f()`` with respect to ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        fp = f()
        arr[i] = old - eps
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / den)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One verdict line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
