import numpy as np
import pytest

from rectiplane.autodiff import Tape, Tensor, max_rel_error, numeric_grad


def _weights(shape, seed=99):
    return np.random.default_rng(seed).normal(size=shape)


def check_gradients(fn, arrays, eps=1e-5):
    """Largest relative error of every input's analytic gradient.

    Non-scalar outputs are reduced with fixed random weights so that every
    output element contributes.
    """
    arrays = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
        w = None if out.size == 1 else _weights(out.shape)
        loss = out if w is None else (out * Tensor(w)).sum()
        tape.backward(loss)

    def scalar():
        o = fn(*[Tensor(a) for a in arrays]).data
        return float(o.reshape(())) if w is None else float(np.sum(o * w))

    numeric = numeric_grad(scalar, arrays, eps)
    return [max_rel_error(t.grad, n) for t, n in zip(leaves, numeric)]


@pytest.fixture
def gradcheck():
    return check_gradients


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    """Small desk-scale dataset: 64 px, +-30 degrees, 4 degree bins."""
    import math

    from rectiplane.imaging import ParamRanges, load_split, make_splits
    from rectiplane.models import DESK_CONFIG

    root = tmp_path_factory.mktemp("desk")
    make_splits(root, {"train": 320, "val": 48, "test": 48}, seed=11, size=64,
                ranges=ParamRanges.for_theta_span(math.radians(60)), bins=DESK_CONFIG.bins)
    return {s: load_split(root / s) for s in ("train", "val", "test")} | {"root": root}


@pytest.fixture(scope="session")
def stage1(desk_data):
    from rectiplane.training import TrainConfig, train_stage

    cfg = TrainConfig(learning_rate=1e-3, batch_size=32, epochs=2)
    return train_stage(desk_data["train"], desk_data["val"], cfg)


_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one acceptance line; returns ``ok`` so callers can assert on it."""

    def record(number: int, ok: bool, detail: str, table: str | None = None) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        _CRITERIA[number] = line if table is None else f"{line}\n{table}"
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
