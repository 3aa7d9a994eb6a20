import numpy as np
import pytest

from mergeforge.tensor import NamedTensorMap


def random_map(rng, n_tensors=3, max_dim=5, max_rank=3, scale=1.0, prefix="t"):
    entries = []
    for i in range(n_tensors):
        shape = tuple(int(s) for s in rng.integers(1, max_dim + 1, rng.integers(1, max_rank + 1)))
        entries.append((f"{prefix}{i}.weight", scale * rng.standard_normal(shape)))
    return NamedTensorMap(entries)


def perturbed(base, rng, scale=0.1, task_id=""):
    """A finetuned checkpoint: base + a float32 update, added in float32."""
    meta = {"task_id": task_id} if task_id else None
    return NamedTensorMap({k: v + (scale * rng.standard_normal(v.shape)).astype(np.float32) for k, v in base.items()},
                          meta)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdict lines, echoed in the terminal summary so they show up under plain `pytest`
ACCEPTANCE_LINES: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
