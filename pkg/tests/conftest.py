import pytest

from stitchlab import nn, optim
from stitchlab.data import generate_synthetic


TINY_BUDGET = optim.TrainConfig(lr=0.05, total_steps=400, batch_size=64, drops=(300,),
                                eval_every=10**6)


@pytest.fixture(scope="session")
def tiny_data():
    """Small synthetic train/test split shared by the unit tests."""
    return generate_synthetic(100, 1500), generate_synthetic(999, 2000)


@pytest.fixture(scope="session")
def tiny_models(tiny_data):
    """Two briefly trained half-width models (seeds 0 and 1) plus an untrained one."""
    train, _ = tiny_data
    spec = nn.ArchitectureSpec(width=0.5, classes=train.classes)
    out = {}
    for seed in (0, 1):
        m, _ = optim.train(nn.build(spec, seed), train, TINY_BUDGET.replace(seed=seed))
        out[seed] = m
    out["random"] = nn.build(spec, 7)
    return out



_VERDICTS: list = []


@pytest.fixture
def verdict():
    """Record and assert one acceptance criterion; lines are echoed in the summary."""
    def record(number: int, passed: bool, detail: str):
        _VERDICTS.append((number, bool(passed), detail))
        assert passed, f"criterion {number}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  "
                                    f"{detail}")
