import numpy as np
import pytest

from morphence import nn
from morphence.poolgen import PoolConfig, generate_pool
from morphence.workflow import train_base


@pytest.fixture(scope="session")
def desk():
    """Base MLP trained on the 8x8 digits with the standard split."""
    return train_base()


@pytest.fixture(scope="session")
def desk_pool(desk):
    return generate_pool(desk.base, PoolConfig(n=4, p=3, seed=0), desk.train, desk.test, pool_id=1)


def tiny_model(sizes=(2, 4, 3), activation="tanh", seed=0):
    """Float64 model with non-zero biases, for gradient checks."""
    m = nn.init_model(list(sizes), activation, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1000)
    for layer in m.layers:
        layer.bias[:] = rng.normal(0, 0.5, size=layer.bias.shape)
    return m


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, in criterion order."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            if report.when != "call" and outcome != "error":
                continue
            props = dict(getattr(report, "user_properties", []))
            if "criterion" in props:
                verdict = "PASS" if outcome == "passed" else "FAIL"
                lines.append((props["criterion"], f"criterion {props['criterion']:>2}: {verdict}  {props.get('detail', '')}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
