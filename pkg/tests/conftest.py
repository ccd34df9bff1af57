import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from palmtree.data import Dataset, RoleSpec, numeric

settings.register_profile(
    "default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def three_group_data(n=900, seed=0, noise=1.0):
    """Strong three-subgroup structure: (z1 <= 0), (z1 > 0, z2 <= 0), (z1 > 0, z2 > 0)."""
    rng = np.random.default_rng(seed)
    z1, z2 = rng.standard_normal(n), rng.standard_normal(n)
    xa = rng.integers(0, 2, n).astype(float)
    group = np.where(z1 <= 0, 1, np.where(z2 <= 0, 2, 3))
    b = {1: -2.0, 2: 0.0, 3: 2.0}
    beta = np.array([b[g] for g in group])
    y = beta + beta * xa + noise * rng.standard_normal(n)
    ds = Dataset.from_columns([numeric("y", y), numeric("xa", xa), numeric("z1", z1), numeric("z2", z2)])
    return ds, group


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def lm_spec():
    return RoleSpec("y", ("xa",), (), ("z1", "z2"))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(label, ok, detail):
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {label}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
