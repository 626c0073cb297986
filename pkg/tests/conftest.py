import numpy as np
import pytest

from robustmat.config import DatasetConfig, ModelConfig, SolverSettings


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model_cfg():
    return ModelConfig(patch_side=8, downsample=[(4, 3, 2, 1)], pool=2, n_f=8, gat_heads=2, r_hidden=[6],
                       gcn_hidden=8, vertex_solver=SolverSettings(rtol=1e-2, atol=1e-2),
                       graph_solver=SolverSettings(rtol=1e-3, atol=1e-3))


@pytest.fixture(scope="session")
def tiny_data_cfg():
    return DatasetConfig(n_scenes=6, n_train_scenes=4, n_landmarks=4, patch_side=8, min_separation=8.0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one pass/fail line per acceptance criterion, printed now and again in the run summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
