import pytest

from fedssa.config import ExperimentConfig


def small_config(**overrides) -> ExperimentConfig:
    """A fast configuration: 4 clients, 6 classes, tiny models."""
    base = {
        "dataset": {"kind": "blobs", "per_class_n": 40, "d_in": 8, "spread": 1.0},
        "S": 6, "N": 4, "C": 1.0, "T": 3, "E": 1, "B": 8, "eta": 0.05,
        "classes_per_client": 3,
        "model_zoo": [{"hidden": [12], "d_rep": 6}, {"hidden": [10, 8], "d_rep": 6}],
        "seed": 0,
    }
    cfg = ExperimentConfig().replace(**{k: v for k, v in base.items()})
    return cfg.replace(**overrides) if overrides else cfg


@pytest.fixture
def small_cfg():
    return small_config


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.REPORT):
            terminalreporter.write_line(line)
