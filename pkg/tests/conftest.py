import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def planted_run():
    """Default-hyperparameter 50-epoch run on the planted graph, 80/20 holdout."""
    import time

    from hetdiff.data_io import SyntheticSpec, generate_synthetic
    from hetdiff.pipeline import fit_split, make_splits
    from hetdiff.training import TrainConfig

    graph, la, lb = generate_synthetic(SyntheticSpec(200, 100, 4, 0.3, 0.01, 7))
    config = TrainConfig(epochs=50, seed=0)
    split = make_splits(graph, "holdout8020", config.seed, config.negatives_per_drug)[0]
    t0 = time.perf_counter()
    result = fit_split(config, split)
    return {"graph": graph, "labels": (la, lb), "config": config, "split": split, "result": result, "seconds": time.perf_counter() - t0}


_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """``check(n, title, status, detail)``: record one acceptance line and echo it."""

    def check(n: int, title: str, status: str, detail: str = "") -> None:
        line = f"criterion {n:>2} {status:<4} {title}" + (f": {detail}" if detail else "")
        _CRITERIA[n] = line
        print(line)

    return check


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
