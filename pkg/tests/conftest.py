import numpy as np
import pytest

from satformula.raster import make_dataset

# acceptance lines collected by tests/test_acceptance.py, printed at session end
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ndvi20():
    """The 20-sample 64x64x4 NDVI toy set used by the training oracles."""
    return make_dataset(0, 20, "ndvi", size=64)


@pytest.fixture(scope="session")
def recovery_run():
    """Default-config pipeline run per task on 20 noise-free 64x64 scenes, cached for the session."""
    from satformula.pipeline import TrainConfig, run_pipeline

    cache = {}

    def run(task):
        if task not in cache:
            cache[task] = run_pipeline(make_dataset(0, 20, task, size=64), TrainConfig(), task=task)
        return cache[task]

    return run


@pytest.fixture(scope="session")
def ndvi_default_run(recovery_run):
    return recovery_run("ndvi")


@pytest.fixture(scope="session")
def ndvi_overfit(ndvi20):
    """Encoder pre-trained for 50 epochs, then 300 teacher-forced epochs on the NDVI skeleton."""
    from satformula.nn.model import EncoderConfig, SatFormulaModel, SeqModelConfig
    from satformula.pipeline import TrainConfig, fit_target_mlp, stage1_train, stage2_train

    cfg = TrainConfig(iterations=300)
    model = SatFormulaModel.create(EncoderConfig(in_chans=4), SeqModelConfig(), cfg.seed)
    mlp = fit_target_mlp(ndvi20, cfg.seed)
    s1 = stage1_train(model, ndvi20, mlp, cfg)
    s2 = stage2_train(model, ndvi20, mlp, cfg)
    return {"model": model, "mlp": mlp, "stage1": s1, "stage2": s2, "data": ndvi20}
