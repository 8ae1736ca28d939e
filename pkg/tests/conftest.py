import pytest

from diffedit.denoiser import init_params
from diffedit.first_stage import FirstStage
from diffedit.guidance import EmbedderOracle
from diffedit.numerics.rng import RngStream
from diffedit.schedule import linear_schedule
from diffedit.toyworld.dataset import make_dataset
from diffedit.toyworld.oracles import EmotionOracle, IdentityEmbedder
from helpers import randomize


@pytest.fixture
def tiny_params():
    """Width-8 denoiser over 3-d data with random (non-zero) output head."""
    return randomize(init_params((3,), num_classes=3, width=8, depth=2, d_cls=4, time_dim=8, seed=1))


@pytest.fixture
def schedule():
    return linear_schedule(100, 1e-4, 0.02)


@pytest.fixture
def rng():
    return RngStream(1234, 0)


@pytest.fixture(scope="session")
def tiny_world():
    """12x12 pixel-space world with barely trained evaluators and a width-4 denoiser."""
    ds = make_dataset(140, seed=4, size=12)
    fs = FirstStage(mode="identity").fit(ds.images)
    oracle = EmotionOracle(hidden=(8,), epochs=3).fit(ds.images, ds.labels)
    emb = IdentityEmbedder(hidden=(8,), n_features=16, epochs=3).fit(ds.images, ds.identities)
    params = randomize(init_params((12, 12), num_classes=7, width=4, depth=1, d_cls=4, time_dim=4, seed=2),
                       seed=3, scale=0.1)
    return ds, fs, EmbedderOracle(oracle), emb, params, linear_schedule(100)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
