import numpy as np
import pytest

from pcvq2.data import load_dataset, make_synthetic_corpus
from pcvq2.train import TrainConfig, train_prior, train_vqvae

# small widths so whole pipelines run in seconds
TINY = dict(num_codes=16, code_dim=8, vq_hidden=16, res_blocks=1, prior_channels=8,
            top_layers=2, bottom_layers=2, batch_size=8)

_ACCEPTANCE_KEY = pytest.StashKey[list]()


def tiny_config(**kw) -> TrainConfig:
    return TrainConfig(**{**TINY, "scale": 0.001, "vqvae_scale": 0.01, **kw})


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for the terminal summary, then assert."""
    def record(name: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        request.config.stash[_ACCEPTANCE_KEY].append(line)
        print(line)
        assert ok, line
    return record


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    return make_synthetic_corpus(tmp_path_factory.mktemp("corpus"), n=16, resolution=32, seed=0)


@pytest.fixture(scope="session")
def images(corpus):
    return load_dataset(corpus)


@pytest.fixture(scope="session")
def trained(images):
    """Tiny VQ-VAE plus both priors, trained for a handful of iterations."""
    cfg = tiny_config()
    vq = train_vqvae(images, cfg)
    top = train_prior("top", images, vq, cfg)
    bottom = train_prior("bottom", images, vq, cfg)
    return {"cfg": cfg, "vqvae": vq, "top": top, "bottom": bottom}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
