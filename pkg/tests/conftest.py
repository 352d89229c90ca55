import numpy as np
import pytest
import torch

from oiastory.decoder import DecoderParams
from oiastory.isa import IsaParams
from oiastory.oia import AttentionCalibration, FactorWeights


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def randomize(module, rng, scale=1.0):
    """Overwrite every parameter (including calibration scalars) with random values."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.as_tensor(rng.normal(scale=scale, size=tuple(p.shape))))
    return module


def random_oia(rng, n, d, tied=False):
    w = randomize(FactorWeights(d, tied=tied).double(), rng, 0.5)
    c = randomize(AttentionCalibration(n).double(), rng)
    return w, c


def random_isa(rng, n, d):
    return randomize(IsaParams(n, d).double(), rng, 0.5)


def random_decoder(rng, vocab_size, d, gamma, scale=0.5):
    return randomize(DecoderParams(vocab_size, d, gamma).double(), rng, scale).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = __import__("sys").modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)
