import numpy as np
import pytest

from srno.encoder import EncoderConfig
from srno.operator import SrnoConfig

# small enough for f64 finite differences through the whole model
TINY = SrnoConfig(d_z=32, n_heads=4, T=2, d_ffn=32, encoder=EncoderConfig(d_e=16, n_blocks=2))
MICRO = SrnoConfig(d_z=8, n_heads=2, T=1, d_ffn=8, encoder=EncoderConfig(d_e=4, n_blocks=1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_image(rng, h, w):
    from srno.data import ImageRGB

    return ImageRGB(rng.uniform(0, 1, size=(3, h, w)).astype(np.float32))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
