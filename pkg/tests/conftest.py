import numpy as np
import pytest

from pgalab import tensor as T
from pgalab.nets import Autoencoder, MlpNet, build_autoencoder


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def linear_net(matrix, group="phi"):
    """Single linear layer computing x @ matrix."""
    matrix = np.asarray(matrix, dtype=np.float64)
    w = T.parameter(matrix, name=f"{group}.W0")
    b = T.parameter(np.zeros(matrix.shape[1]), name=f"{group}.b0")
    return MlpNet(matrix.shape, [w], [b], "tanh", group)


def linear_autoencoder(enc, dec):
    return Autoencoder(linear_net(enc, "phi"), linear_net(dec, "theta"))


def small_model(D=3, H=2, hidden=(5,), seed=0, **kw):
    return build_autoencoder(D, H, hidden, seed=seed, **kw)


# criterion number -> (verdict, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {verdict}  {detail}")
