import sys

import numpy as np
import pytest

from hqvae import tensor as T
from hqvae.config import LayerSpec, ModelConfig
from hqvae.networks import HQVAE


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


def toy_config(variant, layers, size=4, d_b=3, hidden=4, **kw):
    """Small float64-friendly model; ``layers`` is a list of (kind, resolution, K)."""
    return ModelConfig(variant=variant, layers=[LayerSpec(*l) for l in layers],
                       input_shape=(3, size, size), d_b=d_b, hidden=hidden, n_res=1, **kw)


def toy_model(variant, layers, seed=0, **kw):
    return HQVAE(toy_config(variant, layers, **kw), rng=np.random.default_rng(seed))


def toy_batch(n=2, size=4, seed=1):
    return T.Tensor(np.random.default_rng(seed).random((n, 3, size, size)))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for crit, status, detail in sorted(results, key=lambda r: (int(r[0].split()[0]), r[0])):
        terminalreporter.write_line(f"criterion {crit:<12} {status:<5} {detail}")
