import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lvseg.numerics import network_loss, numeric_gradient, relative_error

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def max_gradient_error(net, x, target, cfg, sparse_layers=(), step=1e-4):
    """Largest relative error between backprop and central differences over all parameters."""
    network_loss(net, x, target, cfg, sparse_layers)
    analytic = {k: v.copy() for k, v in net.named_grads().items()}
    params = {k: v for k, v in net.named_params().items()}

    def total():
        return network_loss(net, x, target, cfg, sparse_layers, compute_grad=False).total

    numeric = numeric_gradient(total, params, step)
    return max(float(relative_error(analytic[k], numeric[k]).max()) for k in params)


def disk_mask(shape, center, radius):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return (xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= radius ** 2


def random_blob(rng, shape=(40, 40)):
    """Union of a few random disks; always has inside and outside pixels."""
    m = np.zeros(shape, dtype=bool)
    for _ in range(rng.integers(1, 4)):
        c = rng.uniform(8, min(shape) - 8, size=2)
        m |= disk_mask(shape, c, rng.uniform(3, 7))
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
