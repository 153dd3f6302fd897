import numpy as np
import pytest

from dmarx.channel import ChannelConfig, generate_channel
from dmarx.frontend import build_frequency_grid, build_propagation, equivalent_channel
from dmarx.numerics import crandn, make_rng


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_hpd(rng, n, batch=(), floor=0.1):
    a = crandn(rng, batch + (n, n))
    return a @ np.conj(np.swapaxes(a, -1, -2)) + floor * np.eye(n)


@pytest.fixture
def small_system():
    """A reduced array (N_d=3, N_e=4, K=2, M=8) with microstrip propagation."""
    cfg = ChannelConfig(n_strips=3, n_elements=4, n_users=2, n_subcarriers=8, n_taps=3)
    grid = build_frequency_grid(1.9e9, cfg.n_subcarriers * 20e6, cfg.n_subcarriers)
    prop = build_propagation(cfg, grid, 0.006, 1.592)
    ch = generate_channel(cfg, make_rng(7)).with_noise_power(0.3)
    g_hat, upsilon = equivalent_channel(ch, prop)
    return {"cfg": cfg, "grid": grid, "prop": prop, "ch": ch, "g_hat": g_hat, "upsilon": upsilon}


@pytest.fixture(scope="session")
def full_system():
    """Default array (N=100, M=16, K=8) at 4 dB."""
    cfg = ChannelConfig()
    grid = build_frequency_grid(1.9e9, cfg.n_subcarriers * 20e6, cfg.n_subcarriers)
    prop = build_propagation(cfg, grid, 0.006, 1.592)
    ch = generate_channel(cfg, make_rng(11)).with_noise_power(10 ** -0.4)
    g_hat, upsilon = equivalent_channel(ch, prop)
    return {"cfg": cfg, "grid": grid, "prop": prop, "ch": ch, "g_hat": g_hat, "upsilon": upsilon}
