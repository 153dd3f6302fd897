import math

import numpy as np
import pytest

from dmarx.channel import (ChannelConfig, ChannelRealization, OfdmBlock, channel_output, draw_noise,
                           generate_channel, generate_ofdm_block, jakes_correlation,
                           qpsk_bits_to_symbols, qpsk_hard_bits, tap_profile, taps_to_freq)
from dmarx.numerics import make_rng


def bessel_j0_series(x, terms=40):
    return sum((-1) ** k * (x / 2) ** (2 * k) / math.factorial(k) ** 2 for k in range(terms))


def test_jakes_entries():
    C = jakes_correlation(5, 0.2)
    assert np.allclose(np.diag(C), 1.0)
    assert abs(C[0, 1] - bessel_j0_series(0.4 * np.pi)) < 1e-6
    assert abs(C[0, 1] - 0.6425) < 1e-4
    assert abs(C[1, 4] - bessel_j0_series(3 * 0.4 * np.pi)) < 1e-6
    assert np.allclose(C, C.T)
    assert np.array_equal(jakes_correlation(3, 0.0), np.ones((3, 3)))


def test_receive_correlation_psd():
    ch = generate_channel(ChannelConfig(), make_rng(0))
    assert np.min(np.linalg.eigvalsh(ch.corr)) >= -1e-10
    # block diagonal: I_{N_d} kron Sigma_C
    assert np.allclose(ch.corr, np.kron(np.eye(10), jakes_correlation(10, 0.2)))


def test_tap_profile():
    p = tap_profile(4)
    assert p[0] == 1.0
    assert abs(p[3] - 0.0498) < 1e-4


def test_config_validation():
    with pytest.raises(ValueError):
        ChannelConfig(n_taps=17, n_subcarriers=16)
    with pytest.raises(ValueError):
        ChannelConfig(n_users=0)
    with pytest.raises(ValueError):
        ChannelConfig(noise_power=-1.0)


def test_noise_covariance_identity_without_correlation():
    cfg = ChannelConfig(n_strips=4, n_elements=1, n_users=2)
    ch = generate_channel(cfg, make_rng(1)).with_noise_power(1.0)
    assert np.array_equal(ch.noise_cov, np.eye(4))


def test_first_tap_variance_matches_correlation():
    cfg = ChannelConfig(n_strips=1, n_elements=4, n_users=1, n_subcarriers=4, n_taps=2)
    rng = make_rng(2)
    taps = np.stack([generate_channel(cfg, rng).taps[0, :, 0] for _ in range(10000)])
    var = np.mean(np.abs(taps) ** 2, axis=0)
    assert np.allclose(var, 1.0, rtol=0.05)
    # second tap carries exp(-1) in amplitude
    taps1 = np.stack([generate_channel(cfg, rng).taps[1, :, 0] for _ in range(5000)])
    assert np.allclose(np.mean(np.abs(taps1) ** 2, axis=0), np.exp(-2), rtol=0.07)
    # neighbouring elements correlate like the Jakes matrix
    corr = np.mean(taps[:, 0] * np.conj(taps[:, 1]))
    assert abs(corr - jakes_correlation(2, 0.2)[0, 1]) < 0.05


def test_frequency_response_is_dft_of_taps():
    ch = generate_channel(ChannelConfig(), make_rng(3))
    M = ch.n_subcarriers
    # direct sum oracle
    m = np.arange(M)[:, None, None, None]
    tau = np.arange(ch.taps.shape[0])[None, :, None, None]
    direct = np.sum(ch.taps[None] * np.exp(-2j * np.pi * m * tau / M), axis=1)
    assert np.allclose(ch.freq, direct)
    back = np.fft.ifft(ch.freq, axis=0)
    padded = np.zeros_like(back)
    padded[:ch.taps.shape[0]] = ch.taps
    assert np.max(np.abs(back - padded)) <= 1e-9


def test_channel_snapshot_round_trip():
    ch = generate_channel(ChannelConfig(n_strips=2, n_elements=3), make_rng(4), seed=4)
    back = ChannelRealization.from_dict(ch.to_dict())
    assert np.array_equal(back.taps, ch.taps)
    assert np.allclose(back.freq, ch.freq)
    assert np.array_equal(back.corr, ch.corr)
    assert back.seed == 4 and back.noise_power == ch.noise_power


def test_qpsk_symbols_unit_modulus_and_gray_inverse(rng):
    cfg = ChannelConfig(n_users=4)
    block = generate_ofdm_block(cfg, "qpsk", rng)
    assert block.symbols.shape == (16, 4)
    assert np.allclose(np.abs(block.symbols), 1.0)
    bits = rng.integers(0, 2, size=(100, 2))
    assert np.array_equal(qpsk_hard_bits(qpsk_bits_to_symbols(bits)), bits)
    assert np.allclose(qpsk_bits_to_symbols(np.array([0, 0])), (1 + 1j) / np.sqrt(2))


def test_symbol_covariance_identity():
    cfg = ChannelConfig(n_users=3, n_subcarriers=4)
    rng = make_rng(5)
    for constellation in ("qpsk", "gaussian"):
        s = np.stack([generate_ofdm_block(cfg, constellation, rng).symbols[0] for _ in range(10000)])
        cov = s.T @ s.conj() / len(s)
        assert np.allclose(cov, np.eye(3), atol=0.05)


def test_gaussian_symbols_kurtosis():
    cfg = ChannelConfig(n_users=8)
    rng = make_rng(6)
    x = np.concatenate([generate_ofdm_block(cfg, "gaussian", rng).symbols.real.ravel()
                        for _ in range(200)])
    kurt = np.mean(x ** 4) / np.mean(x ** 2) ** 2
    assert abs(kurt - 3) < 0.3


def test_unknown_constellation(rng):
    with pytest.raises(ValueError):
        generate_ofdm_block(ChannelConfig(), "16qam", rng)


def _scalar_channel(gain, noise_power):
    taps = np.full((1, 1, 1), gain, dtype=complex)
    return ChannelRealization(taps=taps, freq=taps_to_freq(taps, 1), elem_corr=np.eye(1),
                              corr=np.eye(1), noise_power=noise_power)


def test_noiseless_scalar_output():
    ch = _scalar_channel(2.0, 0.0)
    y = channel_output(ch, OfdmBlock(np.ones((1, 1), dtype=complex)), make_rng(0))
    assert np.array_equal(y, [[2.0 + 0j]])


def test_noise_covariance_and_bin_independence():
    cfg = ChannelConfig(n_strips=1, n_elements=3, n_users=1, n_subcarriers=4, n_taps=1)
    ch = generate_channel(cfg, make_rng(8)).with_noise_power(0.5)
    block = OfdmBlock(np.zeros((4, 1), dtype=complex))
    rng = make_rng(9)
    trials = 10000
    y = np.stack([channel_output(ch, block, rng) for _ in range(trials)])  # (T, M, N)
    cov = np.einsum("tn,tk->nk", y[:, 1], y[:, 1].conj()) / trials
    assert np.allclose(cov, ch.noise_cov, atol=0.05 * 0.5)
    cross = np.einsum("tn,tk->nk", y[:, 0], y[:, 2].conj()) / trials
    assert np.max(np.abs(cross)) <= 5 / np.sqrt(trials)


def test_parseval_time_frequency(rng):
    ch = generate_channel(ChannelConfig(n_strips=2, n_elements=2, n_users=2), make_rng(10))
    y = channel_output(ch, generate_ofdm_block(ChannelConfig(n_users=2), "qpsk", rng), rng)
    t = np.fft.ifft(y, axis=0, norm="ortho")
    assert abs(np.sum(np.abs(t) ** 2) - np.sum(np.abs(y) ** 2)) <= 1e-9 * np.sum(np.abs(y) ** 2)


def test_with_noise_power_keeps_fading():
    ch = generate_channel(ChannelConfig(), make_rng(12))
    other = ch.with_noise_power(0.01)
    assert other.freq is ch.freq and other.noise_power == 0.01
    noise = draw_noise(other, make_rng(0))
    assert noise.shape == (16, 100)
