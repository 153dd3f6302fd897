"""Uniform scalar ADCs and the support / noise-energy rules used in design."""

import math
from dataclasses import dataclass

import numpy as np

from .frontend import strip_blocks


@dataclass(frozen=True)
class QuantizerSpec:
    """Uniform mid-rise quantizer with ``levels`` decision regions on [-support, support].

    ``eta`` is the support multiplier used to set ``support`` from the input
    standard deviation; it only matters for :attr:`kappa`.
    """

    support: float
    levels: int
    eta: float = None

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("need at least two decision regions")
        if not self.support > 0:
            raise ValueError("support must be positive")

    @property
    def step(self):
        return 2.0 * self.support / self.levels

    @property
    def noise_energy(self):
        """Design value 4 gamma^2 / (3 b^2) for the quantization noise energy."""
        return 4.0 * self.support ** 2 / (3.0 * self.levels ** 2)

    @property
    def kappa(self):
        if self.eta is None:
            raise ValueError("kappa needs eta")
        return kappa(self.eta, self.levels)

    def to_dict(self):
        return {"support": self.support, "levels": self.levels, "eta": self.eta}


def kappa(eta, levels):
    """4 eta^2 / (3 b^2): noise energy per unit ADC input power."""
    return 4.0 * eta ** 2 / (3.0 * levels ** 2)


def levels_from_budget(bits_overall, n_strips):
    """Decision regions per ADC when ``bits_overall`` is split over 2 N_d real ADCs."""
    return int(math.floor(2.0 ** (bits_overall / (2.0 * n_strips)) + 1e-12))


def quantize_real(x, spec):
    """Apply the uniform quantizer elementwise.

    Cells are left-closed; ``x == support`` lands in the top cell and inputs
    beyond the support clip to the outermost levels +-(support - support / b).
    """
    x = np.asarray(x, dtype=float)
    gamma, b = spec.support, spec.levels
    step = 2.0 * gamma / b
    cell = np.floor((x + gamma) / step)
    cell = np.clip(cell, 0, b - 1)
    return -gamma + step * (cell + 0.5)


def quantize_complex(z, spec):
    z = np.asarray(z)
    return quantize_real(z.real, spec) + 1j * quantize_real(z.imag, spec)


def strip_output_power(vectors, upsilon):
    """E|(z_m)_i|^2 = q_{m,i}^T E_i^T Upsilon_m E_i q_{m,i}^*, shape (M, N_d)."""
    n_strips = vectors.shape[1]
    blocks = strip_blocks(upsilon, n_strips)
    return np.real(np.einsum("mil,milk,mik->mi", vectors, blocks, np.conj(vectors)))


def adc_support(weights, upsilon, eta):
    """gamma = eta * sqrt(max_i mean_m E|(z_m)_i|^2).

    A zero return means every microstrip is switched off; callers must not
    build a quantizer from it.
    """
    vectors = getattr(weights, "vectors", weights)
    power = strip_output_power(vectors, upsilon)
    return float(eta * math.sqrt(max(np.max(np.mean(power, axis=0)), 0.0)))


def overload_fraction(samples, support):
    """Fraction of real and imaginary components with magnitude above ``support``."""
    samples = np.asarray(samples)
    over = np.count_nonzero(np.abs(samples.real) > support) + np.count_nonzero(np.abs(samples.imag) > support)
    return over / (2 * samples.size)


def overload_probability(weights, ch, prop, spec, trials, rng, constellation="qpsk"):
    """Monte Carlo overload rate of the ADC inputs for a fixed channel."""
    from .channel import ChannelConfig, channel_output, generate_ofdm_block
    from .frontend import assemble_weights

    if trials < 1:
        raise ValueError("trials must be >= 1")
    Q = assemble_weights(weights)
    M, K = ch.freq.shape[0], ch.freq.shape[2]
    cfg = ChannelConfig(n_strips=1, n_elements=1, n_users=K, n_subcarriers=M, n_taps=1)
    over = 0
    total = 0
    for _ in range(trials):
        block = generate_ofdm_block(cfg, constellation, rng)
        y = prop.diag * channel_output(ch, block, rng)
        z = np.fft.ifft(np.einsum("min,mn->mi", Q, y), axis=0, norm="ortho")
        over += overload_fraction(z, spec.support) * 2 * z.size
        total += 2 * z.size
    return over / total
