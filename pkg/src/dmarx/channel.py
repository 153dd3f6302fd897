"""Multi-tap correlated uplink channel, noise statistics and OFDM symbol blocks.

Frequency-domain quantities are stored bin-major: ``freq[m]`` is the N x K
response on subcarrier m, ``symbols[m]`` the K transmitted symbols.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import j0

from .numerics import crandn, psd_sqrt

CONSTELLATIONS = ("qpsk", "gaussian")


@dataclass(frozen=True)
class ChannelConfig:
    """Array and waveform dimensions.

    Attributes
    ----------
    n_strips : int
        Number of microstrips (one ADC pair each).
    n_elements : int
        Metamaterial elements per microstrip.
    n_users : int
        Single-antenna users K.
    n_subcarriers : int
        OFDM subcarriers M.
    n_taps : int
        Channel memory L_G; must not exceed M (cyclic prefix covers it).
    spacing : float
        Element spacing in wavelengths, used for the Jakes correlation.
    noise_power : float
        Per-element noise power sigma_z^2.
    """

    n_strips: int = 10
    n_elements: int = 10
    n_users: int = 8
    n_subcarriers: int = 16
    n_taps: int = 4
    spacing: float = 0.2
    noise_power: float = 1.0

    def __post_init__(self):
        for name in ("n_strips", "n_elements", "n_users", "n_subcarriers", "n_taps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_taps > self.n_subcarriers:
            raise ValueError("n_taps exceeds n_subcarriers; cyclic prefix assumption broken")
        if self.noise_power < 0:
            raise ValueError("noise_power must be nonnegative")

    @property
    def n_antennas(self):
        return self.n_strips * self.n_elements


@dataclass
class ChannelRealization:
    taps: np.ndarray            # (L_G, N, K) time-domain taps G[tau]
    freq: np.ndarray            # (M, N, K) DFT of the taps
    elem_corr: np.ndarray       # (N_e, N_e) Jakes correlation within a strip
    corr: np.ndarray            # (N, N) receive correlation Sigma_R
    noise_power: float
    seed: int = None
    _corr_sqrt: np.ndarray = field(default=None, repr=False)

    @property
    def noise_cov(self):
        return self.noise_power * self.corr

    @property
    def corr_sqrt(self):
        if self._corr_sqrt is None:
            self._corr_sqrt = psd_sqrt(self.corr)
        return self._corr_sqrt

    @property
    def n_subcarriers(self):
        return self.freq.shape[0]

    def with_noise_power(self, noise_power):
        """Same fading realization at a different noise level."""
        return replace(self, noise_power=float(noise_power))

    def to_dict(self):
        return {
            "taps_re": self.taps.real.tolist(),
            "taps_im": self.taps.imag.tolist(),
            "elem_corr": self.elem_corr.tolist(),
            "n_strips": self.corr.shape[0] // self.elem_corr.shape[0],
            "n_subcarriers": self.n_subcarriers,
            "noise_power": self.noise_power,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        taps = np.asarray(d["taps_re"]) + 1j * np.asarray(d["taps_im"])
        elem_corr = np.asarray(d["elem_corr"], dtype=float)
        corr = np.kron(np.eye(d["n_strips"]), elem_corr)
        return cls(taps=taps, freq=taps_to_freq(taps, d["n_subcarriers"]),
                   elem_corr=elem_corr, corr=corr,
                   noise_power=d["noise_power"], seed=d.get("seed"))

    def dumps(self):
        return json.dumps(self.to_dict())


@dataclass
class OfdmBlock:
    """One OFDM block; ``symbols`` holds the frequency-domain data (M, K)."""

    symbols: np.ndarray
    constellation: str = "qpsk"

    @property
    def time(self):
        """Time-domain samples s[t], i.e. V2^H applied to the stacked symbols."""
        return np.fft.ifft(self.symbols, axis=0, norm="ortho")


def jakes_correlation(n_elements, spacing):
    """Spatial correlation J0(2 pi spacing |i - l|) for a uniform linear strip."""
    if n_elements < 1:
        raise ValueError("n_elements must be >= 1")
    idx = np.arange(n_elements)
    return j0(2.0 * np.pi * spacing * np.abs(idx[:, None] - idx[None, :]))


def tap_profile(n_taps):
    """Exponentially decaying tap gains exp(-tau)."""
    return np.exp(-np.arange(n_taps, dtype=float))


def taps_to_freq(taps, n_subcarriers):
    """M-point DFT of the taps along the delay axis (zero-padded, unnormalized)."""
    return np.fft.fft(taps, n=n_subcarriers, axis=0)


def generate_channel(cfg, rng, seed=None):
    """Draw ``G[tau] = exp(-tau) Sigma_R^{1/2} G_R[tau]`` with Rayleigh ``G_R``."""
    elem_corr = jakes_correlation(cfg.n_elements, cfg.spacing)
    corr = np.kron(np.eye(cfg.n_strips), elem_corr)
    corr_sqrt = psd_sqrt(corr)
    fading = crandn(rng, (cfg.n_taps, cfg.n_antennas, cfg.n_users))
    taps = tap_profile(cfg.n_taps)[:, None, None] * (corr_sqrt @ fading)
    return ChannelRealization(taps=taps, freq=taps_to_freq(taps, cfg.n_subcarriers),
                              elem_corr=elem_corr, corr=corr,
                              noise_power=cfg.noise_power, seed=seed,
                              _corr_sqrt=corr_sqrt)


def qpsk_bits_to_symbols(bits):
    """Gray map bit pairs (..., 2) to (+-1 +- j)/sqrt(2); bit 0 -> +1."""
    bits = np.asarray(bits)
    return ((1 - 2 * bits[..., 0]) + 1j * (1 - 2 * bits[..., 1])) / np.sqrt(2.0)


def qpsk_hard_bits(symbols):
    """Sign detector on real and imaginary parts, inverse of :func:`qpsk_bits_to_symbols`."""
    symbols = np.asarray(symbols)
    return np.stack([symbols.real < 0, symbols.imag < 0], axis=-1).astype(np.int8)


def generate_ofdm_block(cfg, constellation, rng):
    constellation = constellation.lower()
    shape = (cfg.n_subcarriers, cfg.n_users)
    if constellation == "qpsk":
        bits = rng.integers(0, 2, size=shape + (2,))
        symbols = qpsk_bits_to_symbols(bits)
    elif constellation == "gaussian":
        symbols = crandn(rng, shape)
    else:
        raise ValueError(f"unknown constellation {constellation!r}; expected one of {CONSTELLATIONS}")
    return OfdmBlock(symbols=symbols, constellation=constellation)


def draw_noise(ch, rng):
    """Per-bin noise w_m ~ CN(0, C_W), independent across bins; shape (M, N)."""
    M = ch.n_subcarriers
    N = ch.corr.shape[0]
    white = crandn(rng, (M, N))
    return np.sqrt(ch.noise_power) * white @ ch.corr_sqrt.T


def channel_output(ch, block, rng, noise=None):
    """y_m = G_m s_m + w_m for every bin; returns (M, N)."""
    if noise is None:
        noise = draw_noise(ch, rng)
    return np.einsum("mnk,mk->mn", ch.freq, block.symbols) + noise
