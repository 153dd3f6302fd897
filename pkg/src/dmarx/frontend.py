"""Dynamic metasurface antenna front end.

Models the Lorentzian response of each tunable element, the propagation
from element to microstrip port, and the per-subcarrier combining matrices
``Q_m`` (one row per microstrip, block-diagonal by rows).
"""

import math
from dataclasses import dataclass

import numpy as np

MODES = ("unconstrained", "frequency_flat", "lorentzian", "phase_shifter")
DEFAULT_FLAT_BOUNDS = (0.001, 1.0)
DENOM_GUARD = 1e-30


class DegenerateResponseError(ValueError):
    """Lorentzian evaluated exactly at resonance with zero damping."""


@dataclass
class LorentzianParams:
    """Element parameters; arrays broadcast over elements, shape (N_d, N_e) usually.

    ``strength`` is the oscillator strength F, ``damping`` the damping factor
    chi (rad/s) and ``resonance`` the angular resonance frequency (rad/s).
    """

    strength: np.ndarray
    damping: np.ndarray
    resonance: np.ndarray

    def __post_init__(self):
        self.strength = np.asarray(self.strength, dtype=float)
        self.damping = np.asarray(self.damping, dtype=float)
        self.resonance = np.asarray(self.resonance, dtype=float)
        if np.any(self.strength < 0):
            raise ValueError("oscillator strength must be nonnegative")
        if np.any(self.damping < 0) or np.any(self.resonance < 0):
            raise ValueError("damping and resonance must be nonnegative")

    @property
    def quality_factor(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.resonance / self.damping

    def response(self, omega):
        """Element responses at angular frequencies ``omega``; shape (len(omega), *params)."""
        omega = np.asarray(omega, dtype=float)
        expand = (slice(None),) + (None,) * self.strength.ndim
        return lorentzian_response(self.strength, self.damping, self.resonance,
                                   omega[expand] if omega.ndim else omega)

    def to_dict(self):
        return {"strength": self.strength.tolist(), "damping": self.damping.tolist(),
                "resonance": self.resonance.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["strength"], d["damping"], d["resonance"])


def lorentzian_response(strength, damping, resonance, omega):
    """F W^2 / (W_R^2 - W^2 - j W chi), broadcasting over all arguments."""
    omega = np.asarray(omega, dtype=float)
    if np.any(omega <= 0):
        raise ValueError("angular frequency must be positive")
    denom = resonance ** 2 - omega ** 2 - 1j * omega * damping
    if np.any(np.abs(denom) <= DENOM_GUARD):
        raise DegenerateResponseError("undamped element evaluated at its resonance")
    return strength * omega ** 2 / denom


@dataclass(frozen=True)
class FrequencyGrid:
    """Subcarrier grid mapped to physical angular frequencies.

    Bin m sits at the signed baseband frequency ``2 pi m / M`` wrapped into
    [-pi, pi), and at ``2 pi f_c + omega_m f_s`` in rad/s.
    """

    carrier: float
    bandwidth: float
    n_subcarriers: int

    @property
    def baseband(self):
        M = self.n_subcarriers
        m = np.arange(M)
        return np.where(m < M / 2, 2 * np.pi * m / M, 2 * np.pi * m / M - 2 * np.pi)

    @property
    def omega(self):
        return 2 * np.pi * self.carrier + self.baseband * self.bandwidth

    @property
    def band_edges(self):
        """Angular band edges 2 pi (f_c -+ f_s / 2)."""
        return (2 * np.pi * (self.carrier - self.bandwidth / 2),
                2 * np.pi * (self.carrier + self.bandwidth / 2))


def build_frequency_grid(carrier, bandwidth, n_subcarriers):
    if not (bandwidth > 0 and carrier > bandwidth / 2):
        raise ValueError("need carrier > bandwidth / 2 > 0")
    if n_subcarriers < 1:
        raise ValueError("n_subcarriers must be >= 1")
    return FrequencyGrid(float(carrier), float(bandwidth), int(n_subcarriers))


@dataclass
class MicrostripPropagation:
    """Diagonal element-to-port responses; ``diag[m, (i-1) N_e + l - 1] = h_{i,l}(omega_m)``."""

    diag: np.ndarray  # (M, N)
    attenuation: float = 0.0
    phase_slope: float = 0.0

    @property
    def matrices(self):
        M, N = self.diag.shape
        out = np.zeros((M, N, N), dtype=complex)
        idx = np.arange(N)
        out[:, idx, idx] = self.diag
        return out

    @classmethod
    def identity(cls, n_subcarriers, n_antennas):
        return cls(np.ones((n_subcarriers, n_antennas), dtype=complex))


def build_propagation(cfg, grid, attenuation, phase_slope):
    """h_{i,l}(omega_m) = exp(-attenuation * l - j phase_slope * omega_m * l), l = 1..N_e."""
    if attenuation < 0:
        raise ValueError("attenuation must be nonnegative")
    l = np.arange(1, cfg.n_elements + 1)
    per_strip = np.exp(-attenuation * l[None, :]
                       - 1j * phase_slope * grid.baseband[:, None] * l[None, :])
    return MicrostripPropagation(np.tile(per_strip, (1, cfg.n_strips)),
                                 float(attenuation), float(phase_slope))


@dataclass
class DmaWeights:
    """Per-bin microstrip weight vectors ``vectors[m, i] = q_{m,i}`` of length N_e.

    ``lorentzian`` carries the element parameters when ``mode == 'lorentzian'``;
    ``flat_bounds`` is the feasible amplitude interval for frequency-flat weights.
    """

    mode: str
    vectors: np.ndarray  # (M, N_d, N_e) complex
    lorentzian: LorentzianParams = None
    flat_bounds: tuple = DEFAULT_FLAT_BOUNDS
    quality_factors: tuple = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown weight mode {self.mode!r}")
        self.vectors = np.asarray(self.vectors, dtype=complex)
        if self.vectors.ndim != 3:
            raise ValueError("vectors must have shape (M, N_d, N_e)")

    @property
    def shape(self):
        return self.vectors.shape

    def validate(self, grid=None, tol=1e-9):
        """Check the feasibility contract of the mode; raises ``ValueError``."""
        v = self.vectors
        if not np.all(np.isfinite(v)):
            raise ValueError("weights contain non-finite entries")
        if self.mode in ("frequency_flat", "phase_shifter"):
            if np.max(np.abs(v - v[:1])) > 0:
                raise ValueError(f"{self.mode} weights differ across subcarriers")
        if self.mode == "frequency_flat":
            lo, hi = self.flat_bounds
            if np.any(v.imag != 0) or np.any(v.real < lo) or np.any(v.real > hi):
                raise ValueError(f"frequency-flat weights outside [{lo}, {hi}]")
        elif self.mode == "phase_shifter":
            if np.max(np.abs(np.abs(v) - 1.0)) > tol:
                raise ValueError("phase-shifter weights must have unit modulus")
        elif self.mode == "lorentzian":
            if self.lorentzian is None:
                raise ValueError("lorentzian weights need element parameters")
            if self.quality_factors is not None:
                qf = self.lorentzian.quality_factor
                ok = np.zeros(qf.shape, dtype=bool)
                for target in self.quality_factors:
                    ok |= np.isclose(qf, target, rtol=1e-9, atol=0)
                if not np.all(ok):
                    raise ValueError("element quality factor outside the feasible set")
            if grid is not None:
                expected = self.lorentzian.response(grid.omega)
                if np.max(np.abs(expected - v)) > tol * max(1.0, np.max(np.abs(v))):
                    raise ValueError("lorentzian weights do not match their parameters")
        return self

    def to_dict(self):
        d = {"mode": self.mode,
             "vectors_re": self.vectors.real.tolist(),
             "vectors_im": self.vectors.imag.tolist(),
             "flat_bounds": list(self.flat_bounds)}
        if self.lorentzian is not None:
            d["lorentzian"] = self.lorentzian.to_dict()
        if self.quality_factors is not None:
            d["quality_factors"] = list(self.quality_factors)
        return d

    @classmethod
    def from_dict(cls, d):
        lor = d.get("lorentzian")
        qf = d.get("quality_factors")
        return cls(mode=d["mode"],
                   vectors=np.asarray(d["vectors_re"]) + 1j * np.asarray(d["vectors_im"]),
                   lorentzian=LorentzianParams.from_dict(lor) if lor else None,
                   flat_bounds=tuple(d.get("flat_bounds", DEFAULT_FLAT_BOUNDS)),
                   quality_factors=tuple(qf) if qf else None)


def flat_weights(values, n_subcarriers, mode="frequency_flat", bounds=DEFAULT_FLAT_BOUNDS):
    """Repeat one (N_d, N_e) weight grid over all subcarriers."""
    values = np.asarray(values, dtype=complex)
    vectors = np.broadcast_to(values, (n_subcarriers,) + values.shape).copy()
    return DmaWeights(mode, vectors, flat_bounds=tuple(bounds))


def lorentzian_weights(params, grid, quality_factors=None):
    vectors = params.response(grid.omega)
    return DmaWeights("lorentzian", vectors, lorentzian=params,
                      quality_factors=tuple(quality_factors) if quality_factors else None)


def assemble_weights(weights, grid=None):
    """Per-bin combining matrices Q_m of shape (M, N_d, N_d * N_e).

    Row k of Q_m holds q_{m,k} in columns k N_e .. (k+1) N_e - 1 and zeros
    elsewhere.
    """
    weights.validate(grid)
    M, n_strips, n_elem = weights.shape
    Q = np.zeros((M, n_strips, n_strips * n_elem), dtype=complex)
    for i in range(n_strips):
        Q[:, i, i * n_elem:(i + 1) * n_elem] = weights.vectors[:, i, :]
    return Q


def strip_blocks(mats, n_strips):
    """Diagonal N_e x N_e blocks E_i^T X E_i of stacked N x N matrices; (..., N_d, N_e, N_e)."""
    N = mats.shape[-1]
    n_elem = N // n_strips
    r = mats.reshape(mats.shape[:-2] + (n_strips, n_elem, n_strips, n_elem))
    idx = np.arange(n_strips)
    return np.moveaxis(r[..., idx, :, idx, :], 0, -3)


def equivalent_channel(ch, prop):
    """Return (G_hat, Upsilon): G_hat_m = H_m G_m and Upsilon_m = G_hat G_hat^H + H_m C_W H_m^H."""
    h = prop.diag
    g_hat = h[:, :, None] * ch.freq
    noise = h[:, :, None] * ch.noise_cov[None] * np.conj(h)[:, None, :]
    upsilon = g_hat @ np.conj(np.swapaxes(g_hat, -1, -2)) + noise
    return g_hat, upsilon


def band_starts(grid, delta):
    """Resonance starting points just below and just above the band."""
    lo, hi = grid.band_edges
    return lo - delta, hi + delta


def default_delta(subcarrier_spacing):
    return 2 * math.pi * subcarrier_spacing
