"""Task-based receiver design: digital filter, excess MSE and greedy DMA weights.

All per-bin quantities are stacked along axis 0 (subcarriers). ``Q`` denotes
the assembled combiners of shape (M, N_d, N), ``g_hat`` the equivalent channel
(M, N, K) and ``upsilon`` its output covariance (M, N, N).
"""

import base64
import logging
from dataclasses import dataclass, field

import numpy as np

from .channel import qpsk_hard_bits
from .frontend import (DmaWeights, MicrostripPropagation, assemble_weights,
                       equivalent_channel, flat_weights, strip_blocks)
from .numerics import (assert_hermitian, block_diag, dft_matrix, hermitian_inverse,
                       hermitian_part, hermitian_solve, max_generalized_eigvec)
from .quantization import QuantizerSpec, adc_support, quantize_complex

log = logging.getLogger(__name__)

POWER_FLOOR = 1e-30


def _h(a):
    return np.conj(np.swapaxes(a, -1, -2))


@dataclass
class ReceiverDesign:
    """A configured receiver: DMA weights, ADC quantizer and per-bin digital filters.

    ``filters[m]`` is the K x N_d matrix mapping bin m of ``V1^H D_C(Z)`` to the
    symbol estimate of that bin; :attr:`digital_filter` assembles the full
    time-domain matrix ``A``.
    """

    weights: DmaWeights
    spec: QuantizerSpec
    filters: np.ndarray
    propagation: MicrostripPropagation
    label: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def digital_filter(self):
        """A = V2^H blkdiag(W_m) V1^H as an (M K) x (M N_d) matrix."""
        M, K, n_strips = self.filters.shape
        v1 = np.kron(dft_matrix(M).conj().T, np.eye(n_strips))
        v2 = np.kron(dft_matrix(M), np.eye(K))
        return v2.conj().T @ block_diag(list(self.filters)) @ v1.conj().T

    def to_dict(self):
        M, K, n_strips = self.filters.shape
        blob = np.ascontiguousarray(self.filters, dtype=np.complex128).tobytes()
        return {"label": self.label,
                "weights": self.weights.to_dict(),
                "quantizer": self.spec.to_dict(),
                "filter_shape": [M * K, M * n_strips],
                "filters_bins": [M, K, n_strips],
                "filters_b64": base64.b64encode(blob).decode("ascii"),
                "propagation": {"attenuation": self.propagation.attenuation,
                                "phase_slope": self.propagation.phase_slope,
                                "diag_re": self.propagation.diag.real.tolist(),
                                "diag_im": self.propagation.diag.imag.tolist()},
                "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d):
        filters = np.frombuffer(base64.b64decode(d["filters_b64"]), dtype=np.complex128)
        p = d["propagation"]
        prop = MicrostripPropagation(np.asarray(p["diag_re"]) + 1j * np.asarray(p["diag_im"]),
                                     p["attenuation"], p["phase_slope"])
        q = d["quantizer"]
        return cls(weights=DmaWeights.from_dict(d["weights"]),
                   spec=QuantizerSpec(q["support"], q["levels"], q["eta"]),
                   filters=filters.reshape(d["filters_bins"]).copy(),
                   propagation=prop, label=d.get("label", ""),
                   metadata=d.get("metadata", {}))


# ---------------------------------------------------------------------------
# Digital filter and MSE expressions


def optimal_filters(Q, g_hat, upsilon, noise_energy):
    """Per-bin MSE-optimal filters W_m = G_m^H Q_m^H (s I + Q_m U_m Q_m^H)^-1."""
    n_strips = Q.shape[1]
    inner = Q @ upsilon @ _h(Q) + noise_energy * np.eye(n_strips)
    inner = hermitian_part(inner)
    cross = Q @ g_hat  # (M, N_d, K)
    return _h(hermitian_solve(inner, cross))


def optimal_digital_filter(weights, ch, prop, spec):
    """Full time-domain filter ``A`` for fixed weights and quantizer."""
    g_hat, upsilon = equivalent_channel(ch, prop)
    W = optimal_filters(assemble_weights(weights), g_hat, upsilon, spec.noise_energy)
    M, K, n_strips = W.shape
    v1 = np.kron(dft_matrix(M).conj().T, np.eye(n_strips))
    v2 = np.kron(dft_matrix(M), np.eye(K))
    return v2.conj().T @ block_diag(list(W)) @ v1.conj().T


def excess_mse(Q, g_hat, upsilon, noise_energy):
    """Per-bin excess MSE summed over bins.

    sum_m tr[G_m^H U_m^-1 (U_m^-1 + s^-1 Q_m^H Q_m)^-1 U_m^-1 G_m] with
    ``U_m = upsilon[m]`` and ``s = noise_energy``.
    """
    if noise_energy <= 0:
        raise ValueError("excess MSE needs positive quantization noise energy")
    ups_inv = hermitian_inverse(upsilon)
    proj = ups_inv @ g_hat  # Upsilon^-1 G_hat
    qhq = _h(Q) @ Q
    inner = hermitian_part(ups_inv + qhq / noise_energy)
    val = np.einsum("mnk,mnk->", np.conj(proj), hermitian_solve(inner, proj))
    return float(np.real(val))


def excess_mse_stacked(Q, g_hat, upsilon, noise_energy):
    """Excess MSE from the stacked block-diagonal matrices of the whole OFDM block.

    Independent of :func:`excess_mse`: builds Qbar, Gbar and Sigma explicitly
    and evaluates tr[Gbar^H Sigma^-1 (Sigma^-1 + s^-1 Qbar^H Qbar)^-1 Sigma^-1 Gbar].
    """
    Qbar = block_diag(list(Q))
    Gbar = block_diag(list(g_hat))
    Sigma = block_diag(list(upsilon))
    s_inv = np.linalg.inv(Sigma)
    core = np.linalg.inv(s_inv + Qbar.conj().T @ Qbar / noise_energy)
    return float(np.real(np.trace(Gbar.conj().T @ s_inv @ core @ s_inv @ Gbar)))


def unquantized_mmse(g_hat, upsilon):
    """e^o = sum_m tr[I_K - G_m^H Upsilon_m^-1 G_m]."""
    K = g_hat.shape[-1]
    val = np.einsum("mnk,mnk->", np.conj(g_hat), hermitian_solve(upsilon, g_hat))
    return float(g_hat.shape[0] * K - np.real(val))


def model_mse(Q, g_hat, upsilon, noise_energy, filters=None):
    """MSE of ``filters`` under the additive quantization-noise model.

    Observation r_m = Q_m y'_m + e_m with e_m ~ (0, s I); defaults to the
    optimal filters.
    """
    if filters is None:
        filters = optimal_filters(Q, g_hat, upsilon, noise_energy)
    n_strips = Q.shape[1]
    K = g_hat.shape[-1]
    cov_r = Q @ upsilon @ _h(Q) + noise_energy * np.eye(n_strips)
    cross = filters @ Q @ g_hat  # W Q G
    err = (K * g_hat.shape[0]
           - 2 * np.real(np.trace(cross, axis1=-2, axis2=-1)).sum()
           + np.real(np.einsum("mkr,mrs,mks->", np.conj(filters), np.swapaxes(cov_r, -1, -2), filters)))
    return float(err)


# ---------------------------------------------------------------------------
# Greedy unconstrained configuration


@dataclass
class GreedyState:
    """U_{m,i} for all bins after ``step`` microstrips have been fixed.

    ``U_inv`` tracks the inverse through the same rank-one updates
    (Sherman-Morrison), so no step needs a fresh N x N solve.
    """

    U: np.ndarray
    n_strips: int
    step: int = 0
    U_inv: np.ndarray = None

    @classmethod
    def start(cls, upsilon, n_strips):
        return cls(hermitian_inverse(upsilon), n_strips, 0, np.array(upsilon, dtype=complex))

    def inverse(self):
        if self.U_inv is None:
            self.U_inv = hermitian_inverse(self.U)
        return self.U_inv

    def updated(self, strip, q, kappa, power):
        """State after installing weights ``q`` (M, N_e) on microstrip ``strip``."""
        n_elem = q.shape[-1]
        sel = slice(strip * n_elem, (strip + 1) * n_elem)
        coef = 1.0 / (kappa * power)  # (M,)
        U = self.U.copy()
        U[:, sel, sel] += coef[:, None, None] * np.conj(q)[:, :, None] * q[:, None, :]
        inv = self.inverse()
        col = inv[:, :, sel] @ np.conj(q)[:, :, None]          # U^-1 e, (M, N, 1)
        gain = np.real(q[:, None, :] @ col[:, sel])[:, 0, 0]  # e^H U^-1 e with e = q*
        inv = inv - (col @ _h(col)) / (1.0 / coef + gain)[:, None, None]
        return GreedyState(hermitian_part(U), self.n_strips, strip + 1, hermitian_part(inv))


def greedy_objective_terms(state, strip, g_hat, upsilon, ups_inv_g=None, bins=None):
    """(Xi, Psi) of the greedy step for microstrip ``strip`` (0-based), all bins.

    Xi = E_i^T U^-1 Ups^-1 G G^H Ups^-1 U^-1 E_i and Psi = E_i^T U^-1 E_i,
    with U the state before the step.
    """
    inv = state.inverse()
    if ups_inv_g is None:
        ups_inv_g = hermitian_solve(upsilon, g_hat)
    if bins is not None:
        inv = inv[bins]
        ups_inv_g = ups_inv_g[bins]
    n_elem = inv.shape[-1] // state.n_strips
    sel = slice(strip * n_elem, (strip + 1) * n_elem)
    x = inv[..., sel, :] @ ups_inv_g
    xi = hermitian_part(x @ _h(x))
    psi = hermitian_part(inv[..., sel, sel])
    return xi, psi


def greedy_trace(state, g_hat, upsilon, ups_inv_g=None):
    """J_{m,i} = tr[G^H Ups^-1 U^-1 Ups^-1 G] per bin."""
    proj = hermitian_solve(upsilon, g_hat) if ups_inv_g is None else ups_inv_g
    return np.real(np.einsum("mnk,mnk->m", np.conj(proj), state.inverse() @ proj))


def solve_microstrip_weights(xi, psi, ups_block, kappa):
    """Maximizer of q^T Xi q* / q^T (kappa Ups_ii + Psi) q*, returned unit norm.

    Returns ``(q, value)``; ``q`` is the conjugate of the top generalized
    eigenvector. Bins where Xi vanishes get the top eigenvector of Psi^-1.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    denom = hermitian_part(kappa * ups_block + psi)
    v, lam = max_generalized_eigvec(xi, denom)
    scale = np.real(np.trace(xi, axis1=-2, axis2=-1))
    degenerate = np.atleast_1d(scale <= 1e-14 * np.real(np.trace(denom, axis1=-2, axis2=-1)))
    if np.any(degenerate):
        n = psi.shape[-1]
        fallback, _ = max_generalized_eigvec(np.broadcast_to(np.eye(n), psi.shape), psi)
        v = np.where(degenerate.reshape(np.shape(lam) + (1,)), fallback, v)
        lam = np.where(degenerate.reshape(np.shape(lam)), 0.0, lam)
    return np.conj(v), lam


def microstrip_quotient(q, xi, psi, ups_block, kappa):
    """The greedy ratio evaluated at ``q`` (stackable)."""
    num = np.einsum("...i,...ij,...j->...", q, xi, np.conj(q))
    den = np.einsum("...i,...ij,...j->...", q, kappa * ups_block + psi, np.conj(q))
    return np.real(num) / np.real(den)


@dataclass
class GreedyResult:
    weights: DmaWeights
    state: GreedyState
    traces: np.ndarray      # (N_d + 1, M) J_{m,i} after each step
    degenerate: np.ndarray  # (M, N_d) bins where Xi vanished


def greedy_configure(g_hat, upsilon, kappa, n_strips, project=None):
    """Sequential per-microstrip configuration for every bin.

    Parameters
    ----------
    g_hat, upsilon : ndarray
        Equivalent channel (M, N, K) and output covariance (M, N, N).
    kappa : float
        Noise energy per unit ADC input power.
    n_strips : int
        Number of microstrips N_d.
    project : callable, optional
        ``project(i, q_hat)`` receives the unconstrained (M, N_e) weights of
        microstrip ``i`` and returns the weights actually installed; the
        returned vectors drive the U update, so later microstrips see them.

    Returns
    -------
    GreedyResult
        Unit-norm unconstrained vectors (or the projected ones) plus trace history.
    """
    assert_hermitian(upsilon, name="Upsilon")
    M, N, _ = g_hat.shape
    n_elem = N // n_strips
    state = GreedyState.start(upsilon, n_strips)
    ups_inv_g = hermitian_solve(upsilon, g_hat)
    blocks = strip_blocks(upsilon, n_strips)
    vectors = np.zeros((M, n_strips, n_elem), dtype=complex)
    degenerate = np.zeros((M, n_strips), dtype=bool)
    traces = [greedy_trace(state, g_hat, upsilon, ups_inv_g)]
    for i in range(n_strips):
        xi, psi = greedy_objective_terms(state, i, g_hat, upsilon, ups_inv_g)
        q, lam = solve_microstrip_weights(xi, psi, blocks[:, i], kappa)
        degenerate[:, i] = np.real(np.trace(xi, axis1=-2, axis2=-1)) <= 0
        if project is not None:
            q = np.asarray(project(i, q), dtype=complex)
        power = np.real(np.einsum("ml,mlk,mk->m", q, blocks[:, i], np.conj(q)))
        if np.any(power < POWER_FLOOR):
            raise FloatingPointError(f"microstrip {i} has zero output power")
        state = state.updated(i, q, kappa, power)
        vectors[:, i] = q
        traces.append(greedy_trace(state, g_hat, upsilon, ups_inv_g))
    if np.any(degenerate):
        log.warning("greedy design: %d degenerate (bin, strip) pairs", int(degenerate.sum()))
    return GreedyResult(DmaWeights("unconstrained", vectors), state, np.array(traces), degenerate)


# ---------------------------------------------------------------------------
# Choosing among feasible configurations


def strip_candidate_mse(candidates, g_hat, upsilon, levels, eta):
    """Model-MSE evaluator over per-microstrip mixtures of candidate weight sets.

    ``candidates`` is a sequence of (M, N_d, N_e) weight arrays. Returns a
    function mapping a choice vector (N_d,) of candidate indices to the MSE
    under the additive quantization-noise model, with the ADC support
    recomputed globally for the mixture (the design objective the excess MSE
    offsets by the constant e^o).
    """
    stack = np.stack([np.asarray(c, dtype=complex) for c in candidates])  # (C, M, N_d, N_e)
    C, M, n_strips, n_elem = stack.shape
    K = g_hat.shape[-1]
    ups = upsilon.reshape(M, n_strips, n_elem, n_strips, n_elem)
    cov = np.einsum("cmil,miljn,dmjn->mcidj", stack, ups, np.conj(stack), optimize=True)
    cross = np.einsum("cmil,milk->mcik", stack, g_hat.reshape(M, n_strips, n_elem, K))
    strips = np.arange(n_strips)

    def evaluate(choice):
        choice = np.asarray(choice)
        R = cov[:, choice, strips][:, :, choice, strips]  # (M, N_d, N_d)
        X = cross[:, choice, strips]                      # (M, N_d, K)
        power = np.real(np.einsum("mii->mi", R))
        support = eta * np.sqrt(max(np.max(np.mean(power, axis=0)), 0.0))
        if support <= 0:
            return np.inf
        noise = QuantizerSpec(support, levels, eta).noise_energy
        inner = R + noise * np.eye(n_strips)
        gain = np.real(np.einsum("mik,mik->", np.conj(X), np.linalg.solve(inner, X)))
        return float(M * K - gain)

    return evaluate


def select_strip_candidates(candidates, g_hat, upsilon, levels, eta, max_sweeps=3):
    """Per-microstrip choice among candidate configurations by coordinate descent.

    Starts from the best uniform choice and switches one microstrip at a
    time while the model MSE strictly decreases. Returns ``(choice, mse)``.
    """
    evaluate = strip_candidate_mse(candidates, g_hat, upsilon, levels, eta)
    n_strips = np.shape(candidates[0])[1]
    uniform = [evaluate(np.full(n_strips, c)) for c in range(len(candidates))]
    choice = np.full(n_strips, int(np.argmin(uniform)))
    best = min(uniform)
    for _ in range(max_sweeps):
        improved = False
        for i in range(n_strips):
            for c in range(len(candidates)):
                if c == choice[i]:
                    continue
                trial = choice.copy()
                trial[i] = c
                val = evaluate(trial)
                if val < best * (1 - 1e-12):
                    best, choice, improved = val, trial, True
        if not improved:
            break
    return choice, best


# ---------------------------------------------------------------------------
# Assembling receivers


def normalize_strip_power(vectors, upsilon):
    """Scale every q_{m,i} to unit output power q^T Ups_ii q* = 1."""
    blocks = strip_blocks(upsilon, vectors.shape[1])
    power = np.real(np.einsum("mil,milk,mik->mi", vectors, blocks, np.conj(vectors)))
    return vectors / np.sqrt(np.where(power > POWER_FLOOR, power, 1.0))[..., None]


def finalize_design(weights, g_hat, upsilon, prop, levels, eta, label="", support=None, metadata=None):
    """Set the ADC support (unless fixed) and the matching digital filters."""
    if support is None:
        support = adc_support(weights, upsilon, eta)
        if support <= 0:
            raise ValueError("all-zero DMA weights; no ADC support can be set")
    spec = QuantizerSpec(support, levels, eta)
    W = optimal_filters(assemble_weights(weights), g_hat, upsilon, spec.noise_energy)
    return ReceiverDesign(weights, spec, W, prop, label, dict(metadata or {}))


def design_unconstrained(ch, prop, levels, eta, normalize=True):
    """Greedy weights used directly; optionally equalized to unit strip output power."""
    from .quantization import kappa as kappa_of

    g_hat, upsilon = equivalent_channel(ch, prop)
    n_strips = prop.diag.shape[1] // ch.elem_corr.shape[0]
    res = greedy_configure(g_hat, upsilon, kappa_of(eta, levels), n_strips)
    weights = res.weights
    if normalize:
        weights = DmaWeights("unconstrained", normalize_strip_power(weights.vectors, upsilon))
    return finalize_design(weights, g_hat, upsilon, prop, levels, eta, label="unconstrained",
                           metadata={"degenerate_bins": int(res.degenerate.sum())})


def baseline_phase_shifter(ch, levels, support=100.0, eta=None):
    """Frequency-flat unit-modulus partially connected combiner with a fixed ADC support.

    Each strip uses the phases of the conjugated top eigenvector of its block
    of the bin-averaged channel Gram matrix; no microstrip propagation.
    """
    if support <= 0:
        raise ValueError("support must be positive")
    M = ch.n_subcarriers
    n_elem = ch.elem_corr.shape[0]
    N = ch.freq.shape[1]
    n_strips = N // n_elem
    prop = MicrostripPropagation.identity(M, N)
    g_hat, upsilon = equivalent_channel(ch, prop)
    gram = np.mean(g_hat @ _h(g_hat), axis=0)
    blocks = strip_blocks(gram, n_strips)
    _, vecs = np.linalg.eigh(hermitian_part(blocks))
    top = vecs[..., :, -1]
    phases = np.exp(1j * np.angle(np.conj(top)))
    weights = flat_weights(phases, M, mode="phase_shifter")
    return finalize_design(weights, g_hat, upsilon, prop, levels, eta, label="phase_shifter",
                           support=support)


# ---------------------------------------------------------------------------
# Running a receiver on data


def dma_outputs(Q, prop, y):
    """Time-domain ADC inputs Z (M, N_d) from per-bin channel outputs y (M, N)."""
    zbar = np.einsum("min,mn->mi", Q, prop.diag * y)
    return np.fft.ifft(zbar, axis=0, norm="ortho")


def recover_symbols(design, y, quantize=True, return_inputs=False):
    """Estimate the frequency-domain symbols from raw channel outputs ``y`` (M, N).

    Returns ``(s_hat, bits)``; with ``return_inputs`` the ADC inputs are
    appended for overload accounting.
    """
    Q = assemble_weights(design.weights)
    z = dma_outputs(Q, design.propagation, y)
    zq = quantize_complex(z, design.spec) if quantize else z
    zbar = np.fft.fft(zq, axis=0, norm="ortho")
    s_hat = np.einsum("mkr,mr->mk", design.filters, zbar)
    out = (s_hat, qpsk_hard_bits(s_hat))
    return out + (z,) if return_inputs else out


def lmmse_filters(ch):
    """Unquantized per-bin LMMSE filters G_m^H (G_m G_m^H + C_W)^-1; (M, K, N)."""
    cov = ch.freq @ _h(ch.freq) + ch.noise_cov[None]
    return _h(hermitian_solve(hermitian_part(cov), ch.freq))


def baseline_lmmse_unquantized(ch, y, filters=None):
    if filters is None:
        filters = lmmse_filters(ch)
    s_hat = np.einsum("mkn,mn->mk", filters, y)
    return s_hat, qpsk_hard_bits(s_hat)
