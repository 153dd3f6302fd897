"""Self-contained invariant suites, run by ``dmarx verify`` and the acceptance tests.

Each check builds its own random instances from a seed, compares the library
against an independent oracle (explicit matrices, grid searches, planted
solutions) and returns a :class:`CheckResult`.
"""

import time
from dataclasses import dataclass

import numpy as np

from .channel import ChannelConfig, generate_channel
from .design import (excess_mse, excess_mse_stacked, greedy_configure, normalize_strip_power,
                     solve_microstrip_weights)
from .fitting import oscillator_strength, project_flat, project_lorentzian, projection_targets
from .frontend import (DmaWeights, assemble_weights, build_frequency_grid, build_propagation,
                       default_delta, equivalent_channel, lorentzian_response)
from .numerics import crandn, make_rng
from .quantization import QuantizerSpec, adc_support, kappa, levels_from_budget, quantize_real


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.1f} s)"


def _random_instance(rng, M, n_strips, n_elem, K):
    """Equivalent channel, output covariance and block-row weights of a small random system."""
    N = n_strips * n_elem
    g_hat = crandn(rng, (M, N, K))
    noise_root = crandn(rng, (M, N, N)) / np.sqrt(N)
    cov = noise_root @ np.conj(np.swapaxes(noise_root, -1, -2)) + 0.1 * np.eye(N)
    upsilon = g_hat @ np.conj(np.swapaxes(g_hat, -1, -2)) + cov
    weights = DmaWeights("unconstrained", crandn(rng, (M, n_strips, n_elem)))
    return g_hat, upsilon, weights


def check_emse_forms(seed=0, instances=100, M=4, n_strips=3, n_elem=4, K=2, rtol=1e-9):
    """Per-bin excess MSE against the stacked full-matrix expression."""
    rng = make_rng(seed, 101)
    worst = 0.0
    for _ in range(instances):
        g_hat, upsilon, weights = _random_instance(rng, M, n_strips, n_elem, K)
        noise_energy = float(rng.uniform(0.05, 2.0))
        Q = assemble_weights(weights)
        per_bin = excess_mse(Q, g_hat, upsilon, noise_energy)
        stacked = excess_mse_stacked(Q, g_hat, upsilon, noise_energy)
        worst = max(worst, abs(per_bin - stacked) / abs(stacked))
    return worst <= rtol, f"max relative gap {worst:.2e} over {instances} instances (tol {rtol:g})"


def _projective_grid(points):
    """About ``points`` unit vectors (cos t, sin t e^{jp}) covering the complex projective line."""
    side = int(np.ceil(np.sqrt(points)))
    t = np.linspace(0.0, np.pi / 2, side)
    p = np.linspace(0.0, 2 * np.pi, side, endpoint=False)
    tt, pp = np.meshgrid(t, p, indexing="ij")
    return np.stack([np.cos(tt).ravel(), (np.sin(tt) * np.exp(1j * pp)).ravel()], axis=-1)


def check_microstrip_grid(seed=0, instances=50, points=10 ** 6, tol=1e-3):
    """Generalized-eigenvector quotient against a dense grid over two-element weights."""
    rng = make_rng(seed, 102)
    grid = _projective_grid(points)
    worst = 0.0
    for _ in range(instances):
        a = crandn(rng, (2, 3))
        xi = a @ a.conj().T
        b = crandn(rng, (2, 4))
        psi = b @ b.conj().T + 0.05 * np.eye(2)
        c = crandn(rng, (2, 4))
        ups = c @ c.conj().T + 0.05 * np.eye(2)
        kap = float(rng.uniform(0.01, 1.0))
        q, lam = solve_microstrip_weights(xi, psi, ups, kap)
        denom = kap * ups + psi
        # the quotient in q^T X q^* form
        num = np.real(np.einsum("gi,ij,gj->g", grid, xi, grid.conj()))
        den = np.real(np.einsum("gi,ij,gj->g", grid, denom, grid.conj()))
        best_grid = np.max(num / den)
        at_q = np.real(q @ xi @ q.conj()) / np.real(q @ denom @ q.conj())
        worst = max(worst, (best_grid - at_q) / best_grid, abs(at_q - lam) / lam)
    return worst <= tol, f"max relative shortfall {worst:.2e} over {instances} instances (tol {tol:g})"


def check_planted_strength(seed=0, instances=100, strength=2.0, tol=1e-10):
    """Closed-form oscillator strength on exact and negated Lorentzian targets."""
    rng = make_rng(seed, 103)
    grid = build_frequency_grid(1.9e9, 320e6, 16)
    omega = grid.omega
    worst = 0.0
    worst_neg = 0.0
    for _ in range(instances):
        resonance = float(rng.uniform(0.8, 1.2)) * 2 * np.pi * grid.carrier
        damping = resonance / float(rng.choice([0.1, 5.0, 30.0, rng.uniform(1, 100)]))
        targets = lorentzian_response(strength, damping, resonance, omega)
        worst = max(worst, abs(oscillator_strength(damping, resonance, targets, omega) - strength))
        worst_neg = max(worst_neg, abs(oscillator_strength(damping, resonance, -targets, omega)))
    ok = worst <= tol and worst_neg == 0.0
    return ok, f"max |F - {strength:g}| = {worst:.1e}, max negated F = {worst_neg:g}"


def _random_targets(rng, M, n_strips, n_elem):
    return projection_targets(crandn(rng, (M, n_strips, n_elem)))


def check_projection_monotone(seed=0, instances=100, iters=10, alpha_modes=("phase", "lemma"),
                              rtol=1e-10):
    """Flat and Lorentzian projection objectives never increase between outer iterations.

    Instances are independent microstrips; the projections act per microstrip,
    so each instance is one microstrip of a batched call.
    """
    rng = make_rng(seed, 104)
    grid = build_frequency_grid(1.9e9, 320e6, 16)
    delta = default_delta(20e6)
    rises = {}
    for mode in alpha_modes:
        targets = _random_targets(rng, grid.n_subcarriers, instances, 10)
        flat = project_flat(targets, iters=iters, alpha_mode=mode).trace
        lor = project_lorentzian(targets, grid, delta, iters=iters, alpha_mode=mode).trace
        for name, trace in (("flat", flat), ("lorentzian", lor)):
            rise = np.diff(trace, axis=0) / np.maximum(trace[:-1], 1e-300)
            rises[f"{name}/{mode}"] = float(max(rise.max(), 0.0))
    worst = max(rises.values())
    detail = ", ".join(f"{k} max rise {v:.1e}" for k, v in rises.items())
    return worst <= rtol, f"{instances} instances per run; {detail}"


def check_quantizer_contract(seed=0, samples=10 ** 6):
    """Reference levels for support 1 and 4 regions, plus the granular error bound."""
    spec = QuantizerSpec(1.0, 4)
    table = {0.1: 0.25, 5.0: 0.75, -0.6: -0.75, 0.0: 0.25, 1.0: 0.75, -1.0: -0.75, -5.0: -0.75}
    got = quantize_real(np.array(list(table)), spec)
    exact = bool(np.array_equal(got, np.array(list(table.values()))))
    rng = make_rng(seed, 105)
    worst = 0.0
    for levels in (2, 4, 7, 64):
        support = float(rng.uniform(0.1, 10.0))
        s = QuantizerSpec(support, levels)
        x = rng.uniform(-support, support, samples)
        worst = max(worst, float(np.max(np.abs(quantize_real(x, s) - x)) / (support / levels)))
    ok = exact and worst <= 1.0
    return ok, f"table exact={exact}; max |D(x) - x| / (gamma / b) = {worst:.6f}"


def _emse_at_global_support(vectors, g_hat, upsilon, eta, levels):
    weights = DmaWeights("unconstrained", vectors)
    spec = QuantizerSpec(adc_support(weights, upsilon, eta), levels, eta)
    return excess_mse(assemble_weights(weights), g_hat, upsilon, spec.noise_energy)


def check_greedy_beats_random(seed=0, channels=20, draws=100, bits=80, snr_db=4.0, eta=2.0):
    """Greedy weights against random weights of equal per-microstrip norm, at the global support.

    The greedy vectors are only defined up to a factor per (bin, microstrip);
    the representative used is the one with unit output power per microstrip,
    as for the unconstrained receiver. Random draws copy its norms.
    """
    cfg = ChannelConfig()
    grid = build_frequency_grid(1.9e9, cfg.n_subcarriers * 20e6, cfg.n_subcarriers)
    prop = build_propagation(cfg, grid, 0.006, 1.592)
    levels = levels_from_budget(bits, cfg.n_strips)
    wins = 0
    margin = np.inf
    for c in range(channels):
        ch = generate_channel(cfg, make_rng(seed, 106, c)).with_noise_power(10 ** (-snr_db / 10))
        g_hat, upsilon = equivalent_channel(ch, prop)
        greedy = greedy_configure(g_hat, upsilon, kappa(eta, levels), cfg.n_strips).weights.vectors
        greedy = normalize_strip_power(greedy, upsilon)
        ours = _emse_at_global_support(greedy, g_hat, upsilon, eta, levels)
        norms = np.linalg.norm(greedy, axis=-1, keepdims=True)
        rng = make_rng(seed, 107, c)
        for _ in range(draws):
            v = crandn(rng, greedy.shape)
            v *= norms / np.linalg.norm(v, axis=-1, keepdims=True)
            other = _emse_at_global_support(v, g_hat, upsilon, eta, levels)
            wins += ours < other
            margin = min(margin, other / ours)
    total = channels * draws
    return wins == total, f"greedy better in {wins}/{total} draws; smallest random/greedy ratio {margin:.3f}"


CHECKS = {
    "emse-forms": check_emse_forms,
    "microstrip-grid": check_microstrip_grid,
    "planted-strength": check_planted_strength,
    "projection-monotone": check_projection_monotone,
    "quantizer-contract": check_quantizer_contract,
    "greedy-vs-random": check_greedy_beats_random,
}


def run_check(name, seed=0, **kwargs):
    if name not in CHECKS:
        raise KeyError(f"unknown check {name!r}; available: {', '.join(CHECKS)}")
    start = time.perf_counter()
    passed, detail = CHECKS[name](seed=seed, **kwargs)
    return CheckResult(name, bool(passed), detail, time.perf_counter() - start)


def run_checks(names=None, seed=0):
    return [run_check(n, seed) for n in (names or CHECKS)]
