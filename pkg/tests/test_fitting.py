import numpy as np
import pytest
import scipy.optimize

from dmarx.fitting import (START_IDS, _fit_normalized, curve_fit_lorentzian, flat_lorentzian,
                           levenberg_marquardt, lorentzian_residual, optimal_alpha, oscillator_strength,
                           project_flat, project_flat_weights, project_lorentzian, projection_targets,
                           update_alpha)
from dmarx.frontend import LorentzianParams, build_frequency_grid, default_delta, lorentzian_response
from dmarx.numerics import crandn, make_rng

GRID = build_frequency_grid(1.9e9, 320e6, 16)
OMEGA = GRID.omega
DELTA = default_delta(20e6)
QFS = (0.1, 5.0, 30.0)


# ---------------------------------------------------------------------------
# Scale factors and flat projection


def test_alpha_identity_and_orthogonal(rng):
    q = crandn(rng, 5)
    assert np.isclose(optimal_alpha(q, q), 1.0)
    q_hat = np.array([1.0, 1j, 0, 0])
    orth = np.array([1.0, -1j, 0, 0])  # q^T q_hat^* = 1 + (-1j)(-1j) = 0
    assert np.isclose(optimal_alpha(orth, q_hat), 0.0)
    with pytest.raises(ValueError):
        optimal_alpha(q, np.zeros(5))


def test_alpha_beats_random_cloud(rng):
    q, q_hat = crandn(rng, 6), crandn(rng, 6)
    a = optimal_alpha(q, q_hat)
    best = np.sum(np.abs(q - a * q_hat) ** 2)
    cloud = crandn(rng, 10 ** 4) * 2 * abs(a) + a
    dists = np.sum(np.abs(q[None] - cloud[:, None] * q_hat[None]) ** 2, axis=1)
    assert np.all(dists >= best)


def test_phase_alpha_keeps_magnitude_and_is_constrained_optimum(rng):
    q, q_hat = crandn(rng, 6), crandn(rng, 6)
    prev = np.array(2.5 * np.exp(0.3j))
    a = update_alpha(q, q_hat, "phase", prev)
    assert np.isclose(abs(a), 2.5)
    phases = np.exp(1j * np.linspace(0, 2 * np.pi, 3600, endpoint=False)) * 2.5
    dists = np.sum(np.abs(q[None] - phases[:, None] * q_hat[None]) ** 2, axis=1)
    assert np.sum(np.abs(q - a * q_hat) ** 2) <= dists.min() + 1e-12
    assert np.isclose(abs(update_alpha(q, q_hat, "phase")), 1.0)
    assert np.isclose(update_alpha(q, q_hat, "lemma"), optimal_alpha(q, q_hat))
    with pytest.raises(ValueError):
        update_alpha(q, q_hat, "magic")


def test_flat_constant_targets_converge_immediately():
    v = np.array([0.2, 0.5, 0.9])
    proj = project_flat(np.broadcast_to(v, (16, 3)).astype(complex), iters=1)
    assert np.allclose(proj.values, v)
    assert np.isclose(proj.trace[0], 0.0)


def test_flat_clamps_large_mean():
    proj = project_flat(np.full((16, 2), 50.0 + 0j), iters=3)
    assert np.all(proj.values == 1.0)
    proj = project_flat(np.full((16, 2), 1e-6 + 0j), iters=3)
    assert np.all(proj.values == 0.001)


@pytest.mark.parametrize("mode", ["phase", "lemma"])
def test_flat_objective_monotone(mode):
    rng = make_rng(1)
    for _ in range(20):
        targets = projection_targets(crandn(rng, (16, 3, 10)))
        proj = project_flat(targets, iters=20, alpha_mode=mode)
        assert np.all(np.diff(proj.trace, axis=0) <= 1e-12 * proj.trace[0])
        assert np.all((proj.values >= 0.001) & (proj.values <= 1.0))


def test_flat_weights_are_feasible(rng):
    w, _ = project_flat_weights(projection_targets(crandn(rng, (16, 2, 5))))
    w.validate()
    assert w.mode == "frequency_flat"


def test_projection_targets_representative(rng):
    t = projection_targets(crandn(rng, (16, 3, 5)), peak=0.8)
    s = np.sum(t, axis=-1)
    assert np.allclose(s.imag, 0, atol=1e-12) and np.all(s.real > 0)
    norms = np.linalg.norm(t, axis=-1)
    assert np.allclose(norms, norms.flat[0])
    assert np.isclose(np.max(np.abs(t)), 0.8)


# ---------------------------------------------------------------------------
# Oscillator strength


def _planted(F=2.0, qf=30.0, fraction=1.0):
    wr = fraction * 2 * np.pi * GRID.carrier
    return lorentzian_response(F, wr / qf, wr, OMEGA), wr / qf, wr


def test_strength_planted_and_negated():
    for qf in QFS:
        targets, chi, wr = _planted(qf=qf, fraction=1.02)
        assert abs(oscillator_strength(chi, wr, targets, OMEGA) - 2.0) <= 1e-10
        assert oscillator_strength(chi, wr, -targets, OMEGA) == 0.0


def test_strength_is_grid_optimal(rng):
    for _ in range(10):
        targets = crandn(rng, 16)
        chi, wr = 4e8, rng.uniform(1.1e10, 1.3e10)
        F = oscillator_strength(chi, wr, targets, OMEGA)
        grid = np.linspace(0, 10 * F + 1, 10 ** 4)
        res = [lorentzian_residual(LorentzianParams(np.array([f]), np.array([chi]), np.array([wr])),
                                   targets, OMEGA)[0] for f in grid[::50]]
        best = lorentzian_residual(LorentzianParams(np.array([F]), np.array([chi]), np.array([wr])),
                                   targets, OMEGA)[0]
        assert best <= min(res) + 1e-12
        resp = lorentzian_response(1.0, chi, wr, OMEGA)
        dense = np.sum(np.abs(grid[:, None] * resp[None] - targets[None]) ** 2, axis=1)
        assert best <= dense.min() + 1e-12


# ---------------------------------------------------------------------------
# Curve fitting


def test_fit_from_truth_is_fixed_point():
    targets, chi, wr = _planted(qf=5.0, fraction=1.01)
    fit = curve_fit_lorentzian(targets, OMEGA, wr, quality_factor=5.0)
    assert fit.residual < 1e-12
    assert np.isclose(fit.params.resonance, wr, rtol=1e-9)


@pytest.mark.parametrize("qf, fraction", [(30.0, 1.0), (5.0, 0.98), (0.1, 1.05), (30.0, 1.04)])
def test_fit_recovers_perturbed_resonance(qf, fraction):
    targets, chi, wr = _planted(qf=qf, fraction=fraction)
    fit = curve_fit_lorentzian(targets, OMEGA, 1.05 * wr, quality_factor=qf)
    assert abs(fit.params.resonance / wr - 1) < 1e-3
    assert np.isclose(fit.params.strength, 2.0, rtol=1e-3)


def test_fit_free_damping_recovers_truth():
    targets, chi, wr = _planted(qf=20.0, fraction=1.01)
    fit = curve_fit_lorentzian(targets, OMEGA, 1.02 * wr, start_damping=1.1 * chi)
    assert abs(fit.params.resonance / wr - 1) < 1e-3
    assert abs(fit.params.damping / chi - 1) < 1e-2
    with pytest.raises(ValueError):
        curve_fit_lorentzian(targets, OMEGA, wr)


def test_fit_residual_history_non_increasing(rng):
    targets = crandn(rng, (20, 16))
    start = np.full(20, 2 * np.pi * 1.8e9)
    fit = curve_fit_lorentzian(targets, OMEGA, start, quality_factor=30.0, keep_history=True)
    hist = np.array(fit.history)
    assert np.all(np.diff(hist, axis=0) <= 0)
    ref = float(np.mean(OMEGA))
    start_params = LorentzianParams(
        oscillator_strength(start / 30.0, start, targets, OMEGA), start / 30.0, start)
    assert np.all(fit.residual <= lorentzian_residual(start_params, targets, OMEGA) * (1 + 1e-12))
    assert np.allclose(fit.residual, hist[-1], rtol=1e-8, atol=1e-14)
    assert ref > 0


def test_compiled_and_numpy_solvers_agree(rng):
    ref = float(np.mean(OMEGA))
    x = OMEGA / ref
    targets = projection_targets(crandn(rng, (16, 30, 1)))[:, :, 0].T
    x0 = rng.uniform(0.9, 1.1, 30)
    qf = rng.choice(QFS, 30)
    fast = _fit_normalized(targets, x, x0, qf=qf, engine="compiled")
    slow = _fit_normalized(targets, x, x0, qf=qf, engine="numpy")
    assert np.array_equal(fast.iterations, slow.iterations)
    assert np.allclose(fast.cost, slow.cost, rtol=1e-9, atol=1e-14)
    # rows that ran off to a flat direction agree in cost only
    bounded = np.all(fast.params < 10, axis=1)
    assert bounded.sum() >= 10
    assert np.allclose(fast.params[bounded], slow.params[bounded], rtol=1e-9)


def test_levenberg_marquardt_against_scipy():
    t = np.linspace(0, 3, 40)
    y = 2.5 * np.exp(-1.3 * t) + 0.05 * np.sin(7 * t)

    def fun(p, rows):
        return p[:, :1] * np.exp(-p[:, 1:2] * t[None]) - y[None]

    res = levenberg_marquardt(fun, np.array([[1.0, 0.5], [4.0, 3.0]]), rtol=1e-14, max_iter=500)
    ref = scipy.optimize.least_squares(lambda p: fun(p[None], None)[0], [1.0, 0.5], xtol=1e-14,
                                       ftol=1e-14, gtol=1e-14)
    for row in res.params:
        assert np.allclose(row, ref.x, rtol=1e-5)
    assert np.allclose(res.cost, 2 * ref.cost, rtol=1e-8)


def test_levenberg_marquardt_respects_lower_bound():
    def fun(p, rows):
        out = (p - (-1.0)) * np.ones((1, 3))
        out[p[:, 0] <= 0] = np.nan
        return out

    res = levenberg_marquardt(fun, np.array([[2.0]]), lower=np.array([0.0]))
    assert res.params[0, 0] > 0
    with pytest.raises(ValueError):
        levenberg_marquardt(fun, np.array([[-1.0]]), lower=np.array([0.0]))


# ---------------------------------------------------------------------------
# Lorentzian projection


def _planted_array(rng, n_strips=2, n_elem=3):
    qf = rng.choice(QFS, (n_strips, n_elem))
    wr = rng.uniform(0.95, 1.05, (n_strips, n_elem)) * 2 * np.pi * GRID.carrier
    params = LorentzianParams(rng.uniform(0.1, 1.0, (n_strips, n_elem)), wr / qf, wr)
    return params.response(OMEGA), params


def test_planted_lorentzian_projection_reaches_zero(rng):
    for mode in ("phase", "lemma"):
        targets, _ = _planted_array(rng)
        proj = project_lorentzian(targets, GRID, DELTA, QFS, iters=2, alpha_mode=mode)
        assert np.all(proj.trace[-1] <= 1e-8)


def test_monotone_targets_pick_below_band_start(rng):
    lo, _ = GRID.band_edges
    wins = 0
    n = 40
    for k in range(n):
        wr = lo - rng.uniform(1.0, 4.0) * DELTA
        qf = rng.choice(QFS[1:])  # the heavily damped factor has no resonant profile
        base = lorentzian_response(1.0, wr / qf, wr, OMEGA)
        order = np.argsort(OMEGA)
        assert np.all(np.diff(np.abs(base[order])) < 0)
        targets = (base * (1 + 0.01 * crandn(rng, 16)))[:, None, None]
        proj = project_lorentzian(targets, GRID, DELTA, QFS, iters=1, alpha_mode="lemma")
        wins += START_IDS[proj.start[0, 0]] == "below_band"
    assert wins >= 0.9 * n


def test_unimodal_targets_resonate_near_peak_bin(rng):
    spacing = 2 * np.pi * 20e6
    for _ in range(20):
        wr = OMEGA[5] + rng.uniform(-0.3, 0.3) * spacing
        targets = lorentzian_response(0.5, wr / 30.0, wr, OMEGA)
        targets = (targets * (1 + 0.01 * crandn(rng, 16)))[:, None, None]
        proj = project_lorentzian(targets, GRID, DELTA, QFS, iters=1, alpha_mode="lemma")
        assert abs(proj.params.resonance[0, 0] - OMEGA[5]) <= spacing


@pytest.mark.parametrize("mode", ["phase", "lemma"])
def test_lorentzian_projection_monotone_and_feasible(mode):
    rng = make_rng(2)
    targets = projection_targets(crandn(rng, (16, 10, 10)))
    proj = project_lorentzian(targets, GRID, DELTA, QFS, iters=6, alpha_mode=mode)
    assert np.all(np.diff(proj.trace, axis=0) <= 1e-12 * proj.trace[0])
    proj.weights.validate(GRID)
    assert np.all(proj.params.strength >= 0)
    assert set(np.unique(proj.quality)) <= set(QFS)
    assert np.allclose(proj.params.quality_factor, proj.quality)


def test_lorentzian_projection_free_damping(rng):
    targets, _ = _planted_array(rng, 1, 2)
    proj = project_lorentzian(targets, GRID, DELTA, None, iters=3)
    assert np.all(proj.trace <= 1e-20)
    assert np.all(proj.params.damping > 0)


def test_lorentzian_projection_argument_checks(rng):
    targets, _ = _planted_array(rng, 1, 1)
    with pytest.raises(ValueError):
        project_lorentzian(targets, GRID, 0.0)
    with pytest.raises(ValueError):
        project_lorentzian(targets, GRID, DELTA, iters=0)


def test_flat_lorentzian_tracks_flat_amplitudes():
    values = np.array([[0.001, 0.3, 1.0]])
    params = flat_lorentzian(values, GRID, 30.0)
    resp = params.response(OMEGA)  # (16, 1, 3)
    # one common factor per subcarrier, close to -1, with tiny ripple
    ratio = resp / values
    assert np.allclose(ratio, ratio[:, :, :1])
    assert np.max(np.abs(ratio[:, 0, 0] + 1)) < 1e-3
    assert np.allclose(np.mean(np.abs(resp), axis=0), values)
    assert np.allclose(params.quality_factor, 30.0)
    with pytest.raises(ValueError):
        flat_lorentzian(-values, GRID)
