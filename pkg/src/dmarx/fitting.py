"""Projection of unconstrained DMA weights onto physically realizable ones.

Two feasible families are supported: frequency-flat amplitude weights in a
real interval, and Lorentzian elements whose quality factor is drawn from a
small discrete set. Both exploit that each microstrip's unconstrained weights
are only defined up to a complex factor per subcarrier.

The Lorentzian fits are batched: every (element, start point, quality factor)
combination is one row of a vectorized Levenberg-Marquardt solve. Frequencies
are normalized by the carrier internally, which leaves the response unchanged
since it is homogeneous of degree zero in (Omega, Omega_R, chi).
"""

from dataclasses import dataclass

import numpy as np

from .frontend import (DEFAULT_FLAT_BOUNDS, DmaWeights, LorentzianParams, flat_weights,
                       lorentzian_weights)

START_IDS = ("below_band", "above_band", "in_band_peak", "previous")
DEFAULT_QUALITY_FACTORS = (0.1, 5.0, 30.0)


def optimal_alpha(q, q_hat):
    """alpha = q^T q_hat^* / ||q_hat||^2 along the last axis."""
    q_hat = np.asarray(q_hat)
    norm = np.sum(np.abs(q_hat) ** 2, axis=-1)
    if np.any(norm <= 0):
        raise ValueError("zero target vector; scaling factor is undefined")
    return np.sum(np.asarray(q) * np.conj(q_hat), axis=-1) / norm


ALPHA_MODES = ("phase", "lemma")


def update_alpha(q, q_hat, mode, previous=None):
    """Per-bin scale factors for the current feasible weights.

    ``"lemma"`` is the unrestricted least-squares factor; ``"phase"`` keeps
    the magnitude of ``previous`` (1 initially) and takes the phase of the
    least-squares factor, which is the exact minimizer under that magnitude.
    """
    best = optimal_alpha(q, q_hat)
    if mode == "lemma":
        return best
    if mode != "phase":
        raise ValueError(f"unknown alpha mode {mode!r}")
    mag = np.ones(best.shape) if previous is None else np.abs(previous)
    unit = np.where(np.abs(best) > 0, best / np.where(np.abs(best) > 0, np.abs(best), 1.0), 1.0)
    if previous is not None:
        prev_unit = previous / np.where(np.abs(previous) > 0, np.abs(previous), 1.0)
        unit = np.where(np.abs(best) > 0, unit, prev_unit)
    return mag * unit


def projection_targets(q_hat, upsilon=None, peak=1.0):
    """Representative of the unconstrained weights handed to the projections.

    Each q_{m,i} may be rescaled by any complex factor without changing the
    greedy objective. This picks unit strip output power (when ``upsilon`` is
    given, else unit norm), a phase making the entry sum real positive, and a
    single global scale so the largest entry magnitude equals ``peak``.
    """
    from .quantization import strip_output_power

    q_hat = np.asarray(q_hat, dtype=complex)
    if upsilon is not None:
        power = strip_output_power(q_hat, upsilon)
    else:
        power = np.sum(np.abs(q_hat) ** 2, axis=-1)
    out = q_hat / np.sqrt(np.where(power > 0, power, 1.0))[..., None]
    total = np.sum(out, axis=-1)
    rot = np.where(np.abs(total) > 0, np.conj(total) / np.where(np.abs(total) > 0, np.abs(total), 1.0), 1.0)
    out = out * rot[..., None]
    return out * (peak / np.max(np.abs(out)))


def flat_objective(q, alpha, q_hat):
    """sum_m ||q - alpha_m q_hat_m||^2; bins on axis 0, elements on the last axis."""
    return np.sum(np.abs(q[None] - alpha[..., None] * q_hat) ** 2, axis=(0, -1))


@dataclass
class FlatProjection:
    values: np.ndarray   # (..., N_e) real weights in the feasible interval
    alpha: np.ndarray    # (M, ...)
    trace: np.ndarray    # (iters, ...) objective after every iteration


def project_flat(q_hat, bounds=DEFAULT_FLAT_BOUNDS, iters=10, alpha_mode="phase"):
    """Alternating fit of one real weight vector to all bins of ``q_hat``.

    ``q_hat`` has bins on axis 0 and elements on the last axis, e.g.
    (M, N_e) for one microstrip or (M, N_d, N_e) for the whole array.
    ``alpha_mode`` selects the scale-factor update, see :func:`update_alpha`.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    lo, hi = bounds
    q_hat = np.asarray(q_hat, dtype=complex)
    alpha = np.ones(q_hat.shape[:-1], dtype=complex)
    trace = []
    for _ in range(iters):
        # nearest point of a real interval to a complex number is the clamped real part
        values = np.clip(np.real(np.mean(alpha[..., None] * q_hat, axis=0)), lo, hi)
        alpha = update_alpha(values[None], q_hat, alpha_mode, alpha)
        trace.append(flat_objective(values, alpha, q_hat))
    return FlatProjection(values, alpha, np.array(trace))


def project_flat_weights(q_hat, bounds=DEFAULT_FLAT_BOUNDS, iters=10, alpha_mode="phase"):
    """:func:`project_flat` packaged as frequency-flat :class:`DmaWeights`."""
    proj = project_flat(q_hat, bounds, iters, alpha_mode)
    return flat_weights(proj.values, q_hat.shape[0], bounds=bounds), proj


# ---------------------------------------------------------------------------
# Lorentzian element fits


def _shape(x_res, damping, x):
    """Omega^2 / (Omega_R^2 - Omega^2 - j Omega chi) for rows of parameters."""
    return x[None, :] ** 2 / (x_res[:, None] ** 2 - x[None, :] ** 2 - 1j * x[None, :] * damping[:, None])


def _best_strength(shape, targets):
    num = np.real(np.sum(shape * np.conj(targets), axis=-1))
    den = np.sum(np.abs(shape) ** 2, axis=-1)
    return np.maximum(num, 0.0) / den


def oscillator_strength(damping, resonance, targets, omega):
    """Least-squares oscillator strength F >= 0 for fixed damping and resonance.

    ``targets`` holds the scaled unconstrained responses per bin on its last
    axis; leading axes broadcast against ``damping`` and ``resonance``.
    """
    omega = np.asarray(omega, dtype=float)
    damping = np.asarray(damping, dtype=float)[..., None]
    resonance = np.asarray(resonance, dtype=float)[..., None]
    denom = resonance ** 2 - omega ** 2 - 1j * omega * damping
    num = np.real(np.sum(omega ** 2 * np.conj(targets) / denom, axis=-1))
    den = np.sum(omega ** 4 / (np.abs(denom) ** 2), axis=-1)
    return np.maximum(num, 0.0) / den


def lorentzian_residual(params, targets, omega):
    """sum_m |q(omega_m) - target_m|^2, evaluated straight from the response formula."""
    from .frontend import lorentzian_response

    resp = lorentzian_response(params.strength[..., None], params.damping[..., None],
                               params.resonance[..., None], omega)
    return np.sum(np.abs(resp - targets) ** 2, axis=-1)


@dataclass
class LMResult:
    params: np.ndarray
    cost: np.ndarray
    iterations: np.ndarray
    history: list


def levenberg_marquardt(fun, p0, lower=None, max_iter=200, rtol=1e-8, lam0=1e-3,
                        fd_step=1e-7, keep_history=False, jac=None):
    """Batched Levenberg-Marquardt for small parameter vectors.

    ``fun(p, rows)`` maps parameters (len(rows), P) of batch rows ``rows`` to
    real residuals (len(rows), R), returning NaN where ``p`` is infeasible.
    Rows iterate independently; a row stops when an accepted step changes
    its cost by less than ``rtol`` (relative), when its cost or gradient
    reaches zero, or when the damping saturates. Rejected steps never move a row, so each
    row's cost is non-increasing.

    ``jac`` selects the Jacobian: ``None`` for central differences, a
    callable ``jac(p, rows)`` returning (len(rows), R, P), or ``"fun"`` when
    ``fun`` itself returns the pair ``(residual, jacobian)``.
    """
    p = np.array(p0, dtype=float, copy=True)
    if p.ndim == 1:
        p = p[:, None]
    B, P = p.shape
    lower = np.full(P, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    paired = isinstance(jac, str)
    if paired and jac != "fun":
        raise ValueError(f"unknown jacobian option {jac!r}")

    def residual(q, rows):
        if paired:
            return fun(q, rows)
        return fun(q, rows), None

    def jacobian(q, rows, r_q):
        if callable(jac):
            return jac(q, rows)
        J = np.empty(r_q.shape + (P,))
        for k in range(P):
            h = fd_step * np.maximum(np.abs(q[:, k]), 1.0)
            up = q.copy()
            dn = q.copy()
            up[:, k] += h
            dn[:, k] = np.maximum(dn[:, k] - h, lower[k] + 0.5 * h)
            J[:, :, k] = (fun(up, rows) - fun(dn, rows)) / (up[:, k] - dn[:, k])[:, None]
        return J

    everything = np.arange(B)
    r, J_all = residual(p, everything)
    cost = np.sum(r ** 2, axis=1)
    if not np.all(np.isfinite(cost)):
        raise ValueError("infeasible or non-finite starting point")
    lam = np.full(B, lam0)
    iters = np.zeros(B, dtype=int)
    history = [cost.copy()] if keep_history else []
    rows = np.flatnonzero(cost > 0)
    # working copies of the active rows only; finished rows are written back
    pa, ra = p[rows], r[rows]
    Ja = J_all[rows] if paired else None
    for _ in range(max_iter):
        if rows.size == 0:
            break
        J = Ja if paired else jacobian(pa, rows, ra)
        J = np.where(np.isfinite(J), J, 0.0)
        if P == 1:
            j1 = J[:, :, 0]
            jtj = np.sum(j1 * j1, axis=1)
            grad = np.sum(j1 * ra, axis=1)
            step = (-grad / (jtj + lam[rows] * np.maximum(jtj, 1e-30)))[:, None]
        else:
            jtj = np.einsum("brp,brq->bpq", J, J)
            grad = np.einsum("brp,br->bp", J, ra)
            diag = np.einsum("bpp->bp", jtj)
            system = jtj + (lam[rows, None] * np.maximum(diag, 1e-30))[:, :, None] * np.eye(P)
            step = -np.linalg.solve(system, grad[:, :, None])[:, :, 0]
        stationary = ~np.any(step != 0, axis=1)
        trial = pa + step
        feasible = np.all(trial > lower, axis=1)
        r_new, J_new = residual(np.where(feasible[:, None], trial, pa), rows)
        c_new = np.sum(r_new ** 2, axis=1)
        c_old = cost[rows]
        accept = feasible & np.isfinite(c_new) & (c_new < c_old)
        rel = np.where(accept, (c_old - c_new) / np.maximum(c_old, 1e-300), np.inf)
        pa = np.where(accept[:, None], trial, pa)
        ra = np.where(accept[:, None], r_new, ra)
        if paired:
            Ja = np.where(accept[:, None, None], J_new, Ja)
        cost[rows] = np.where(accept, c_new, c_old)
        lam[rows] = np.where(accept, np.maximum(lam[rows] / 3.0, 1e-12), lam[rows] * 4.0)
        iters[rows] += 1
        done = ((accept & (rel < rtol)) | (cost[rows] <= 0) | (~accept & (lam[rows] > 1e12))
                | (stationary & ~accept))
        if keep_history:
            p[rows] = pa
            history.append(cost.copy())
        if np.any(done):
            p[rows[done]] = pa[done]
            keep = ~done
            rows, pa, ra = rows[keep], pa[keep], ra[keep]
            if paired:
                Ja = Ja[keep]
    p[rows] = pa
    return LMResult(p, cost, iters, history)


def _fit_normalized(targets, x, x_start, qf=None, c_start=None, max_iter=200, rtol=1e-8,
                    keep_history=False, engine="compiled"):
    """Fit rows of targets over normalized frequencies ``x``.

    With ``qf`` (one quality factor per row) only the resonance is free and
    the damping follows as resonance / qf; otherwise resonance and damping
    are both free. The oscillator strength is always eliminated in closed form.
    ``engine="compiled"`` runs the fixed-quality-factor case through the
    numba kernel (unless a cost history is requested); ``"numpy"`` forces
    the batched reference solver.
    """
    targets = np.asarray(targets, dtype=complex)

    if qf is not None:
        qf = np.broadcast_to(np.asarray(qf, dtype=float), targets.shape[:1])
        if engine == "compiled" and not keep_history:
            from ._kernels import resonance_lm

            xr, cost, iters = resonance_lm(np.ascontiguousarray(targets), np.asarray(x, dtype=float),
                                           np.asarray(x_start, dtype=float).copy(),
                                           np.ascontiguousarray(qf), int(max_iter), float(rtol), 1e-3)
            return LMResult(xr[:, None], cost, iters, [])
        x2 = x ** 2

        def fun(p, rows):
            xr = p[:, :1]
            t = targets[rows]
            slope = 1j * x / qf[rows][:, None]
            with np.errstate(divide="ignore", invalid="ignore"):
                den = xr ** 2 - x2 - slope * xr
                shape = x2 / den
                dshape = -shape * (2 * xr - slope) / den
                num = np.real(np.sum(shape * np.conj(t), axis=1))
                nrm = np.sum(shape.real ** 2 + shape.imag ** 2, axis=1)
                dnum = np.real(np.sum(dshape * np.conj(t), axis=1))
                dnrm = 2 * np.real(np.sum(dshape * np.conj(shape), axis=1))
                strength = np.maximum(num, 0.0) / nrm
                dstrength = np.where(num > 0, (dnum * nrm - num * dnrm) / nrm ** 2, 0.0)
                res = strength[:, None] * shape - t
                d = dstrength[:, None] * shape + strength[:, None] * dshape
            out = np.concatenate([res.real, res.imag], axis=1)
            out[~(xr[:, 0] > 0)] = np.nan
            return out, np.concatenate([d.real, d.imag], axis=1)[:, :, None]

        p0 = np.asarray(x_start, dtype=float)[:, None]
        return levenberg_marquardt(fun, p0, lower=np.array([0.0]), max_iter=max_iter, rtol=rtol,
                                   keep_history=keep_history, jac="fun")

    def fun(p, rows):
        with np.errstate(divide="ignore", invalid="ignore"):
            shape = _shape(p[:, 0], p[:, 1], x)
            res = _best_strength(shape, targets[rows])[:, None] * shape - targets[rows]
        out = np.concatenate([res.real, res.imag], axis=1)
        out[~((p[:, 0] > 0) & (p[:, 1] > 0))] = np.nan
        return out

    p0 = np.stack([np.asarray(x_start, dtype=float), np.asarray(c_start, dtype=float)], axis=1)
    lower = np.array([0.0, 0.0])
    return levenberg_marquardt(fun, p0, lower=lower, max_iter=max_iter, rtol=rtol,
                               keep_history=keep_history)


@dataclass
class FitResult:
    """Outcome of one or many element fits.

    ``residual`` is recomputed from the returned parameters with the response
    formula, not taken from the solver.
    """

    params: LorentzianParams
    residual: np.ndarray
    start: np.ndarray = None
    iterations: np.ndarray = None
    history: list = None


def curve_fit_lorentzian(targets, omega, start_resonance, quality_factor=None,
                         start_damping=None, max_iter=200, rtol=1e-8, keep_history=False):
    """Damped Gauss-Newton fit of a Lorentzian element to per-bin targets.

    Parameters
    ----------
    targets : array_like
        Complex targets, shape (M,) or (B, M).
    omega : array_like
        Angular frequencies of the bins (rad/s), shape (M,).
    start_resonance : float or array_like
        Starting resonance (rad/s) per row.
    quality_factor : float or array_like, optional
        Fixed resonance / damping ratio. When omitted, damping is fitted too,
        starting from ``start_damping``.
    """
    targets = np.asarray(targets, dtype=complex)
    single = targets.ndim == 1
    targets = np.atleast_2d(targets)
    omega = np.asarray(omega, dtype=float)
    ref = float(np.mean(omega))
    x = omega / ref
    B = targets.shape[0]
    x0 = np.broadcast_to(np.asarray(start_resonance, dtype=float) / ref, (B,))
    if quality_factor is None:
        if start_damping is None:
            raise ValueError("start_damping is needed when the quality factor is free")
        c0 = np.broadcast_to(np.asarray(start_damping, dtype=float) / ref, (B,))
        if np.any(c0 <= 0) or np.any(x0 <= 0):
            raise ValueError("starting point must have positive resonance and damping")
        lm = _fit_normalized(targets, x, x0, c_start=c0, max_iter=max_iter, rtol=rtol,
                             keep_history=keep_history)
        xr, c = lm.params[:, 0], lm.params[:, 1]
    else:
        qf = np.broadcast_to(np.asarray(quality_factor, dtype=float), (B,))
        if np.any(x0 <= 0) or np.any(qf <= 0):
            raise ValueError("starting resonance and quality factor must be positive")
        lm = _fit_normalized(targets, x, x0, qf=qf, max_iter=max_iter, rtol=rtol,
                             keep_history=keep_history)
        xr = lm.params[:, 0]
        c = xr / qf
    resonance = xr * ref
    damping = c * ref
    strength = oscillator_strength(damping, resonance, targets, omega)
    params = LorentzianParams(strength, damping, resonance)
    residual = lorentzian_residual(params, targets, omega)
    if single:
        params = LorentzianParams(strength[0], damping[0], resonance[0])
        residual = residual[0]
    return FitResult(params, residual, iterations=lm.iterations, history=lm.history)


@dataclass
class LorentzianProjection:
    weights: DmaWeights
    params: LorentzianParams      # (N_d, N_e)
    alpha: np.ndarray             # (M, N_d)
    trace: np.ndarray             # (iters, N_d) objective after every outer iteration
    start: np.ndarray             # (N_d, N_e) index into START_IDS of the winning start
    quality: np.ndarray           # (N_d, N_e) winning quality factor


def lorentzian_objective(vectors, alpha, q_hat):
    """sum_{m,l} |q_{m,i,l} - alpha_{m,i} q_hat_{m,i,l}|^2 per microstrip."""
    return np.sum(np.abs(vectors - alpha[..., None] * q_hat) ** 2, axis=(0, -1))


def project_lorentzian(q_hat, grid, delta, quality_factors=DEFAULT_QUALITY_FACTORS, iters=10,
                       start_quality=30.0, max_iter=200, rtol=1e-8, alpha_mode="phase"):
    """Fit Lorentzian elements to unconstrained weights ``q_hat`` (M, N_d, N_e).

    Every outer iteration refits each element from three resonance starts
    (below the band by ``delta``, above it by ``delta``, and at the bin where
    the scaled target peaks), once per quality factor, and also from the
    previous solution; the candidate with least residual wins, the earlier
    start taking ties within ``rtol``. The per-bin
    scale factors are then updated in closed form.

    ``quality_factors=None`` frees the damping, started at
    resonance / ``start_quality``.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    q_hat = np.asarray(q_hat, dtype=complex)
    M, n_strips, n_elem = q_hat.shape
    omega = grid.omega
    ref = float(np.mean(omega))
    x = omega / ref
    lo, hi = grid.band_edges
    n_el = n_strips * n_elem
    qfs = None if quality_factors is None else np.asarray(quality_factors, dtype=float)

    alpha = np.ones((M, n_strips), dtype=complex)
    best_x = best_c = best_qf = best_start = None
    trace = []
    for _ in range(iters):
        targets = (alpha[..., None] * q_hat).reshape(M, n_el).T  # (n_el, M)
        peak = x[np.argmax(np.abs(targets), axis=1)]
        starts = [np.full(n_el, (lo - delta) / ref), np.full(n_el, (hi + delta) / ref), peak]
        start_ids = [0, 1, 2]
        rows_x, rows_c, rows_qf, rows_el, rows_sid = [], [], [], [], []
        for sid, xs in zip(start_ids, starts):
            if qfs is None:
                rows_x.append(xs)
                rows_c.append(xs / start_quality)
                rows_el.append(np.arange(n_el))
                rows_sid.append(np.full(n_el, sid))
            else:
                for qf in qfs:
                    rows_x.append(xs)
                    rows_qf.append(np.full(n_el, qf))
                    rows_el.append(np.arange(n_el))
                    rows_sid.append(np.full(n_el, sid))
        if best_x is not None:
            rows_x.append(best_x)
            rows_el.append(np.arange(n_el))
            rows_sid.append(np.full(n_el, 3))
            if qfs is None:
                rows_c.append(best_c)
            else:
                rows_qf.append(best_qf)
        el = np.concatenate(rows_el)
        x0 = np.concatenate(rows_x)
        if qfs is None:
            lm = _fit_normalized(targets[el], x, x0, c_start=np.concatenate(rows_c),
                                 max_iter=max_iter, rtol=rtol)
            fx, fc = lm.params[:, 0], lm.params[:, 1]
        else:
            qf_rows = np.concatenate(rows_qf)
            lm = _fit_normalized(targets[el], x, x0, qf=qf_rows, max_iter=max_iter, rtol=rtol)
            fx = lm.params[:, 0]
            fc = fx / qf_rows
        cost = lm.cost.reshape(-1, n_el)
        cols = np.arange(n_el)
        # starts reaching the same optimum tie to solver precision; prefer the
        # earliest, but never one costlier than the previous solution
        floor = cost.min(axis=0)
        win = np.argmax(cost <= floor * (1 + rtol) + 1e-300, axis=0)
        if best_x is not None:
            keep = cost[-1] < cost[win, cols]
            win = np.where(keep, cost.shape[0] - 1, win)
        best_x = fx.reshape(-1, n_el)[win, cols]
        best_c = fc.reshape(-1, n_el)[win, cols]
        best_start = np.concatenate(rows_sid).reshape(-1, n_el)[win, cols]
        if qfs is not None:
            best_qf = qf_rows.reshape(-1, n_el)[win, cols]
            best_c = best_x / best_qf
        strength = oscillator_strength(best_c, best_x, targets, x)
        params = LorentzianParams(strength.reshape(n_strips, n_elem),
                                  (best_c * ref).reshape(n_strips, n_elem),
                                  (best_x * ref).reshape(n_strips, n_elem))
        vectors = params.response(omega)  # (M, N_d, N_e)
        alpha = update_alpha(vectors, q_hat, alpha_mode, alpha)
        trace.append(lorentzian_objective(vectors, alpha, q_hat))

    quality = params.quality_factor if qfs is None else best_qf.reshape(n_strips, n_elem)
    weights = lorentzian_weights(params, grid, None if qfs is None else tuple(qfs))
    return LorentzianProjection(weights, params, alpha, np.array(trace),
                                best_start.reshape(n_strips, n_elem), quality)


def flat_lorentzian(values, grid, quality_factor=30.0, resonance_fraction=0.01):
    """Lorentzian elements whose response tracks flat amplitudes ``values``.

    Every element resonates far below the band, at ``resonance_fraction``
    times the carrier. There the response is F W^2 / (W_R^2 - W^2 - j W chi)
    ~ -F with a relative ripple of order (W_R / W)^2, so the array equals the
    flat configuration up to one common factor per subcarrier. The strength
    is set so the mean response magnitude equals the flat value.
    """
    values = np.asarray(values, dtype=float)
    if np.any(values < 0):
        raise ValueError("flat amplitudes must be nonnegative")
    if not 0 < resonance_fraction < 1:
        raise ValueError("resonance_fraction must lie in (0, 1)")
    resonance = resonance_fraction * 2 * np.pi * grid.carrier
    damping = resonance / quality_factor
    omega = grid.omega
    shape = omega ** 2 / (resonance ** 2 - omega ** 2 - 1j * omega * damping)
    strength = values / np.mean(np.abs(shape))
    return LorentzianParams(strength, np.full(values.shape, damping), np.full(values.shape, resonance))
