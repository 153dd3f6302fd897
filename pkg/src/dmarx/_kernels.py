"""Compiled per-row Levenberg-Marquardt for the fixed-quality-factor Lorentzian fit.

Mirrors :func:`dmarx.fitting.levenberg_marquardt` with ``P = 1`` step for
step (same damping schedule and stopping rules); the batched numpy version
stays the reference and the tests compare the two.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _eval(t, x, xr, qf):
    """Residual cost, J^T J and J^T r at resonance ``xr`` (normalized units)."""
    M = x.shape[0]
    shape = np.empty(M, dtype=np.complex128)
    dshape = np.empty(M, dtype=np.complex128)
    num = 0.0
    nrm = 0.0
    dnum = 0.0
    dnrm = 0.0
    for m in range(M):
        slope = 1j * x[m] / qf
        den = xr * xr - x[m] * x[m] - slope * xr
        s = x[m] * x[m] / den
        ds = -s * (2.0 * xr - slope) / den
        shape[m] = s
        dshape[m] = ds
        num += (s * np.conj(t[m])).real
        nrm += s.real * s.real + s.imag * s.imag
        dnum += (ds * np.conj(t[m])).real
        dnrm += 2.0 * (ds * np.conj(s)).real
    strength = max(num, 0.0) / nrm
    dstrength = (dnum * nrm - num * dnrm) / (nrm * nrm) if num > 0 else 0.0
    cost = 0.0
    jtj = 0.0
    grad = 0.0
    for m in range(M):
        r = strength * shape[m] - t[m]
        d = dstrength * shape[m] + strength * dshape[m]
        if not (np.isfinite(d.real) and np.isfinite(d.imag)):
            d = 0.0 + 0.0j
        cost += r.real * r.real + r.imag * r.imag
        jtj += d.real * d.real + d.imag * d.imag
        grad += d.real * r.real + d.imag * r.imag
    return cost, jtj, grad


@njit(cache=True)
def resonance_lm(targets, x, x0, qf, max_iter, rtol, lam0):
    B = targets.shape[0]
    params = x0.copy()
    costs = np.empty(B)
    iters = np.zeros(B, dtype=np.int64)
    for b in range(B):
        t = targets[b]
        p = params[b]
        cost, jtj, grad = _eval(t, x, p, qf[b])
        lam = lam0
        for _ in range(max_iter):
            if cost <= 0:
                break
            step = -grad / (jtj + lam * max(jtj, 1e-30))
            trial = p + step
            accept = False
            c_new = cost
            if trial > 0:
                c_new, j_new, g_new = _eval(t, x, trial, qf[b])
                accept = np.isfinite(c_new) and c_new < cost
            iters[b] += 1
            if accept:
                rel = (cost - c_new) / max(cost, 1e-300)
                p, cost, jtj, grad = trial, c_new, j_new, g_new
                lam = max(lam / 3.0, 1e-12)
                if rel < rtol or cost <= 0:
                    break
            else:
                lam *= 4.0
                if lam > 1e12 or step == 0:
                    break
        params[b] = p
        costs[b] = cost
    return params, costs, iters
