"""Dense complex linear algebra helpers shared by the rest of the package.

Everything here accepts stacked inputs of shape ``(..., n, n)`` where that
makes sense, so per-subcarrier problems can be solved in one call.
"""

import numpy as np
import scipy.linalg

HERMITIAN_TOL = 1e-10
PIVOT_TOL = 1e-12


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a matrix expected to be Hermitian positive definite is not."""


def dft_matrix(M):
    """Unitary M-point DFT matrix with entries exp(-j 2 pi k n / M) / sqrt(M)."""
    if M < 1:
        raise ValueError(f"DFT size must be positive, got {M}")
    k = np.arange(M)
    return np.exp(-2j * np.pi * np.outer(k, k) / M) / np.sqrt(M)


def kron(a, b):
    return np.kron(np.asarray(a), np.asarray(b))


def block_diag(blocks):
    """Block-diagonal assembly; row vectors are accepted as 1 x n blocks."""
    blocks = [np.atleast_2d(b) for b in blocks]
    if not blocks:
        raise ValueError("block_diag needs at least one block")
    return scipy.linalg.block_diag(*blocks)


def hermitian_part(a):
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def assert_hermitian(a, tol=HERMITIAN_TOL, name="matrix"):
    """Raise ``ValueError`` unless ``a`` is Hermitian to relative tolerance ``tol``."""
    a = np.asarray(a)
    scale = max(np.max(np.abs(a)), 1.0)
    err = np.max(np.abs(a - np.conj(np.swapaxes(a, -1, -2))))
    if err > tol * scale:
        raise ValueError(f"{name} is not Hermitian (max asymmetry {err:.3e})")


def cholesky(a):
    """Lower Cholesky factor with an explicit pivot check.

    A pivot below ``1e-12 * trace(a) / n`` is treated as loss of definiteness.
    """
    a = np.asarray(a)
    n = a.shape[-1]
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(str(exc)) from None
    pivots = np.real(np.diagonal(chol, axis1=-2, axis2=-1)) ** 2
    floor = PIVOT_TOL * np.real(np.trace(a, axis1=-2, axis2=-1)) / n
    if np.any(pivots < floor[..., None]) or not np.all(np.isfinite(chol)):
        raise NotPositiveDefiniteError("matrix is not numerically positive definite")
    return chol


def hermitian_solve(a, b):
    """Solve ``a x = b`` for Hermitian positive definite ``a`` (stackable)."""
    chol = cholesky(a)
    b = np.asarray(b)
    vec = b.ndim == a.ndim - 1
    if vec:
        b = b[..., None]
    batch = np.broadcast_shapes(chol.shape[:-2], b.shape[:-2])
    chol = np.broadcast_to(chol, batch + chol.shape[-2:]).reshape((-1,) + chol.shape[-2:])
    rhs = np.broadcast_to(b, batch + b.shape[-2:]).reshape((-1,) + b.shape[-2:])
    dtype = np.result_type(chol, rhs)
    x = np.empty(rhs.shape, dtype=dtype)
    # a python loop over LAPACK triangular solves beats batched LU here
    for k in range(chol.shape[0]):
        x[k] = scipy.linalg.cho_solve((chol[k], True), rhs[k], check_finite=False)
    x = x.reshape(batch + b.shape[-2:])
    return x[..., 0] if vec else x


def _solve_lower(tri, b, lower=True):
    """Triangular solve, looping over any leading batch axes."""
    batch = np.broadcast_shapes(tri.shape[:-2], b.shape[:-2])
    t = np.broadcast_to(tri, batch + tri.shape[-2:]).reshape((-1,) + tri.shape[-2:])
    r = np.broadcast_to(b, batch + b.shape[-2:]).reshape((-1,) + b.shape[-2:])
    out = np.empty(r.shape, dtype=np.result_type(t, r))
    for k in range(t.shape[0]):
        out[k] = scipy.linalg.solve_triangular(t[k], r[k], lower=lower, check_finite=False)
    return out.reshape(batch + b.shape[-2:])


def hermitian_inverse(a):
    n = a.shape[-1]
    return hermitian_part(hermitian_solve(a, np.broadcast_to(np.eye(n), a.shape)))


def fix_phase(v):
    """Rotate vectors (last axis) so the largest-magnitude entry is real positive."""
    v = np.asarray(v)
    idx = np.argmax(np.abs(v), axis=-1)
    pivot = np.take_along_axis(v, idx[..., None], axis=-1)
    mag = np.abs(pivot)
    rot = np.where(mag > 0, np.conj(pivot) / np.where(mag > 0, mag, 1.0), 1.0)
    return v * rot


def max_generalized_eigvec(a, b):
    """Top generalized eigenpair of the Hermitian pencil (a, b).

    Reduces ``a v = lam b v`` with ``b = L L^H`` to the standard problem for
    ``L^-1 a L^-H``. Works on stacks of matrices.

    Returns
    -------
    v : ndarray
        Unit-norm eigenvector(s), phase fixed by :func:`fix_phase`.
    lam : ndarray or float
        The largest generalized eigenvalue(s).
    """
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if a.shape != b.shape or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"pencil shapes differ or are not square: {a.shape}, {b.shape}")
    chol = cholesky(hermitian_part(b))
    # L^-1 a L^-H
    left = _solve_lower(chol, a)
    reduced = np.conj(np.swapaxes(_solve_lower(chol, np.conj(np.swapaxes(left, -1, -2))), -1, -2))
    vals, vecs = np.linalg.eigh(hermitian_part(reduced))
    lam = vals[..., -1]
    y = vecs[..., :, -1:]
    v = _solve_lower(np.conj(np.swapaxes(chol, -1, -2)), y, lower=False)[..., 0]
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    return fix_phase(v), lam


def rayleigh_quotient(a, b, v):
    """v^H a v / v^H b v for stacked vectors."""
    num = np.einsum("...i,...ij,...j->...", np.conj(v), a, v)
    den = np.einsum("...i,...ij,...j->...", np.conj(v), b, v)
    return np.real(num) / np.real(den)


def psd_sqrt(a):
    """Hermitian square root with eigenvalues clipped at zero."""
    vals, vecs = np.linalg.eigh(hermitian_part(np.asarray(a)))
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)[..., None, :]) @ np.conj(np.swapaxes(vecs, -1, -2))


def make_rng(seed, stream=0, *substreams):
    """Independent generator for ``(seed, stream, ...)``; same key, same draws."""
    key = [int(seed), int(stream)] + [int(s) for s in substreams]
    return np.random.default_rng(np.random.SeedSequence(key))


def crandn(rng, shape):
    """Standard proper complex Gaussian samples (unit variance)."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
