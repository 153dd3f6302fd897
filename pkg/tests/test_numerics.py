import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmarx.numerics import (NotPositiveDefiniteError, block_diag, cholesky, crandn, dft_matrix,
                            fix_phase, hermitian_inverse, hermitian_solve, kron, make_rng,
                            max_generalized_eigvec, psd_sqrt, rayleigh_quotient)

from conftest import random_hpd


def test_dft_small_cases():
    assert np.allclose(dft_matrix(1), [[1.0]])
    assert np.allclose(dft_matrix(2), np.array([[1, 1], [1, -1]]) / np.sqrt(2))


@pytest.mark.parametrize("M", [1, 2, 8, 16, 64])
def test_dft_unitary(M):
    F = dft_matrix(M)
    assert np.linalg.norm(F @ F.conj().T - np.eye(M)) <= 1e-10


def test_dft_matches_fft():
    x = crandn(np.random.default_rng(0), 16)
    assert np.allclose(dft_matrix(16) @ x, np.fft.fft(x, norm="ortho"))


def test_dft_rejects_zero():
    with pytest.raises(ValueError):
        dft_matrix(0)


def test_kron_identities(rng):
    assert np.array_equal(kron(np.eye(2), np.eye(3)), np.eye(6))
    B = crandn(rng, (3, 2))
    assert np.allclose(kron([[2.0]], B), 2 * B)
    A, B, C, D = (crandn(rng, (2, 2)) for _ in range(4))
    assert np.allclose(kron(A, B) @ kron(C, D), kron(A @ C, B @ D))


def test_block_diag(rng):
    blk = crandn(rng, (2, 3))
    assert np.array_equal(block_diag([blk]), blk)
    assert np.array_equal(block_diag([[[1.0]], [[2.0]]]), np.diag([1.0, 2.0]))
    blocks = [crandn(rng, (n, n)) for n in (1, 3, 2)]
    out = block_diag(blocks)
    assert np.isclose(np.trace(out), sum(np.trace(b) for b in blocks))
    # off-block entries are exactly zero
    mask = np.ones(out.shape, dtype=bool)
    mask[0, 0] = False
    mask[1:4, 1:4] = False
    mask[4:, 4:] = False
    assert np.all(out[mask] == 0)


def test_block_diag_needs_blocks():
    with pytest.raises(ValueError):
        block_diag([])


def test_hermitian_solve_trivial(rng):
    B = crandn(rng, (4, 3))
    assert np.allclose(hermitian_solve(np.eye(4), B), B)
    assert np.allclose(hermitian_solve(2 * np.eye(3), np.eye(3)), 0.5 * np.eye(3))


def test_hermitian_solve_against_explicit_inverse(rng):
    A = random_hpd(rng, 8)
    B = crandn(rng, (8, 5))
    X = hermitian_solve(A, B)
    assert np.linalg.norm(X - np.linalg.inv(A) @ B) <= 1e-9
    assert np.linalg.norm(A @ X - B) / np.linalg.norm(B) <= 1e-10


def test_hermitian_solve_batched_and_vector(rng):
    A = random_hpd(rng, 5, batch=(4,))
    b = crandn(rng, (4, 5))
    x = hermitian_solve(A, b)
    for k in range(4):
        assert np.allclose(A[k] @ x[k], b[k])


def test_hermitian_solve_rejects_indefinite():
    with pytest.raises(NotPositiveDefiniteError):
        hermitian_solve(np.diag([1.0, -1.0]), np.eye(2))
    # a pivot below 1e-12 trace / n counts as singular
    with pytest.raises(NotPositiveDefiniteError):
        cholesky(np.diag([1.0, 1e-15]))


def test_hermitian_inverse(rng):
    A = random_hpd(rng, 6)
    assert np.allclose(hermitian_inverse(A) @ A, np.eye(6))


def test_generalized_eig_diag():
    v, lam = max_generalized_eigvec(np.diag([1.0, 3.0]), np.eye(2))
    assert np.isclose(lam, 3.0)
    assert np.allclose(v, [0, 1])


def test_generalized_eig_scaled_identity():
    v, lam = max_generalized_eigvec(np.eye(3), 2 * np.eye(3))
    assert np.isclose(lam, 0.5)
    assert np.isclose(np.linalg.norm(v), 1.0)


def test_generalized_eig_equation_residual(rng):
    a = crandn(rng, (6, 3))
    A = a @ a.conj().T
    B = random_hpd(rng, 6)
    v, lam = max_generalized_eigvec(A, B)
    assert np.linalg.norm(A @ v - lam * B @ v) <= 1e-8 * np.linalg.norm(A @ v)
    assert abs(rayleigh_quotient(A, B, v) - lam) <= 1e-8 * lam
    # scipy's generalized solver as an independent reference for the top value
    import scipy.linalg
    assert np.isclose(lam, scipy.linalg.eigh(A, B, eigvals_only=True)[-1], rtol=1e-10)


def _sphere_points(center, width, side):
    """Grid over (a, b, p1, p2) -> (cos a, sin a cos b e^{j p1}, sin a sin b e^{j p2})."""
    axes = [np.linspace(c - w, c + w, side) for c, w in zip(center, width)]
    a, b, p1, p2 = (g.ravel() for g in np.meshgrid(*axes, indexing="ij"))
    pts = np.stack([np.cos(a), np.sin(a) * np.cos(b) * np.exp(1j * p1),
                    np.sin(a) * np.sin(b) * np.exp(1j * p2)], axis=-1)
    return pts, np.stack([a, b, p1, p2], axis=-1)


def test_generalized_eig_against_sphere_grid(rng):
    a = crandn(rng, (3, 3))
    A = a @ a.conj().T
    B = random_hpd(rng, 3)
    _, lam = max_generalized_eigvec(A, B)
    side = 18  # 18^4 ~ 1e5 points per level
    center = np.array([np.pi / 4, np.pi / 4, np.pi, np.pi])
    width = np.array([np.pi / 4, np.pi / 4, np.pi, np.pi])
    for _ in range(3):
        pts, params = _sphere_points(center, width, side)
        vals = rayleigh_quotient(A, B, pts)
        center = params[np.argmax(vals)]
        width = width * 4 / side
    best = np.max(vals)
    assert best <= lam * (1 + 1e-12)
    assert best >= lam * (1 - 1e-3)


def test_generalized_eig_rejects_indefinite_b():
    with pytest.raises(NotPositiveDefiniteError):
        max_generalized_eigvec(np.eye(2), np.diag([1.0, -2.0]))


def test_fix_phase_makes_largest_entry_real_positive(rng):
    v = fix_phase(crandn(rng, (5, 4)))
    idx = np.argmax(np.abs(v), axis=-1)
    pivots = v[np.arange(5), idx]
    assert np.allclose(pivots.imag, 0) and np.all(pivots.real > 0)


def test_psd_sqrt_clips_negative_eigenvalues(rng):
    A = random_hpd(rng, 4)
    R = psd_sqrt(A)
    assert np.allclose(R @ R, A)
    R = psd_sqrt(np.diag([4.0, -1e-14]))
    assert np.allclose(R, np.diag([2.0, 0.0]))


def test_rng_streams_reproducible_and_distinct():
    a = make_rng(3, 1).standard_normal(5)
    assert np.array_equal(a, make_rng(3, 1).standard_normal(5))
    assert not np.array_equal(a, make_rng(3, 2).standard_normal(5))
    assert not np.array_equal(make_rng(3, 1, 0).standard_normal(5), make_rng(3, 1, 1).standard_normal(5))


def test_crandn_unit_variance():
    z = crandn(make_rng(0), 200000)
    assert abs(np.mean(np.abs(z) ** 2) - 1) < 0.02
    assert abs(np.mean(z.real ** 2) - np.mean(z.imag ** 2)) < 0.02


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 6), seed=st.integers(0, 10 ** 6))
def test_solve_residual_property(n, seed):
    r = np.random.default_rng(seed)
    A = random_hpd(r, n)
    B = crandn(r, (n, 2))
    X = hermitian_solve(A, B)
    assert np.linalg.norm(A @ X - B) <= 1e-10 * np.linalg.norm(B) * np.linalg.cond(A)
