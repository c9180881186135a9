import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agzo_lab.errors import ConfigError
from agzo_lab.subspace import DegenerateSubspace, subspace_extract
from agzo_lab.tensor import LEDGER, SeedKey, frob, gauss_matrix, qr_orthonormal, svd_full


def test_rank_one_activation():
    H = np.outer([1.0, 0.0], [1.0, 1.0, 1.0])
    basis = subspace_extract(H, 1, 3, SeedKey(1))
    np.testing.assert_allclose(basis.A[:, 0], [1.0, 0.0], atol=1e-15)


def test_power_iteration_on_diagonal():
    basis = subspace_extract(np.diag([3.0, 1.0]), 1, 3, SeedKey(2))
    assert abs(basis.A[0, 0]) >= 1 - 1e-6


def _captured_fraction(H, A, r):
    s = svd_full(H)[1]
    return frob(A.T @ H) ** 2 / np.sum(s[:r] ** 2)


@pytest.mark.xfail(strict=True, reason="flat Gaussian spectrum: three power steps capture about 92%, see decisions log")
def test_captured_energy_random():
    H = gauss_matrix(SeedKey(3), 64, 128)
    A = subspace_extract(H, 8, 3, SeedKey(4)).A
    assert _captured_fraction(H, A, 8) >= 0.95


def test_matches_reference_power_iteration():
    H = gauss_matrix(SeedKey(3), 64, 128)
    omega = gauss_matrix(SeedKey(4), 128, 8)
    Y = H @ omega
    for _ in range(3):
        Q = np.linalg.qr(Y)[0]
        Y = H @ (H.T @ Q)
    Q = np.linalg.qr(Y)[0]
    A = subspace_extract(H, 8, 3, SeedKey(4)).A
    # same subspace as an independent implementation fed the same test matrix
    assert frob(A @ A.T - Q @ Q.T) <= 1e-10
    assert 0.88 <= _captured_fraction(H, A, 8) < 0.95


def test_captured_energy_decaying_spectrum():
    U = qr_orthonormal(gauss_matrix(SeedKey(5), 64, 64))[0]
    V = qr_orthonormal(gauss_matrix(SeedKey(6), 128, 64))[0]
    H = (U * 0.8 ** np.arange(64)) @ V.T
    A = subspace_extract(H, 8, 3, SeedKey(7)).A
    assert _captured_fraction(H, A, 8) >= 0.95


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 12), st.integers(1, 6), st.integers(0, 4), st.integers(0, 2**32))
def test_orthonormal_and_contained(d_in, m, rank, r, K, seed):
    rank = min(rank, d_in, m)
    H = gauss_matrix(SeedKey(seed), d_in, rank) @ gauss_matrix(SeedKey(seed, 1), rank, m)
    basis = subspace_extract(H, r, K, SeedKey(seed, 2))
    A = basis.A
    assert A.shape[0] == d_in
    assert 1 <= basis.rank <= min(r, d_in, m)
    assert np.max(np.abs(A.T @ A - np.eye(basis.rank))) <= 1e-8
    U, s, _ = svd_full(H)
    U = U[:, : int(np.sum(s > 1e-10 * s[0]))]
    assert frob(A - U @ (U.T @ A)) <= 1e-6
    assert basis.reduced == (basis.rank < r)


def test_rank_clamping_reports_reduced_width():
    H = np.outer([1.0, 2.0, 0.0, 0.0], [1.0, -1.0, 0.5])
    basis = subspace_extract(H, 3, 2, SeedKey(5))
    assert basis.rank == 1 and basis.reduced


def test_deterministic():
    H = gauss_matrix(SeedKey(6), 10, 20)
    a = subspace_extract(H, 3, 3, SeedKey(7)).A
    b = subspace_extract(H, 3, 3, SeedKey(7)).A
    assert a.tobytes() == b.tobytes()


def test_zero_activation_signals_degenerate():
    with pytest.raises(DegenerateSubspace):
        subspace_extract(np.zeros((4, 3)), 2, 3, SeedKey(8))


def test_bad_arguments():
    with pytest.raises(ConfigError):
        subspace_extract(np.eye(2), 0, 3, SeedKey(1))
    with pytest.raises(ConfigError):
        subspace_extract(np.eye(2), 1, -1, SeedKey(1))


def test_no_ledger_leak():
    live = LEDGER.snapshot()[0]
    subspace_extract(gauss_matrix(SeedKey(9), 8, 5), 3, 3, SeedKey(10))
    assert LEDGER.snapshot()[0] == live


def test_capture_monotone_in_power_steps():
    wins = 0
    trials = 1000
    for t in range(trials):
        d_in, m, r = 8, 12, 2
        U = qr_orthonormal(gauss_matrix(SeedKey(t, 0), d_in, d_in))[0]
        V = qr_orthonormal(gauss_matrix(SeedKey(t, 1), m, d_in))[0]
        s = np.sort(np.abs(gauss_stream_slice(t)))[::-1] + np.linspace(1.0, 0.0, d_in)
        H = (U * s) @ V.T
        e = [frob(subspace_extract(H, r, K, SeedKey(t, 2)).A.T @ H) ** 2 for K in range(4)]
        wins += all(b >= a - 1e-12 * e[-1] for a, b in zip(e, e[1:]))
    assert wins >= 0.99 * trials


def gauss_stream_slice(t):
    return gauss_matrix(SeedKey(t, 3), 1, 8)[0]
