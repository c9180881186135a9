import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agzo_lab.errors import ConfigError, DimensionError
from agzo_lab.models import ModelSpec, init_params, params_from_weights
from agzo_lab.perturb import (
    DENSE,
    LOW_RANK,
    PerturbationRecord,
    apply_perturbation,
    regenerate,
    restore_and_update,
    sample_factored,
    sample_perturbation,
)
from agzo_lab.subspace import ActivationBasis
from agzo_lab.tensor import LEDGER, SeedKey, frob, gauss_matrix, qr_orthonormal, svd_full


def basis_of(A):
    A = np.asarray(A, dtype=float)
    return ActivationBasis(A, requested=A.shape[1])


def random_basis(d_in, r, seed):
    return basis_of(qr_orthonormal(gauss_matrix(SeedKey(seed, 9), d_in, r))[0])


def ulps_off(new, old, perturbed):
    scale = np.spacing(np.maximum(np.abs(old), np.abs(perturbed)))
    return np.max(np.abs(new - old) / scale)


def test_low_rank_structure():
    rec = sample_perturbation((2, 2), basis_of([[1.0], [0.0]]), SeedKey(1))
    D = regenerate(rec)
    R = gauss_matrix(SeedKey(1), 2, 1)
    assert rec.kind == LOW_RANK
    np.testing.assert_array_equal(D[:, 1], [0.0, 0.0])
    np.testing.assert_array_equal(D[:, 0], R[:, 0])


def test_nonlinear_layer_is_dense():
    rec = sample_perturbation((3, 1), None, SeedKey(2), linear=False)
    assert rec.kind == DENSE
    assert regenerate(rec).shape == (3, 1)


def test_basis_too_wide():
    with pytest.raises(DimensionError):
        sample_perturbation((1, 3), random_basis(3, 2, 0), SeedKey(3))
    with pytest.raises(DimensionError):
        sample_perturbation((2, 4), random_basis(3, 1, 0), SeedKey(3))


def test_low_rank_mean_is_zero():
    basis = random_basis(5, 2, 1)
    n = 100_000
    acc = np.zeros((3, 5))
    for t in range(n):
        acc += regenerate(sample_perturbation((3, 5), basis, SeedKey(4, t)))
    # entries of R A^T have variance ||A_j||^2 <= 1
    assert np.max(np.abs(acc / n)) <= 4 / np.sqrt(n)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**64 - 1))
def test_regenerate_bit_stable(base):
    recs = [
        sample_perturbation((4, 6), random_basis(6, 3, 2), SeedKey(base, 1)),
        sample_perturbation((4, 6), None, SeedKey(base, 2)),
        sample_factored((4, 6), 2, SeedKey(base, 3)),
    ]
    for rec in recs:
        assert regenerate(rec).tobytes() == regenerate(rec).tobytes()
        moved = rec.with_key(SeedKey(base, rec.key.stream + 7))
        assert np.any(regenerate(moved) != regenerate(rec))


def test_regenerate_thousand_records():
    basis = random_basis(8, 2, 3)
    recs = [sample_perturbation((6, 8), basis if i % 2 else None, SeedKey(11, i)) for i in range(1000)]
    first = [regenerate(r).tobytes() for r in recs]
    assert first == [regenerate(r).tobytes() for r in recs]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(1, 10), st.integers(0, 2**32))
def test_rank_and_row_space(d_out, d_in, r, seed):
    r = min(r, d_out, d_in)
    basis = random_basis(d_in, r, seed)
    D = regenerate(sample_perturbation((d_out, d_in), basis, SeedKey(seed)))
    s = svd_full(D)[1]
    if r < len(s):
        assert s[r] <= 1e-10 * s[0]
    A = basis.A
    assert frob(D - D @ A @ A.T) <= 1e-10 * frob(D)


def test_factored_rank():
    D = regenerate(sample_factored((6, 5), 2, SeedKey(5)))
    s = svd_full(D)[1]
    assert s[2] <= 1e-10 * s[0]


def one_param(w=1.0):
    return params_from_weights(ModelSpec((1, 1)), [[[w]]])


def test_apply_then_restore_hand_values():
    params = one_param(1.0)
    rec = sample_perturbation((1, 1), None, SeedKey(6), linear=False)
    d = regenerate(rec)[0, 0]
    apply_perturbation(params, [rec], 0.1)
    assert params.layers[0].weight[0, 0] == 1.0 + 0.1 * d
    restore_and_update(params, [rec], 0.1, 0.01, 2.0)
    expected = (1.0 + 0.1 * d) - 0.1 * d - 0.01 * 2.0 * d
    assert params.layers[0].weight[0, 0] == expected


def test_scaled_unit_direction():
    # Delta = 1 reproduces the worked example: 1.1 after apply, 0.98 after the update
    params = one_param(1.0)
    A = np.array([[1.0]])
    key = next(SeedKey(7, i) for i in range(10_000) if gauss_matrix(SeedKey(7, i), 1, 1)[0, 0] > 0)
    rec = sample_perturbation((1, 1), basis_of(A), key)
    d = regenerate(rec)[0, 0]
    mu, eta, g = 0.1 / d, 0.01 / d, 2.0
    apply_perturbation(params, [rec], mu)
    assert params.layers[0].weight[0, 0] == pytest.approx(1.1, abs=1e-15)
    restore_and_update(params, [rec], mu, eta, g)
    assert params.layers[0].weight[0, 0] == pytest.approx(0.98, abs=1e-15)


def test_mu_must_be_positive():
    params = one_param()
    rec = sample_perturbation((1, 1), None, SeedKey(1), linear=False)
    with pytest.raises(ConfigError):
        apply_perturbation(params, [rec], 0.0)


def test_shape_mismatch_before_mutation():
    params = init_params(ModelSpec((3, 4, 2)), SeedKey(0))
    before = [w.copy() for w in params.weights()]
    recs = [sample_perturbation((4, 3), None, SeedKey(1)), sample_perturbation((3, 4), None, SeedKey(2))]
    with pytest.raises(DimensionError):
        apply_perturbation(params, recs, 0.1)
    assert all(np.array_equal(a, b) for a, b in zip(before, params.weights()))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from([1e-1, 1e-3, 1e-5]), st.floats(-5, 5))
def test_restore_drift_within_four_ulps(seed, mu, g):
    params = init_params(ModelSpec((6, 5, 3), bias=True), SeedKey(seed))
    basis = random_basis(6, 2, seed)
    recs = [
        sample_perturbation((5, 6), basis, SeedKey(seed, 1)),
        sample_perturbation((5, 1), None, SeedKey(seed, 2), linear=False),
        sample_perturbation((3, 5), None, SeedKey(seed, 3)),
        sample_perturbation((3, 1), None, SeedKey(seed, 4), linear=False),
    ]
    before = [w.copy() for w in params.weights()]
    apply_perturbation(params, recs, mu)
    perturbed = [w.copy() for w in params.weights()]
    restore_and_update(params, recs, mu, 1.0, 0.0 * g)
    for new, old, pert in zip(params.weights(), before, perturbed):
        assert ulps_off(new, old, pert) <= 4


def test_exact_restore_with_checkpoint():
    params = init_params(ModelSpec((4, 3)), SeedKey(1))
    before = params.weights()[0].copy()
    rec = sample_perturbation((3, 4), None, SeedKey(2))
    apply_perturbation(params, [rec], 0.37)
    restore_and_update(params, [rec], 0.37, 0.5, 0.0, checkpoint=[before])
    np.testing.assert_array_equal(params.weights()[0], before)


def test_apply_peak_is_one_layer_buffer():
    params = init_params(ModelSpec((8, 16, 4)), SeedKey(3))
    recs = [sample_perturbation(l.shape, None, SeedKey(4, i)) for i, l in enumerate(params.layers)]
    params.track()
    try:
        LEDGER.reset_peak()
        apply_perturbation(params, recs, 0.1)
        live, peak = LEDGER.snapshot()
        assert live == params.nbytes
        assert peak <= params.nbytes + max(l.weight.size for l in params.layers) * 8
    finally:
        params.release()
