"""Activation-informed bases via randomized power iteration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, LabError, RankError
from .tensor import LEDGER, SeedKey, frob, gauss_matrix, qr_orthonormal

ZERO_ACTIVATION_TOL = 1e-12


class DegenerateSubspace(LabError):
    """The activation matrix carries no usable direction (numerically zero)."""


@dataclass
class ActivationBasis:
    """Orthonormal ``d_in x r'`` basis; ``reduced`` is set when ``r' < requested``."""

    A: np.ndarray
    requested: int
    layer_index: int = 0
    step_index: int = 0

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def reduced(self) -> bool:
        return self.rank < self.requested

    @property
    def nbytes(self) -> int:
        return self.A.size * 8


def _power_iterate(H: np.ndarray, omega: np.ndarray, K: int) -> np.ndarray:
    Y = LEDGER.track(H @ omega)
    for _ in range(K):
        try:
            Q, R = qr_orthonormal(Y)
        finally:
            LEDGER.release(Y)
        LEDGER.track(Q)
        Z = LEDGER.track(H.T @ Q)
        LEDGER.release(Q)
        Y = LEDGER.track(H @ Z)
        LEDGER.release(Z)
    try:
        Q, R = qr_orthonormal(Y)
    finally:
        LEDGER.release(Y)
    return Q


def subspace_extract(
    H: np.ndarray,
    r: int,
    K: int,
    key: SeedKey,
    layer_index: int = 0,
    step_index: int = 0,
) -> ActivationBasis:
    """Approximate the top-``r`` left singular subspace of ``H`` (``d_in x m``).

    Samples a Gaussian test matrix ``Omega`` (``m x r``) from ``key``, forms
    ``Y = H Omega`` and runs ``K`` rounds of ``Q = qr(Y); Y = H (H^T Q)``
    before a final orthonormalization. The width is clamped to
    ``min(r, d_in, m)`` and further to the numerical rank reported by QR, in
    which case the leading columns of the same ``Omega`` are reused.

    Raises :class:`DegenerateSubspace` when ``||H||_F`` is below 1e-12.
    """
    if r < 1:
        raise ConfigError(f"rank must be at least 1, got {r}")
    if K < 0:
        raise ConfigError(f"power_steps must be non-negative, got {K}")
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] < 1:
        raise DimensionError(f"activation matrix must be d_in x m with m >= 1, got {H.shape}")
    if frob(H) < ZERO_ACTIVATION_TOL:
        raise DegenerateSubspace(f"activation matrix of layer {layer_index} is numerically zero")
    d_in, m = H.shape
    width = min(r, d_in, m)
    omega = LEDGER.track(gauss_matrix(key, m, width))
    try:
        while True:
            try:
                A = _power_iterate(H, omega[:, :width], K)
                break
            except RankError as err:
                if err.column == 0:
                    raise DegenerateSubspace(
                        f"activation matrix of layer {layer_index} has no usable direction"
                    ) from err
                width = err.column
    finally:
        LEDGER.release(omega)
    return ActivationBasis(A, requested=r, layer_index=layer_index, step_index=step_index)
