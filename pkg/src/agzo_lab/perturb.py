"""Seeded perturbations: sampling, regeneration, in-place apply and fused restore/update.

A :class:`PerturbationRecord` holds only a seed key, a kind and (for
activation-guided layers) the basis. The perturbation matrix itself is
rebuilt on demand, one layer at a time, and dropped right after use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .models import LINEAR, ModelParams
from .subspace import ActivationBasis
from .tensor import LEDGER, SeedKey, gauss_matrix, gauss_stream

LOW_RANK = "low-rank"
DENSE = "dense"
FACTORED = "factored"  # LOZO's U V^T


@dataclass(frozen=True)
class PerturbationRecord:
    key: SeedKey
    kind: str
    shape: tuple[int, int]
    basis: ActivationBasis | None = None
    rank: int = 0
    estimator_scale: float = 1.0

    def with_key(self, key: SeedKey) -> "PerturbationRecord":
        return PerturbationRecord(key, self.kind, self.shape, self.basis, self.rank, self.estimator_scale)


def sample_perturbation(
    shape: tuple[int, int],
    basis: ActivationBasis | None,
    key: SeedKey,
    linear: bool = True,
) -> PerturbationRecord:
    """Record for ``Delta = R A^T`` (linear layer with a basis) or a dense Gaussian.

    Nonlinear layers and linear layers whose basis is ``None`` (degenerate
    activations) fall back to the dense branch.
    """
    d_out, d_in = shape
    if not linear or basis is None:
        return PerturbationRecord(key, DENSE, (d_out, d_in))
    A = basis.A
    if A.shape[0] != d_in:
        raise DimensionError(f"basis has {A.shape[0]} rows, layer has d_in={d_in}")
    if A.shape[1] > min(d_out, d_in):
        raise DimensionError(f"basis width {A.shape[1]} exceeds min(d_out, d_in)={min(d_out, d_in)}")
    return PerturbationRecord(key, LOW_RANK, (d_out, d_in), basis, rank=A.shape[1])


def sample_factored(shape: tuple[int, int], rank: int, key: SeedKey) -> PerturbationRecord:
    """LOZO record: ``Delta = U V^T`` with Gaussian ``U`` (d_out x r), ``V`` (d_in x r).

    The estimator divides by ``rank``.
    """
    if rank < 1:
        raise ConfigError("rank must be at least 1")
    return PerturbationRecord(key, FACTORED, tuple(shape), rank=rank, estimator_scale=1.0 / rank)


def _materialize(rec: PerturbationRecord) -> np.ndarray:
    """Tracked ``Delta``; the caller releases it."""
    d_out, d_in = rec.shape
    if rec.kind == DENSE:
        return LEDGER.track(gauss_matrix(rec.key, d_out, d_in))
    if rec.kind == LOW_RANK:
        R = LEDGER.track(gauss_matrix(rec.key, d_out, rec.rank))
        D = LEDGER.track(R @ rec.basis.A.T)
        LEDGER.release(R)
        return D
    if rec.kind == FACTORED:
        r = rec.rank
        U = LEDGER.track(gauss_stream(rec.key, 0, d_out * r).reshape(d_out, r))
        V = LEDGER.track(gauss_stream(rec.key, d_out * r, d_in * r).reshape(d_in, r))
        D = LEDGER.track(U @ V.T)
        LEDGER.release(U, V)
        return D
    raise ValueError(f"unknown perturbation kind {rec.kind!r}")


def regenerate(rec: PerturbationRecord) -> np.ndarray:
    """Rebuild ``Delta`` bit-identically from the record."""
    D = _materialize(rec)
    LEDGER.release(D)
    return D


def _check(params: ModelParams, records) -> None:
    if len(records) != len(params.layers):
        raise DimensionError(f"{len(records)} records for {len(params.layers)} trainable layers")
    for layer, rec in zip(params.layers, records):
        if tuple(rec.shape) != layer.shape:
            raise DimensionError(f"record shape {rec.shape} does not match layer {layer.name} {layer.shape}")
        if rec.kind == LOW_RANK and layer.kind != LINEAR:
            raise DimensionError(f"low-rank record for nonlinear layer {layer.name}")


def shift(params: ModelParams, records, coef: float) -> None:
    """``W <- W + coef * Delta`` in place, one regenerated layer at a time."""
    _check(params, records)
    for layer, rec in zip(params.layers, records):
        D = _materialize(rec)
        layer.weight += coef * D
        LEDGER.release(D)


def apply_perturbation(params: ModelParams, records, mu: float) -> None:
    """``W <- W + mu * Delta`` for every layer."""
    if not mu > 0:
        raise ConfigError(f"mu must be positive, got {mu}")
    shift(params, records, mu)


def restore_and_update(
    params: ModelParams,
    records,
    mu: float,
    eta: float,
    g: float,
    checkpoint: list[np.ndarray] | None = None,
) -> None:
    """Undo a ``+mu * Delta`` shift and take the step in one pass per layer.

    Each layer becomes ``(W + mu D) - mu D - eta * g * s * D`` where ``s`` is
    the record's estimator scale. With ``checkpoint`` (copies of the
    unperturbed weights) the restore is exact instead of ``W - mu D``.
    """
    _restore_update(params, records, mu, eta * g, checkpoint)


def _restore_update(params, records, offset, coef, checkpoint=None):
    _check(params, records)
    for idx, (layer, rec) in enumerate(zip(params.layers, records)):
        D = _materialize(rec)
        c = coef * rec.estimator_scale
        if checkpoint is not None:
            layer.weight[...] = checkpoint[idx] - c * D
        else:
            layer.weight[...] = layer.weight - offset * D - c * D
        LEDGER.release(D)
