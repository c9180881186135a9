"""Executable checks of the structural and statistical theory behind AGZO.

Monte Carlo routines draw trial ``t`` from the normals
``[t * D, (t + 1) * D)`` of a single key's stream, so results do not depend
on how trials are chunked or how many worker threads run them. Partial sums
are reduced in chunk order.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import DimensionError, DomainError, InvariantError, RankError
from .models import Minibatch, ModelParams, backprop_oracle
from .tensor import SeedKey, frob, gauss_stream, numerical_rank, orthonormal_columns, svd_full

_CHUNK_ENTRIES = 1 << 20


def worker_count() -> int:
    try:
        n = int(os.environ.get("AGZO_LAB_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, n)


def _chunked(n: int, per_trial: int):
    size = max(1, _CHUNK_ENTRIES // max(1, per_trial))
    return [(s, min(n, s + size)) for s in range(0, n, size)]


def _map_chunks(fn, chunks):
    workers = worker_count()
    if workers == 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def _trial_normals(key: SeedKey, start: int, stop: int, shape: tuple[int, ...]) -> np.ndarray:
    per = int(np.prod(shape))
    return gauss_stream(key, start * per, (stop - start) * per).reshape(stop - start, *shape)


# --------------------------------------------------------------------------- beta


def beta(D):
    """``E|U_1|`` for ``U`` uniform on the unit sphere in ``R^D``.

    Evaluated as ``exp(lgamma(D/2) - lgamma((D+1)/2)) / sqrt(pi)``, which
    stays finite for very large ``D``. Accepts scalars or integer arrays.
    """
    D_arr = np.asarray(D)
    if np.any(D_arr < 1):
        raise DomainError(f"beta is defined for D >= 1, got {D}")
    D_f = D_arr.astype(np.float64)
    val = np.exp(gammaln(D_f / 2.0) - gammaln((D_f + 1.0) / 2.0)) / math.sqrt(math.pi)
    return float(val) if val.ndim == 0 else val


def beta_bounds(D):
    D_f = np.asarray(D, dtype=np.float64)
    return np.sqrt(2.0 / (math.pi * D_f)), np.sqrt(2.0 / (math.pi * (D_f - 1.0)))


def beta_bounds_check(D: int) -> tuple[float, float, float, bool]:
    """``(lower, beta_D, upper, ok)``; ``ok`` also requires ``beta_D < beta_{D-1}``."""
    if D < 2:
        raise DomainError(f"bounds need D >= 2, got {D}")
    lo, hi = beta_bounds(D)
    val = beta(D)
    ok = bool(lo <= val <= hi and val < beta(D - 1))
    return float(lo), val, float(hi), ok


def beta_sweep(d_max: int) -> dict:
    """Check bounds and strict decrease for every ``D`` in ``[2, d_max]``."""
    if d_max < 2:
        raise DomainError("d_max must be at least 2")
    D = np.arange(1, d_max + 1)
    vals = beta(D)
    lo, hi = beta_bounds(D[1:])
    v = vals[1:]
    bound_bad = np.nonzero((v < lo) | (v > hi))[0] + 2
    mono_bad = np.nonzero(~(vals[1:] < vals[:-1]))[0] + 2
    return {
        "checked": int(d_max - 1),
        "bound_violations": bound_bad.tolist(),
        "monotone_violations": mono_bad.tolist(),
        "ok": bound_bad.size == 0 and mono_bad.size == 0,
    }


def sphere_abs_coordinate(D: int, n: int, key: SeedKey) -> tuple[float, float]:
    """Monte Carlo ``E|U_1|`` on the sphere: mean and standard error."""
    def chunk(c):
        z = _trial_normals(key, c[0], c[1], (D,))
        v = np.abs(z[:, 0]) / np.linalg.norm(z, axis=1)
        return v.sum(), (v * v).sum()

    parts = _map_chunks(chunk, _chunked(n, D))
    return _mean_stderr(parts, n)


def _mean_stderr(parts, n):
    s = sum(p[0] for p in parts)
    ss = sum(p[1] for p in parts)
    mean = s / n
    if n < 2:
        return mean, 0.0
    var = max(ss - n * mean * mean, 0.0) / (n - 1)
    return mean, math.sqrt(var / n)


# --------------------------------------------------------------------------- cosine


def _check_orthonormal(A):
    if not orthonormal_columns(A, 1e-8):
        raise InvariantError("A must have orthonormal columns")


def energy_ratio(G: np.ndarray, A: np.ndarray) -> float:
    return frob(G @ A) / frob(G)


def expected_cosine_agzo(G: np.ndarray, A: np.ndarray) -> float:
    """``beta_{d_out r} * ||G A||_F / ||G||_F`` for the noiseless activation-guided estimator."""
    G = np.asarray(G, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if A.shape[0] != G.shape[1]:
        raise DimensionError(f"A has {A.shape[0]} rows, G has {G.shape[1]} columns")
    _check_orthonormal(A)
    if frob(G) == 0:
        raise DomainError("G must be nonzero")
    return beta(G.shape[0] * A.shape[1]) * energy_ratio(G, A)


def expected_cosine_mezo(G: np.ndarray) -> float:
    """``beta_{d_out d_in}``: independent of ``G`` beyond its shape."""
    G = np.asarray(G)
    return beta(G.shape[0] * G.shape[1])


@dataclass
class CosineReport:
    analytic_expectation: float
    mc_mean: float
    mc_stderr: float
    n_trials: int
    subspace_energy_ratio: float
    dims: tuple[int, int, int]

    def agrees(self, n_sigma: float = 3.0, floor: float = 1e-12) -> bool:
        """``|mc - analytic| <= n_sigma * stderr`` plus a rounding floor relative to the analytic value."""
        return abs(self.mc_mean - self.analytic_expectation) <= (
            n_sigma * self.mc_stderr + floor * abs(self.analytic_expectation)
        )


def mc_cosine(G: np.ndarray, A: np.ndarray | None, n: int, key: SeedKey) -> CosineReport:
    """Average ``cos(<G, D> D, G)`` over ``n`` sampled perturbations ``D``.

    ``D = R A^T`` when ``A`` is given and a dense Gaussian otherwise. Each
    trial builds the estimate matrix explicitly.
    """
    if n < 1:
        raise DomainError("n must be at least 1")
    G = np.asarray(G, dtype=np.float64)
    d_out, d_in = G.shape
    if A is None:
        analytic = expected_cosine_mezo(G)
        r, ratio, shape = d_in, 1.0, (d_out, d_in)
    else:
        A = np.asarray(A, dtype=np.float64)
        analytic = expected_cosine_agzo(G, A)
        r, ratio, shape = A.shape[1], energy_ratio(G, A), (d_out, A.shape[1])
    gnorm = frob(G)

    def chunk(c):
        Rt = _trial_normals(key, c[0], c[1], shape)
        D = Rt if A is None else Rt @ A.T
        phi = np.einsum("tij,ij->t", D, G)
        Ghat = phi[:, None, None] * D
        num = np.einsum("tij,ij->t", Ghat, G)
        den = np.sqrt(np.einsum("tij,tij->t", Ghat, Ghat)) * gnorm
        cos = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        return cos.sum(), (cos * cos).sum()

    parts = _map_chunks(chunk, _chunked(n, d_out * d_in))
    mean, se = _mean_stderr(parts, n)
    return CosineReport(analytic, mean, se, n, ratio, (d_out, d_in, r))


def projector_identity_check(G: np.ndarray, A: np.ndarray, rtol: float = 1e-10) -> bool:
    """``||G A||_F == ||G A A^T||_F`` within ``rtol`` relative."""
    _check_orthonormal(A)
    lhs = frob(G @ A)
    rhs = frob(G @ A @ A.T)
    return abs(lhs - rhs) <= rtol * max(lhs, rhs, np.finfo(float).tiny)


# --------------------------------------------------------------------------- structure


@dataclass
class ConfinementRow:
    layer: int
    rank: int | str
    effective_rank: int
    h_rank: int
    cosine: float | None


def projected_cosine(G: np.ndarray, U: np.ndarray) -> float | None:
    """``cos(G, G U U^T)``; ``None`` when either side vanishes."""
    Gp = (G @ U) @ U.T
    ng, np_ = frob(G), frob(Gp)
    if ng == 0 or np_ == 0:
        return None
    return frob(G, Gp) / (ng * np_)


def confinement_profile(params: ModelParams, batch: Minibatch, ranks) -> list[ConfinementRow]:
    """Cosine between each linear layer's gradient and its projection onto the top-``r``
    left singular subspace of the layer's activations, for each ``r`` in ``ranks`` and
    for the full numerical rank (reported as ``"full"``)."""
    if params.spec.n_linear < 1:
        raise DimensionError("model has no linear layer")
    grads = backprop_oracle(params, batch)
    rows = []
    for k, i in enumerate(params.linear_indices):
        G = grads.grads[i]
        U, s, _ = svd_full(grads.H[k])
        s_rank = numerical_rank(s)
        zero_grad = frob(G) == 0
        for r in [*ranks, "full"]:
            eff = s_rank if r == "full" else min(int(r), s_rank)
            cos = None if zero_grad or eff == 0 else projected_cosine(G, U[:, :eff])
            rows.append(ConfinementRow(k, r, eff, s_rank, cos))
    return rows


def spectrum_dump(M: np.ndarray) -> np.ndarray:
    return svd_full(M)[1]


# --------------------------------------------------------------------------- estimator identities


class Objective:
    """Closed-form test objective evaluated on a stack of weight matrices."""

    def value(self, W: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, W: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hess_quad(self, W: np.ndarray, D: np.ndarray) -> np.ndarray:
        """``D^T (Hessian) D`` per trial, with any symmetric stand-in where undefined."""
        return np.einsum("tij,tij->t", D, D)


class LinearObjective(Objective):
    def __init__(self, G):
        self.G = np.asarray(G, dtype=np.float64)

    def value(self, W):
        return np.einsum("...ij,ij->...", W, self.G)

    def grad(self, W):
        return self.G.copy()

    def hess_quad(self, W, D):
        return np.zeros(D.shape[0])


class QuadraticObjective(Objective):
    """``0.5 ||W||_F^2``."""

    def value(self, W):
        return 0.5 * np.einsum("...ij,...ij->...", W, W)

    def grad(self, W):
        return np.array(W, dtype=np.float64)


class CubicPerturbedQuadratic(Objective):
    """``0.5 ||W||_F^2 + c * sum(W_ij^3)``."""

    def __init__(self, c=1.0):
        self.c = c

    def value(self, W):
        return 0.5 * np.einsum("...ij,...ij->...", W, W) + self.c * np.sum(W**3, axis=(-2, -1))

    def grad(self, W):
        return W + 3.0 * self.c * W * W

    def hess_quad(self, W, D):
        return np.einsum("tij,tij,ij->t", D, D, 1.0 + 6.0 * self.c * W)


class KinkedQuadratic(Objective):
    """``0.5 ||W||_F^2 + c * sum(W_ij |W_ij|)``: Lipschitz gradient, Hessian jumps at zero."""

    def __init__(self, c=1.0):
        self.c = c

    def value(self, W):
        return 0.5 * np.einsum("...ij,...ij->...", W, W) + self.c * np.sum(W * np.abs(W), axis=(-2, -1))

    def grad(self, W):
        return W + 2.0 * self.c * np.abs(W)

    def hess_quad(self, W, D):
        return np.einsum("tij,tij,ij->t", D, D, 1.0 + 2.0 * self.c * np.sign(W))


@dataclass
class EstimatorMeanReport:
    mc_mean: np.ndarray
    target: np.ndarray
    max_abs_dev: float
    stderr_bound: float
    n: int

    @property
    def ok(self) -> bool:
        return self.max_abs_dev <= self.stderr_bound


def _perturbations(key, start, stop, shape, A):
    if A is None:
        return _trial_normals(key, start, stop, shape)
    return _trial_normals(key, start, stop, (shape[0], A.shape[1])) @ A.T


def estimator_mean_check(
    objective: Objective,
    W: np.ndarray,
    A: np.ndarray | None,
    mu: float,
    n: int,
    key: SeedKey,
) -> EstimatorMeanReport:
    """Monte Carlo mean of the finite-``mu`` estimate ``(f(W + mu D) - f(W)) / mu * D``.

    ``D = R A^T`` with ``A`` given (target ``grad f(W) A A^T``), dense Gaussian
    with ``A=None`` (target ``grad f(W)``). ``stderr_bound`` is three times the
    largest entrywise standard error.
    """
    if n < 1000:
        raise DomainError("estimator_mean_check needs n >= 1000")
    W = np.asarray(W, dtype=np.float64)
    if A is not None:
        _check_orthonormal(A)
    f0 = float(objective.value(W))

    def chunk(c):
        D = _perturbations(key, c[0], c[1], W.shape, A)
        phi = (objective.value(W[None] + mu * D) - f0) / mu
        est = phi[:, None, None] * D
        return est.sum(axis=0), (est * est).sum(axis=0)

    parts = _map_chunks(chunk, _chunked(n, W.size))
    s = sum(p[0] for p in parts)
    ss = sum(p[1] for p in parts)
    mean = s / n
    var = np.maximum(ss - n * mean * mean, 0.0) / (n - 1)
    se = np.sqrt(var / n)
    G = objective.grad(W)
    target = G if A is None else G @ A @ A.T
    return EstimatorMeanReport(mean, target, float(np.max(np.abs(mean - target))), 3.0 * float(se.max()), n)


@dataclass
class BiasSweep:
    mus: list[float]
    biases: list[float]
    slope: float


def smoothing_bias_sweep(objective: Objective, W, A, mus, n: int, key: SeedKey) -> BiasSweep:
    """``||E[estimate] - grad f(W) A A^T||_F`` for each ``mu`` and its log-log slope.

    The expectation is estimated with control variates whose means are known
    to be exactly zero or exactly the target: ``<grad f, D> D`` has mean
    ``grad f A A^T`` and ``(D^T Hess D) D`` has mean zero (odd moment). What
    remains is an unbiased estimate of the smoothing bias whose noise shrinks
    with ``mu``. The same perturbations are reused across ``mu``.
    """
    W = np.asarray(W, dtype=np.float64)
    f0 = float(objective.value(W))
    G = objective.grad(W)
    biases = []
    for mu in mus:
        def chunk(c, mu=mu):
            D = _perturbations(key, c[0], c[1], W.shape, A)
            phi = (objective.value(W[None] + mu * D) - f0) / mu
            first = np.einsum("tij,ij->t", D, G)
            second = 0.5 * mu * objective.hess_quad(W, D)
            return ((phi - first - second)[:, None, None] * D).sum(axis=0)

        parts = _map_chunks(chunk, _chunked(n, W.size))
        biases.append(frob(sum(parts) / n))
    x, y = np.log(np.asarray(mus, dtype=float)), np.log(np.asarray(biases))
    slope = float(np.polyfit(x, y, 1)[0])
    return BiasSweep(list(map(float, mus)), biases, slope)


# --------------------------------------------------------------------------- AGZO vs MeZO condition


@dataclass
class InteractionMatrix:
    """``B = V^T Q^T Q V`` with the activation singular values it pairs with."""

    B: np.ndarray
    sigma: np.ndarray
    r: int
    s: int

    def __post_init__(self):
        B = self.B
        scale = max(1.0, float(np.abs(B).max(initial=0.0)))
        if not np.allclose(B, B.T, atol=1e-9 * scale, rtol=0):
            raise InvariantError("interaction matrix is not symmetric")
        if np.linalg.eigvalsh(0.5 * (B + B.T)).min(initial=0.0) < -1e-9 * scale:
            raise InvariantError("interaction matrix is not positive semidefinite")


@dataclass
class InteractionReport:
    condition_holds: bool
    lhs_ratio: float
    rhs_ratio: float
    cosine_gap: float
    matrix: InteractionMatrix
    strict_gap: bool

    @property
    def boundary(self) -> bool:
        return not self.strict_gap


def interaction_condition_check(Q: np.ndarray, H: np.ndarray, r: int, rank_tol: float = 1e-10) -> InteractionReport:
    """Interaction matrix ``B = V^T Q^T Q V`` from the compact SVD ``H = U S V^T`` and the
    comparison between activation-guided and dense expected cosines.

    Raises :class:`InvariantError` if the premise holds with ``s < d_in`` and a
    strict gap ``sigma_r > sigma_{r+1}`` but the conclusion does not.
    """
    Q = np.asarray(Q, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    d_out, m = Q.shape
    d_in = H.shape[0]
    if H.shape[1] != m:
        raise DimensionError("Q and H must have the same number of columns")
    U, sigma, V = svd_full(H)
    s = numerical_rank(sigma, rank_tol)
    if s < r:
        raise RankError(f"activation rank {s} is below r={r}", s)
    U, sigma, V = U[:, :s], sigma[:s], V[:, :s]
    QV = Q @ V
    B = QV.T @ QV
    b = np.diag(B)
    condition = bool(b[:r].mean() >= b.mean())
    w = b * sigma**2
    lhs = float(w[:r].sum() / w.sum())
    rhs = r / (d_in - 1.0 / d_out)
    G = Q @ H.T
    gap = expected_cosine_agzo(G, U[:, :r]) - expected_cosine_mezo(G)
    strict = r < s and sigma[r - 1] > sigma[r]
    if condition and s < d_in and strict and not (lhs > rhs and gap > 0):
        raise InvariantError(f"premise holds but lhs={lhs:.6g} rhs={rhs:.6g} gap={gap:.6g}")
    return InteractionReport(condition, lhs, rhs, float(gap), InteractionMatrix(B, sigma, r, s), strict)


def random_interaction_instance(key: SeedKey, max_tries: int = 200):
    """Random ``(Q, H, r)`` with ``r < s < d_in``, distinct singular values and the
    top-``r`` average of ``diag(B)`` at least its overall average."""
    rng = np.random.Generator(np.random.Philox(key=np.array([key.base, key.stream], dtype=np.uint64)))
    for _ in range(max_tries):
        d_in = int(rng.integers(3, 33))
        s = int(rng.integers(2, d_in))
        r = int(rng.integers(1, s))
        d_out = int(rng.integers(1, 17))
        m = int(rng.integers(s, s + 24))
        U = np.linalg.qr(rng.standard_normal((d_in, s)))[0]
        V = np.linalg.qr(rng.standard_normal((m, s)))[0]
        sigma = np.sort(rng.uniform(0.05, 5.0, s))[::-1]
        if np.min(-np.diff(sigma)) <= 1e-6 * sigma[0]:
            continue
        H = (U * sigma) @ V.T
        Q = rng.standard_normal((d_out, m))
        b = np.diag(V.T @ Q.T @ Q @ V)
        if b[:r].mean() >= b.mean():
            return Q, H, r
    raise RuntimeError("could not draw an instance satisfying the premise")
