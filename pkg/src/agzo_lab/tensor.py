"""Dense linear algebra, seeded Gaussian sampling and the allocation ledger.

Matrices are plain 2-D ``float64`` numpy arrays. Randomness comes from a
counter-based generator (Philox 4x64 keyed by ``(base, stream)``) followed by
a Box-Muller transform, so any slice of a Gaussian stream can be regenerated
bit-exactly from its key and offset alone.
"""

from __future__ import annotations

import hashlib
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvariantError, NumericError, RankError

_MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 2.0**-53
_SHIFT = np.uint64(11)

QR_RANK_TOL = 1e-12


@dataclass(frozen=True)
class SeedKey:
    """Key of an independent Gaussian stream.

    Identical keys give bit-identical streams; keys differing in either field
    give statistically independent streams.
    """

    base: int
    stream: int = 0

    def __post_init__(self):
        for name in ("base", "stream"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or not 0 <= int(v) <= _MASK64:
                raise ValueError(f"SeedKey.{name} must be a 64-bit unsigned integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    def derive(self, *labels) -> "SeedKey":
        """Key for a named sub-purpose, e.g. ``key.derive("omega", layer)``.

        The derived base is a hash of this key and the labels; the stream is
        reset to 0 so callers can index it themselves via :meth:`at`.
        """
        h = hashlib.blake2b(digest_size=8)
        h.update(f"{self.base}:{self.stream}".encode())
        for lab in labels:
            h.update(b"\x1f" + str(lab).encode())
        return SeedKey(int.from_bytes(h.digest(), "little"), 0)

    def at(self, stream: int) -> "SeedKey":
        return SeedKey(self.base, stream)


def _raw(key: SeedKey, start: int, count: int) -> np.ndarray:
    # Philox 4x64 emits 4 words per counter value
    counter, skip = divmod(start, 4)
    bg = np.random.Philox(key=np.array([key.base, key.stream], dtype=np.uint64), counter=counter)
    return bg.random_raw(count + skip)[skip:]


def gauss_stream(key: SeedKey, offset: int, count: int) -> np.ndarray:
    """Standard normals ``[offset, offset + count)`` of the stream named by ``key``.

    Normal ``2k`` and ``2k + 1`` are the cosine and sine halves of one
    Box-Muller pair built from raw words ``2k`` and ``2k + 1``.
    """
    if count < 0 or offset < 0:
        raise DimensionError("offset and count must be non-negative")
    if count == 0:
        return np.empty(0)
    first_pair = offset // 2
    last_pair = (offset + count - 1) // 2
    n_pairs = last_pair - first_pair + 1
    raw = _raw(key, 2 * first_pair, 2 * n_pairs)
    u1 = ((raw[0::2] >> _SHIFT).astype(np.float64) + 1.0) * _INV_2_53  # (0, 1]
    u2 = (raw[1::2] >> _SHIFT).astype(np.float64) * _INV_2_53
    rad = np.sqrt(-2.0 * np.log(u1))
    theta = _TWO_PI * u2
    out = np.empty(2 * n_pairs)
    out[0::2] = rad * np.cos(theta)
    out[1::2] = rad * np.sin(theta)
    lo = offset - 2 * first_pair
    return out[lo : lo + count]


def gauss_matrix(key: SeedKey, rows: int, cols: int) -> np.ndarray:
    """Row-major ``rows x cols`` matrix of i.i.d. N(0, 1) drawn from the start of ``key``'s stream."""
    if rows < 1 or cols < 1:
        raise DimensionError(f"gauss_matrix needs positive dimensions, got {rows}x{cols}")
    return gauss_stream(key, 0, rows * cols).reshape(rows, cols)


def qr_orthonormal(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR with a nonnegative diagonal on ``R``.

    Raises :class:`RankError` if some ``|R_jj|`` falls below
    ``QR_RANK_TOL * max_i |R_ii|``.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise DimensionError("qr_orthonormal expects a 2-D matrix")
    rows, cols = M.shape
    if rows < cols:
        raise DimensionError(f"qr_orthonormal needs rows >= cols, got {rows}x{cols}")
    Q, R = np.linalg.qr(M, mode="reduced")
    d = np.diagonal(R)
    signs = np.where(d < 0, -1.0, 1.0)
    Q = Q * signs
    R = R * signs[:, None]
    diag = np.abs(d)
    top = diag.max() if diag.size else 0.0
    bad = np.nonzero(diag < QR_RANK_TOL * top)[0] if top > 0 else np.arange(cols)
    if bad.size:
        j = int(bad[0])
        raise RankError(f"column {j} is numerically dependent on the preceding columns", j)
    return Q, R


def svd_full(M: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Compact SVD ``M = U diag(sigma) V^T`` with ``sigma`` sorted descending."""
    M = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise NumericError("svd_full needs finite input")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    return U, s, Vt.T


def numerical_rank(sigma: np.ndarray, rtol: float = 1e-10) -> int:
    if sigma.size == 0 or sigma[0] == 0:
        return 0
    return int(np.count_nonzero(sigma > rtol * sigma[0]))


def frob(A: np.ndarray, B: np.ndarray | None = None) -> float:
    """``tr(A^T B)`` when ``B`` is given, otherwise the Frobenius norm of ``A``."""
    A = np.asarray(A, dtype=np.float64)
    if B is None:
        return float(np.sqrt(np.sum(A * A)))
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise DimensionError(f"shape mismatch {A.shape} vs {B.shape}")
    return float(np.sum(A * B))


def orthonormal_columns(A: np.ndarray, tol: float = 1e-8) -> bool:
    A = np.asarray(A, dtype=np.float64)
    return bool(np.max(np.abs(A.T @ A - np.eye(A.shape[1]))) <= tol)


class AllocationLedger:
    """Byte counter standing in for accelerator peak memory.

    Only buffers explicitly registered with :meth:`track` are counted, at
    8 bytes per entry. ``peak_bytes`` is a high-water mark that
    :meth:`reset_peak` lowers back to the current live total.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._live: dict[int, int] = {}
        self.live_bytes = 0
        self.peak_bytes = 0

    def track(self, arr: np.ndarray) -> np.ndarray:
        nbytes = int(arr.size) * 8
        with self._lock:
            if id(arr) in self._live:
                raise InvariantError("buffer is already tracked")
            self._live[id(arr)] = nbytes
            self.live_bytes += nbytes
            if self.live_bytes > self.peak_bytes:
                self.peak_bytes = self.live_bytes
        return arr

    def release(self, *arrays: np.ndarray) -> None:
        with self._lock:
            for arr in arrays:
                try:
                    self.live_bytes -= self._live.pop(id(arr))
                except KeyError:
                    raise InvariantError("releasing a buffer that is not tracked") from None

    def is_tracked(self, arr) -> bool:
        return id(arr) in self._live

    @contextmanager
    def hold(self, *arrays: np.ndarray):
        """Track ``arrays`` for the duration of the block."""
        for a in arrays:
            self.track(a)
        try:
            yield arrays
        finally:
            self.release(*arrays)

    def reset_peak(self) -> None:
        with self._lock:
            self.peak_bytes = self.live_bytes

    def clear(self) -> None:
        with self._lock:
            self._live.clear()
            self.live_bytes = 0
            self.peak_bytes = 0

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return self.live_bytes, self.peak_bytes


LEDGER = AllocationLedger()


def ledger_snapshot() -> tuple[int, int]:
    """``(live_bytes, peak_bytes)`` of the process-wide ledger."""
    return LEDGER.snapshot()
