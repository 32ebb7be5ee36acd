"""Covariance eigen-spectra of activation matrices.

The eigensolver is a cyclic Jacobi method using the round-robin (tournament)
pair ordering: each sweep visits every off-diagonal pair exactly once, grouped
into rounds of disjoint pairs whose rotations commute and can be applied
together.  It runs on stacks of equally sized matrices at once; a matrix stops
being updated as soon as it has converged, so its result does not depend on
which other matrices share the stack.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

from .dataio import ActivationMatrix, ComponentId, Layout
from .errors import (
    DegenerateSampleCount,
    InconsistentK,
    MissingComponent,
    NoConvergence,
    NotSymmetric,
)

OFF_TOL = 1e-12
MAX_SWEEPS = 100
SYMMETRY_TOL = 1e-10
CLAMP_TOL = 1e-10
CHUNK = 256


@dataclass(frozen=True, eq=False)
class EigenDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray | None
    sweeps: int = 0


@dataclass(frozen=True, eq=False)
class SpectralSignature:
    component: ComponentId | None
    k: int
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class MetaFeatureVector:
    values: np.ndarray
    names: tuple[str, ...] = ()

    def __len__(self):
        return len(self.values)


def _as_values(A) -> np.ndarray:
    if isinstance(A, ActivationMatrix):
        return A.values
    return np.asarray(A, dtype=np.float64)


def center(A):
    """Subtract each row's mean. Returns the same kind of object it was given."""
    v = _as_values(A)
    out = v - v.mean(axis=1, keepdims=True)
    if isinstance(A, ActivationMatrix):
        return ActivationMatrix(A.component, out)
    return out


def covariance(A_centered) -> np.ndarray:
    v = _as_values(A_centered)
    n = v.shape[1]
    if n < 2:
        raise DegenerateSampleCount(f"covariance needs N >= 2 columns, got N={n}")
    C = (v @ v.T) / (n - 1)
    return (C + C.T) / 2


@lru_cache(maxsize=None)
def _rounds(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                pairs.append((min(a, b), max(a, b)))
        pairs.sort()
        p = np.array([a for a, _ in pairs], dtype=np.intp)
        q = np.array([b for _, b in pairs], dtype=np.intp)
        rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _off_norm(A: np.ndarray) -> np.ndarray:
    n = A.shape[-1]
    sq = A * A
    sq[:, np.arange(n), np.arange(n)] = 0.0
    return np.sqrt(sq.reshape(len(A), -1).sum(axis=1))


def _sweep(a: np.ndarray, v: np.ndarray | None) -> None:
    n = a.shape[-1]
    for p, q in _rounds(n):
        app = a[:, p, p]
        aqq = a[:, q, q]
        apq = a[:, p, q]
        nz = apq != 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            theta = np.where(nz, (aqq - app) / (2.0 * np.where(nz, apq, 1.0)), 0.0)
            t = np.where(theta >= 0.0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
        t = np.where(nz, t, 0.0)
        c = 1.0 / np.sqrt(t * t + 1.0)
        s = t * c
        c3 = c[:, None, :]
        s3 = s[:, None, :]
        ap = a[:, :, p]
        aq = a[:, :, q]
        a[:, :, p] = c3 * ap - s3 * aq
        a[:, :, q] = s3 * ap + c3 * aq
        ap = a[:, p, :]
        aq = a[:, q, :]
        a[:, p, :] = c[:, :, None] * ap - s[:, :, None] * aq
        a[:, q, :] = s[:, :, None] * ap + c[:, :, None] * aq
        a[:, p, q] = 0.0
        a[:, q, p] = 0.0
        if v is not None:
            vp = v[:, :, p]
            vq = v[:, :, q]
            v[:, :, p] = c3 * vp - s3 * vq
            v[:, :, q] = s3 * vp + c3 * vq


def jacobi_eigh(C: np.ndarray, vectors: bool = True, tol: float = OFF_TOL,
                max_sweeps: int = MAX_SWEEPS):
    """Eigen-decompose a stack of symmetric matrices, shape (B, n, n).

    Returns ``(eigenvalues, eigenvectors, sweeps)`` with eigenvalues sorted
    descending per matrix (stable on ties) and eigenvectors as columns, or
    ``None`` when ``vectors`` is false.
    """
    A = np.array(C, dtype=np.float64, copy=True)
    if A.ndim != 3 or A.shape[1] != A.shape[2]:
        raise ValueError(f"expected a stack of square matrices, got shape {A.shape}")
    B, n, _ = A.shape
    V = np.broadcast_to(np.eye(n), (B, n, n)).copy() if vectors else None
    scale = np.sqrt((A * A).reshape(B, -1).sum(axis=1))
    sweeps = np.zeros(B, dtype=np.int64)
    active = np.flatnonzero(_off_norm(A) > tol * scale)
    while active.size:
        if sweeps[active].max() >= max_sweeps:
            raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps")
        a = A[active]
        v = V[active] if vectors else None
        _sweep(a, v)
        A[active] = a
        if vectors:
            V[active] = v
        sweeps[active] += 1
        still = _off_norm(a) > tol * scale[active]
        active = active[still]
    lam = np.diagonal(A, axis1=1, axis2=2).copy()
    order = np.argsort(-lam, axis=1, kind="stable")
    lam = np.take_along_axis(lam, order, axis=1)
    if vectors:
        V = np.take_along_axis(V, order[:, None, :], axis=2)
    return lam, V, sweeps


def check_symmetric(C: np.ndarray) -> None:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise NotSymmetric(f"expected a square matrix, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise NotSymmetric("matrix has non-finite entries")
    scale = np.abs(C).max(initial=0.0)
    if np.abs(C - C.T).max(initial=0.0) > SYMMETRY_TOL * scale:
        raise NotSymmetric("matrix is not symmetric within 1e-10 relative")


def eig_sym(C) -> EigenDecomposition:
    """Eigenvalues (descending) and orthonormal eigenvectors of a symmetric matrix."""
    check_symmetric(C)
    C = np.asarray(C, dtype=np.float64)
    sym = (C + C.T) / 2
    lam, V, sweeps = jacobi_eigh(sym[None], vectors=True)
    return EigenDecomposition(lam[0], V[0], int(sweeps[0]))


def _clamp_pad(lam: np.ndarray, k: int) -> np.ndarray:
    # lam: (B, D) sorted descending
    top = np.maximum(lam[:, :1], 0.0)
    lam = np.where((lam < 0.0) & (lam >= -CLAMP_TOL * top), 0.0, lam)
    B, D = lam.shape
    out = np.zeros((B, k))
    m = min(k, D)
    out[:, :m] = lam[:, :m]
    return out


def _spectra_chunk(mats: np.ndarray) -> np.ndarray:
    centered = mats - mats.mean(axis=2, keepdims=True)
    C = np.matmul(centered, np.swapaxes(centered, 1, 2)) / (mats.shape[2] - 1)
    C = (C + np.swapaxes(C, 1, 2)) / 2
    lam, _, _ = jacobi_eigh(C, vectors=False)
    return lam


def spectra_batch(mats: np.ndarray, jobs: int = 1) -> np.ndarray:
    """Full descending covariance spectra for a stack of activation matrices (B, D, N).

    Work is cut into fixed chunks (small enough to stay in cache); ``jobs``
    only decides how many chunks run at once and never changes the result.
    """
    mats = np.asarray(mats, dtype=np.float64)
    if mats.ndim != 3:
        raise ValueError(f"expected a (B, D, N) stack, got shape {mats.shape}")
    if mats.shape[2] < 2:
        raise DegenerateSampleCount(f"covariance needs N >= 2 columns, got N={mats.shape[2]}")
    chunks = [mats[i:i + CHUNK] for i in range(0, len(mats), CHUNK)]
    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_spectra_chunk, chunks))
    else:
        parts = [_spectra_chunk(c) for c in chunks]
    if not parts:
        return np.zeros((0, mats.shape[1]))
    return np.concatenate(parts)


def signatures_batch(mats: np.ndarray, k: int, jobs: int = 1) -> np.ndarray:
    """Top-k signatures, shape (B, k), for a stack of activation matrices."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return _clamp_pad(spectra_batch(mats, jobs), k)


def truncate_spectra(spectra: np.ndarray, k: int) -> np.ndarray:
    """Turn full spectra from :func:`spectra_batch` into top-k signatures."""
    return _clamp_pad(np.asarray(spectra, dtype=np.float64), k)


def signature(A, k: int) -> SpectralSignature:
    if k < 1:
        raise ValueError("k must be >= 1")
    v = _as_values(A)
    comp = A.component if isinstance(A, ActivationMatrix) else None
    return SpectralSignature(comp, k, signatures_batch(v[None], k)[0])


def feature_names(layout: Layout, k: int) -> tuple[str, ...]:
    return tuple(f"{c}/l{i + 1}" for c in layout.components for i in range(k))


def meta_vector(signatures: Mapping[ComponentId, SpectralSignature],
                layout: Layout) -> MetaFeatureVector:
    parts = []
    ks = set()
    for c in layout.components:
        sig = signatures.get(c)
        if sig is None:
            raise MissingComponent(f"no signature for component {c}")
        ks.add(sig.k)
        parts.append(np.asarray(sig.values, dtype=np.float64))
    if len(ks) != 1:
        raise InconsistentK(f"signatures have differing lengths {sorted(ks)}")
    k = ks.pop()
    return MetaFeatureVector(np.concatenate(parts), feature_names(layout, k))
