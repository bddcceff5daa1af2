"""Adjacency construction and Chebyshev spectral filtering on segment graphs."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .network import RoadNetwork


def shortest_path_distances(net: RoadNetwork) -> np.ndarray:
    """Midpoint-to-midpoint network distance between segments, in km.

    Directed distances are symmetrised with ``min(d_ij, d_ji)``; unreachable
    pairs are ``inf``.
    """
    rows, cols, w = [], [], []
    half = net.length_m / 2.0
    for i, succ in enumerate(net.successors):
        for j in succ:
            rows.append(i)
            cols.append(j)
            w.append(half[i] + half[j])
    graph = csr_matrix((w, (rows, cols)), shape=(net.n, net.n))
    d = dijkstra(graph, directed=True) / 1000.0
    d = np.minimum(d, d.T)
    np.fill_diagonal(d, 0.0)
    return d


def dijkstra_matrix(dist: np.ndarray, sigma2: float = 3.0, epsilon: float = 0.0) -> np.ndarray:
    """Gaussian distance decay ``exp(-d^2 / sigma2)``, zeroed below ``epsilon``."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    if not 0 <= epsilon < 1:
        raise ValueError("epsilon must lie in [0, 1)")
    with np.errstate(over="ignore"):
        w = np.exp(-np.square(dist) / sigma2)
    w[~np.isfinite(dist)] = 0.0
    w[w < epsilon] = 0.0
    return w


def covariance_matrix(train_travel_time: np.ndarray) -> np.ndarray:
    """Clipped co-deviation ``sum_t (x_it - mean_i)+ (x_jt - mean_j)+``.

    ``train_travel_time`` is segments x training slots. Not normalised by the
    number of slots.
    """
    x = np.asarray(train_travel_time, dtype=float)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError("need an n x S matrix with S >= 2")
    if not np.all(np.isfinite(x)):
        raise ValueError("travel-time matrix contains missing values")
    dev = np.maximum(x - x.mean(axis=1, keepdims=True), 0.0)
    return dev @ dev.T


def compound_matrix(cov: np.ndarray, dijkstra_w: np.ndarray) -> np.ndarray:
    if cov.shape != dijkstra_w.shape:
        raise ValueError(f"shape mismatch: covariance {cov.shape} vs Dijkstra {dijkstra_w.shape}")
    return cov * dijkstra_w


def adjacency_fingerprint(w: np.ndarray) -> str:
    """Content hash of an adjacency matrix (float64, little-endian)."""
    a = np.ascontiguousarray(w, dtype="<f8")
    return hashlib.sha256(str(a.shape).encode() + a.tobytes()).hexdigest()


@dataclass(frozen=True)
class AdjacencySet:
    dijkstra: np.ndarray
    covariance: np.ndarray
    compound: np.ndarray
    sigma2: float
    epsilon: float


def build_adjacency(net: RoadNetwork, train_travel_time: np.ndarray, sigma2=3.0, epsilon=0.0) -> AdjacencySet:
    """Dijkstra, covariance and compound matrices for one network."""
    wd = dijkstra_matrix(shortest_path_distances(net), sigma2, epsilon)
    cov = covariance_matrix(train_travel_time)
    return AdjacencySet(wd, cov, compound_matrix(cov, wd), sigma2, epsilon)


@dataclass(frozen=True)
class SpectralOperator:
    scaled_laplacian: np.ndarray
    lambda_max: float
    chebyshev_order: int = 3

    def __post_init__(self):
        if self.chebyshev_order < 1:
            raise ValueError("chebyshev_order must be >= 1")


def normalized_laplacian(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError("adjacency must be square")
    if np.any(w < 0):
        raise ValueError("adjacency must be elementwise nonnegative")
    if not np.allclose(w, w.T, rtol=1e-12, atol=0):
        raise ValueError("adjacency must be symmetric")
    if not np.any(w):
        raise ValueError("adjacency has no edges")
    deg = w.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    pos = deg > 0
    inv_sqrt[pos] = 1.0 / np.sqrt(deg[pos])
    lap = np.eye(len(w)) - inv_sqrt[:, None] * w * inv_sqrt[None, :]
    return (lap + lap.T) / 2.0


def power_iteration(m: np.ndarray, tol: float = 1e-9, max_iter: int = 10_000, seed: int = 0) -> float:
    """Dominant eigenvalue of a symmetric PSD matrix.

    Stops once the eigen-residual ``||m x - lam x||`` falls below ``tol * lam``.
    """
    x = np.random.default_rng(seed).uniform(0.5, 1.5, size=m.shape[0])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = m @ x
        lam = float(x @ y)
        if np.linalg.norm(y - lam * x) <= tol * abs(lam):
            break
        norm = np.linalg.norm(y)
        if norm == 0:
            return 0.0
        x = y / norm
    return lam


def scaled_laplacian(w: np.ndarray, chebyshev_order: int = 3) -> SpectralOperator:
    """``2 L / lambda_max - I`` with ``L = I - D^-1/2 W D^-1/2``.

    Zero-degree rows use ``D^-1/2 = 0``, so their Laplacian row is ``e_k``.
    """
    lap = normalized_laplacian(w)
    lam = power_iteration(lap)
    scaled = 2.0 * lap / lam - np.eye(len(lap))
    return SpectralOperator((scaled + scaled.T) / 2.0, lam, chebyshev_order)


def chebyshev_apply(op: SpectralOperator, x: np.ndarray, k: int) -> np.ndarray:
    """``T_k(L~) x`` through the three-term recurrence (matrix products only)."""
    if not 0 <= k < op.chebyshev_order:
        raise ValueError(f"order {k} outside [0, {op.chebyshev_order})")
    lap = op.scaled_laplacian
    prev, cur = x, lap @ x
    if k == 0:
        return np.array(x, dtype=float)
    for _ in range(k - 1):
        prev, cur = cur, 2.0 * (lap @ cur) - prev
    return cur
