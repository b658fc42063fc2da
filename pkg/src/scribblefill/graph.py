"""Sparse nonlocal affinity graph, degrees, and Laplacians.

Edges pair each pixel with its k-NN matches under the exponential kernel
exp(-||dx||_g^2 / h1^2 - d_ij^2 / h2^2); the graph is symmetrized by
elementwise max and floored with weak 4-neighborhood edges so the whole
image stays connected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp

from .config import EnrichConfig
from .errors import ValidationError
from .features import FeatureMatrix

_EDGE_CHUNK = 262_144


@dataclass(frozen=True)
class AffinityGraph:
    """Symmetric nonnegative W (CSR) with cached row-sum degrees."""

    W: sp.csr_matrix
    degrees: np.ndarray

    def __post_init__(self):
        if self.W.shape[0] != self.W.shape[1]:
            raise ValidationError("affinity matrix must be square")
        if self.degrees.shape != (self.W.shape[0],):
            raise ValidationError("degree vector length mismatch")

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def nnz(self) -> int:
        return self.W.nnz


@dataclass(frozen=True)
class LaplacianMatrix:
    """L = D - W ("plain") or (D - W)^T (D - W) ("clustering")."""

    matrix: sp.csr_matrix
    kind: str = "plain"

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def kernel_weight(xi, xj, dij: float, h1: float, h2: float,
                  gweights=None) -> float:
    """Affinity of a pixel pair: feature-part Gaussian times distance Gaussian.

    The weighted norm runs over the given feature entries only; the spatial
    separation enters through dij (pixel units).
    """
    xi = np.asarray(xi, dtype=np.float64)
    xj = np.asarray(xj, dtype=np.float64)
    if not (h1 > 0 and h2 > 0):
        raise ValidationError("bandwidths must be positive")
    if gweights is None:
        gweights = np.ones(xi.shape[0])
    else:
        gweights = np.asarray(gweights, dtype=np.float64)
        if gweights.shape != xi.shape or np.any(gweights < 0):
            raise ValidationError("gweights must be nonnegative, one per dimension")
    if not (np.all(np.isfinite(xi)) and np.all(np.isfinite(xj)) and np.isfinite(dij)):
        raise ValidationError("kernel inputs must be finite")
    d = xi - xj
    return float(np.exp(-(gweights @ (d * d)) / h1**2 - dij**2 / h2**2))


def _neighbor_array(fm: FeatureMatrix, neighbor_fn) -> tuple[np.ndarray, np.ndarray]:
    """Normalize a neighbor provider into flat (source, target) index arrays."""
    n = fm.n
    if callable(neighbor_fn):
        srcs, tgts = [], []
        for i in range(n):
            nbrs = np.asarray(neighbor_fn(i), dtype=np.int64).ravel()
            nbrs = nbrs[nbrs >= 0]
            srcs.append(np.full(nbrs.size, i, dtype=np.int64))
            tgts.append(nbrs)
        return np.concatenate(srcs), np.concatenate(tgts)
    nbrs = np.asarray(neighbor_fn, dtype=np.int64)
    if nbrs.ndim != 2 or nbrs.shape[0] != n:
        raise ValidationError("neighbor array must be (n, K)")
    src = np.repeat(np.arange(n, dtype=np.int64), nbrs.shape[1])
    tgt = nbrs.ravel()
    keep = tgt >= 0
    return src[keep], tgt[keep]


def _edge_weights(fm: FeatureMatrix, src: np.ndarray, tgt: np.ndarray,
                  cfg: EnrichConfig) -> np.ndarray:
    feat = fm.rows[:, fm.feature_columns]
    if cfg.gweights is None:
        gw = np.ones(feat.shape[1])
    else:
        gw = np.asarray(cfg.gweights, dtype=np.float64)
        if gw.shape[0] != feat.shape[1]:
            raise ValidationError(
                f"gweights length {gw.shape[0]} != feature dimension {feat.shape[1]}"
            )
    xs_s, ys_s = src % fm.width, src // fm.width
    xs_t, ys_t = tgt % fm.width, tgt // fm.width
    d2 = (xs_s - xs_t) ** 2 + (ys_s - ys_t) ** 2
    out = np.empty(src.size)
    for lo in range(0, src.size, _EDGE_CHUNK):
        hi = min(lo + _EDGE_CHUNK, src.size)
        diff = feat[src[lo:hi]] - feat[tgt[lo:hi]]
        out[lo:hi] = (diff * diff) @ gw
    return np.exp(-out / cfg.h1**2 - d2 / cfg.h2**2)


def _grid_edges(width: int, height: int, weight: float) -> sp.csr_matrix:
    n = width * height
    idx = np.arange(n, dtype=np.int64)
    right = idx[idx % width < width - 1]
    down = idx[idx < n - width]
    rows = np.concatenate([right, down])
    cols = np.concatenate([right + 1, down + width])
    vals = np.full(rows.size, weight)
    g = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    return g.maximum(g.T)


def build_affinity(fm: FeatureMatrix, neighbor_fn, cfg: EnrichConfig) -> AffinityGraph:
    """Assemble W from per-pixel neighborhoods.

    `neighbor_fn` is either a callable i -> neighbor indices or a
    precomputed (n, K) index array (-1 entries are padding). Directed k-NN
    edges are symmetrized by elementwise max, then 4-neighborhood grid
    edges are floored at cfg.grid_edge_weight.
    """
    n = fm.n
    if n == 0:
        raise ValidationError("empty image")
    if not 1 <= cfg.K <= max(n - 1, 1):
        raise ValidationError(f"K={cfg.K} out of range for {n} pixels")
    src, tgt = _neighbor_array(fm, neighbor_fn)
    if np.any(tgt >= n):
        raise ValidationError("neighbor index out of range")
    keep = src != tgt
    src, tgt = src[keep], tgt[keep]
    # drop duplicate directed edges (weights are pairwise-deterministic)
    _, first = np.unique(src * n + tgt, return_index=True)
    src, tgt = src[first], tgt[first]
    vals = _edge_weights(fm, src, tgt, cfg)
    W = sp.coo_matrix((vals, (src, tgt)), shape=(n, n)).tocsr()
    W = W.maximum(W.T)
    if fm.width > 1 or fm.height > 1:
        W = W.maximum(_grid_edges(fm.width, fm.height, cfg.grid_edge_weight))
    W.sum_duplicates()
    degrees = np.asarray(W.sum(axis=1)).ravel()
    return AffinityGraph(W=W, degrees=degrees)


def laplacian(g: AffinityGraph) -> LaplacianMatrix:
    """Plain graph Laplacian D - W."""
    L = (sp.diags(g.degrees) - g.W).tocsr()
    return LaplacianMatrix(matrix=L, kind="plain")


def clustering_laplacian(g: AffinityGraph, max_nnz: int = 50_000_000) -> LaplacianMatrix:
    """Explicit (D - W)^T (D - W); denser than the plain Laplacian."""
    L = laplacian(g).matrix
    product = (L.T @ L).tocsr()
    if product.nnz > max_nnz:
        raise ValidationError(
            f"clustering Laplacian has {product.nnz} entries, over the "
            f"{max_nnz} cap"
        )
    return LaplacianMatrix(matrix=product, kind="clustering")


def write_matrix_market(g: AffinityGraph, path):
    """Dump W as text MatrixMarket coordinate real symmetric."""
    scipy.io.mmwrite(path, g.W, symmetry="symmetric")
