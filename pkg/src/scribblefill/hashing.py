"""Binary hashing of pixel features and Hamming-distance neighbor search.

The code model is learned by iterative quantization: PCA-project the sample,
then alternate between snapping projections to the nearest hypercube corner
and re-fitting an orthogonal rotation (Procrustes) until the quantization
loss settles. Codes are packed into 64-bit words so distance queries reduce
to XOR + popcount.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ValidationError
from .features import FeatureMatrix, _principal_directions

ORTHOGONALITY_TOL = 1e-8

ITQ_MAGIC = b"ITQ1"


class SpatialWindow(NamedTuple):
    """Chebyshev candidate window around the query pixel."""

    radius: int
    width: int
    height: int


def _as_rows(X) -> np.ndarray:
    rows = X.rows if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)
    if rows.ndim != 2:
        raise ValidationError("expected a 2-D sample matrix")
    return rows


@dataclass(frozen=True)
class HashModel:
    """Centering vector plus a z x tau projection (PCA composed with rotation)."""

    mean: np.ndarray
    projection: np.ndarray
    bits: int
    padded_dims: int = 0
    losses: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.projection.shape != (self.mean.shape[0], self.bits):
            raise ValidationError("projection must be z x bits")

    @property
    def z(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class CodeBook:
    """Packed binary codes, one row of uint64 words per pixel."""

    codes: np.ndarray  # (n, words) uint64
    bits: int

    def __post_init__(self):
        words = -(-self.bits // 64)
        if self.codes.ndim != 2 or self.codes.shape[1] != words:
            raise ValidationError("code array does not match bit count")
        spare = words * 64 - self.bits
        if spare and np.any(self.codes[:, -1] >> np.uint64(64 - spare)):
            raise ValidationError("unused high bits must be zero")

    @property
    def n(self) -> int:
        return self.codes.shape[0]

    @property
    def words_per_code(self) -> int:
        return self.codes.shape[1]


def _random_rotation(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def _signs(values: np.ndarray) -> np.ndarray:
    """sgn with the 0 -> +1 tie rule."""
    return np.where(values >= 0.0, 1.0, -1.0)


def _check_rotation(rot: np.ndarray):
    dev = np.max(np.abs(rot.T @ rot - np.eye(rot.shape[0])))
    if dev > ORTHOGONALITY_TOL:
        raise RuntimeError(f"rotation drifted from orthogonality ({dev:.2e})")


def fit_itq(sample, bits: int, iters: int, seed: int,
            allow_pad: bool = True) -> HashModel:
    """Learn a hash model from a sample of feature rows.

    Center, PCA to `bits` dimensions, then refine a random orthogonal
    rotation for `iters` rounds of sign-snap / Procrustes updates. The
    recorded quantization loss sequence is non-increasing.
    """
    rows = _as_rows(sample)
    n, z = rows.shape
    if bits < 1:
        raise ValidationError("bits must be >= 1")
    if n < bits:
        raise ValidationError(f"need at least {bits} sample rows, got {n}")
    if iters < 0:
        raise ValidationError("iters must be >= 0")
    mean = rows.mean(axis=0)
    centered = rows - mean
    directions, _, padded = _principal_directions(centered, bits)
    if padded and not allow_pad:
        raise ValidationError(
            f"{bits} bits exceed the sample rank and padding is disabled"
        )
    n_padded = int(np.sum(np.all(directions == 0.0, axis=0)))
    projected = centered @ directions  # (n, bits)
    rotation = _random_rotation(bits, seed)
    losses = np.empty(iters + 1)
    for it in range(iters + 1):
        rotated = projected @ rotation
        corners = _signs(rotated)
        losses[it] = np.sum((corners - rotated) ** 2)
        if it == iters:
            break
        # orthogonal Procrustes: rotation maximizing tr(R^T V^T B)
        u, _, wt = np.linalg.svd(projected.T @ corners)
        rotation = u @ wt
        _check_rotation(rotation)
    drift = np.diff(losses)
    if drift.size and drift.max() > 1e-9 * max(losses[0], 1.0):
        raise RuntimeError("quantization loss increased during refinement")
    return HashModel(
        mean=mean,
        projection=directions @ rotation,
        bits=bits,
        padded_dims=n_padded,
        losses=losses,
    )


def encode(model: HashModel, X) -> CodeBook:
    """Pack sign bits of the projected rows; bit b set iff projection >= 0."""
    rows = _as_rows(X)
    if rows.shape[1] != model.z:
        raise ValidationError(
            f"feature dimension {rows.shape[1]} does not match model ({model.z})"
        )
    projected = (rows - model.mean) @ model.projection
    bits = (projected >= 0.0)
    words = -(-model.bits // 64)
    codes = np.zeros((rows.shape[0], words), dtype=np.uint64)
    for b in range(model.bits):
        codes[:, b // 64] |= bits[:, b].astype(np.uint64) << np.uint64(b % 64)
    return CodeBook(codes=codes, bits=model.bits)


def hamming_distances(codes: CodeBook, query: int,
                      candidates: np.ndarray) -> np.ndarray:
    """popcount(code_query XOR code_candidate) for each candidate index."""
    diff = codes.codes[candidates] ^ codes.codes[query]
    return np.bitwise_count(diff).sum(axis=1).astype(np.int64)


def _window_candidates(n: int, query: int, window: SpatialWindow | None) -> np.ndarray:
    if window is None:
        idx = np.arange(n, dtype=np.int64)
        return idx[idx != query]
    if window.width * window.height != n:
        raise ValidationError("window dimensions do not match element count")
    qy, qx = divmod(query, window.width)
    y0, y1 = max(0, qy - window.radius), min(window.height - 1, qy + window.radius)
    x0, x1 = max(0, qx - window.radius), min(window.width - 1, qx + window.radius)
    ys = np.arange(y0, y1 + 1, dtype=np.int64)
    xs = np.arange(x0, x1 + 1, dtype=np.int64)
    idx = (ys[:, None] * window.width + xs[None, :]).ravel()
    return idx[idx != query]


def _select_k(candidates: np.ndarray, dist: np.ndarray, K: int) -> np.ndarray:
    if K < 1:
        raise ValidationError("K must be >= 1")
    if K > candidates.size:
        warnings.warn(
            f"K={K} exceeds the {candidates.size} available candidates; "
            "returning the whole pool",
            stacklevel=3,
        )
        K = candidates.size
    order = np.lexsort((candidates, dist))
    return candidates[order[:K]]


def knn_hamming(codes: CodeBook, query: int, K: int,
                window: SpatialWindow | None = None) -> np.ndarray:
    """K nearest candidates by Hamming distance; ties broken by lower index."""
    if not 0 <= query < codes.n:
        raise ValidationError("query index out of range")
    candidates = _window_candidates(codes.n, query, window)
    return _select_k(candidates, hamming_distances(codes, query, candidates), K)


def knn_exhaustive(X, query: int, K: int,
                   window: SpatialWindow | None = None) -> np.ndarray:
    """Exact Euclidean k-NN over feature rows; same tie rule as knn_hamming."""
    rows = _as_rows(X)
    if not 0 <= query < rows.shape[0]:
        raise ValidationError("query index out of range")
    candidates = _window_candidates(rows.shape[0], query, window)
    diff = rows[candidates] - rows[query]
    dist = np.einsum("ij,ij->i", diff, diff)
    return _select_k(candidates, dist, K)


def save_hash_model(model: HashModel, path):
    """Write the ITQ1 binary format (little-endian f64 mean + projection)."""
    with open(path, "wb") as fh:
        fh.write(ITQ_MAGIC)
        fh.write(struct.pack("<II", model.z, model.bits))
        fh.write(model.mean.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(model.projection, dtype="<f8").tobytes())


def load_hash_model(path) -> HashModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != ITQ_MAGIC:
        raise ValidationError(f"{path}: not an ITQ1 model file")
    z, bits = struct.unpack("<II", blob[4:12])
    expected = 12 + 8 * z + 8 * z * bits
    if len(blob) != expected:
        raise ValidationError(f"{path}: ITQ1 body has wrong length")
    mean = np.frombuffer(blob, dtype="<f8", count=z, offset=12).astype(np.float64)
    proj = np.frombuffer(blob, dtype="<f8", count=z * bits, offset=12 + 8 * z)
    return HashModel(mean=mean, projection=proj.reshape(z, bits).astype(np.float64),
                     bits=bits)
