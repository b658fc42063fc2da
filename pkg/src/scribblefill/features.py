"""Per-pixel feature construction: color, coordinates, reduced feature planes.

Feature rows are laid out as (R, G, B, reduced planes..., x, y) with color and
coordinates normalized to [0, 1] and plane columns standardized, so that the
affinity kernel sees all parts on a comparable scale.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .config import EnrichConfig
from .errors import ValidationError

PCA_SAMPLE_LIMIT = 50_000

FPLN_MAGIC = b"FPLN"
FPLN_VERSION = 1


@dataclass(frozen=True)
class RasterImage:
    """8-bit RGB image; pixels held as a (height, width, 3) uint8 array."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError("image dimensions must be >= 1")
        if self.pixels.shape != (self.height, self.width, 3):
            raise ValidationError(
                f"pixel array shape {self.pixels.shape} does not match "
                f"{self.height}x{self.width}x3"
            )
        if self.pixels.dtype != np.uint8:
            raise ValidationError("pixels must be 8-bit per channel")

    @classmethod
    def from_array(cls, pixels) -> "RasterImage":
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValidationError("expected an (h, w, 3) array")
        return cls(width=pixels.shape[1], height=pixels.shape[0], pixels=pixels)

    @property
    def n(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class FeaturePlanes:
    """Stack of real-valued 2-D grids, all sharing one (height, width).

    `explained_variance` / `rank_deficient` are filled in by pca_reduce.
    """

    planes: np.ndarray  # (count, height, width) float
    explained_variance: np.ndarray | None = field(default=None, compare=False)
    rank_deficient: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.planes.ndim != 3 or self.planes.shape[0] == 0:
            raise ValidationError("planes must be a non-empty (count, h, w) stack")
        if self.planes.shape[1] < 1 or self.planes.shape[2] < 1:
            raise ValidationError("plane dimensions must be >= 1")
        if not np.all(np.isfinite(self.planes)):
            raise ValidationError("plane values must be finite")

    @property
    def count(self) -> int:
        return self.planes.shape[0]

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]


@dataclass(frozen=True)
class FeatureMatrix:
    """n x z per-pixel feature rows plus the column layout.

    Columns: [0:3) color, [3:3+plane_dims) reduced planes, [z-2:z) coords.
    """

    rows: np.ndarray  # (n, z) float64
    width: int
    height: int
    plane_dims: int = 0

    def __post_init__(self):
        n, z = self.rows.shape
        if n != self.width * self.height:
            raise ValidationError("row count does not match width*height")
        if z != 5 + self.plane_dims:
            raise ValidationError("feature dimension must be 5 + plane_dims")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def z(self) -> int:
        return self.rows.shape[1]

    @property
    def color_columns(self) -> slice:
        return slice(0, 3)

    @property
    def plane_columns(self) -> slice:
        return slice(3, 3 + self.plane_dims)

    @property
    def coord_columns(self) -> slice:
        return slice(self.z - 2, self.z)

    @property
    def feature_columns(self) -> slice:
        """Everything except the trailing (x, y) pair."""
        return slice(0, self.z - 2)


def _axis_lerp(src: int, dst: int):
    """Align-centers 1-D resampling: indices and blend fractions per output."""
    t = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    t = np.clip(t, 0.0, float(src - 1))
    lo = np.floor(t).astype(np.intp)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, t - lo


def bilinear_upsample(planes: FeaturePlanes, target_w: int, target_h: int) -> FeaturePlanes:
    """Resample every plane to (target_h, target_w) with clamped bilinear blending."""
    if target_w < 1 or target_h < 1:
        raise ValidationError("target dimensions must be >= 1")
    src_h, src_w = planes.height, planes.width
    if (src_w, src_h) == (target_w, target_h):
        return FeaturePlanes(planes.planes.copy())
    xlo, xhi, fx = _axis_lerp(src_w, target_w)
    ylo, yhi, fy = _axis_lerp(src_h, target_h)
    fx = fx[None, None, :]
    fy = fy[None, :, None]
    grids = planes.planes.astype(np.float64, copy=False)
    top_rows = grids[:, ylo]
    bot_rows = grids[:, yhi]
    top = top_rows[:, :, xlo] * (1 - fx) + top_rows[:, :, xhi] * fx
    bot = bot_rows[:, :, xlo] * (1 - fx) + bot_rows[:, :, xhi] * fx
    return FeaturePlanes(top * (1 - fy) + bot * fy)


def _principal_directions(vectors: np.ndarray, out_dims: int):
    """SVD-based principal directions of centered row vectors.

    Returns (directions (p, out_dims), explained variance (out_dims,), padded),
    zero-padding directions past the numerical rank.
    """
    m, p = vectors.shape
    _, svals, vt = np.linalg.svd(vectors, full_matrices=False)
    cutoff = svals[0] * max(m, p) * np.finfo(np.float64).eps if svals.size else 0.0
    rank = int(np.sum(svals > cutoff))
    keep = min(out_dims, rank)
    directions = np.zeros((p, out_dims))
    directions[:, :keep] = vt[:keep].T
    denom = max(m - 1, 1)
    variance = np.zeros(out_dims)
    variance[:keep] = (svals[:keep] ** 2) / denom
    # deterministic sign: largest-magnitude entry of each direction positive
    for d in range(keep):
        col = directions[:, d]
        if col[np.argmax(np.abs(col))] < 0:
            directions[:, d] = -col
    return directions, variance, out_dims > rank


def pca_reduce(
    planes: FeaturePlanes,
    out_dims: int,
    sample_limit: int = PCA_SAMPLE_LIMIT,
    seed: int = 0,
) -> FeaturePlanes:
    """Project each pixel's plane vector onto the top principal directions.

    Directions are estimated from a uniform random pixel sample of at most
    `sample_limit` when the image is larger than that. Rank-deficient inputs
    are padded with zero-variance components and flagged.
    """
    if out_dims < 1:
        raise ValidationError("out_dims must be >= 1")
    if out_dims > planes.count:
        raise ValidationError(
            f"out_dims {out_dims} exceeds plane count {planes.count}"
        )
    n = planes.width * planes.height
    vectors = planes.planes.reshape(planes.count, n).T  # (n, count)
    mean = vectors.mean(axis=0)
    centered = vectors - mean
    if n > sample_limit:
        idx = np.random.default_rng(seed).choice(n, size=sample_limit, replace=False)
        idx.sort()
        basis_rows = centered[idx]
    else:
        basis_rows = centered
    directions, variance, padded = _principal_directions(basis_rows, out_dims)
    projected = centered @ directions  # (n, out_dims)
    out = projected.T.reshape(out_dims, planes.height, planes.width)
    return FeaturePlanes(out, explained_variance=variance, rank_deficient=padded)


def build_feature_matrix(
    image: RasterImage,
    planes: FeaturePlanes | None,
    cfg: EnrichConfig,
) -> FeatureMatrix:
    """Assemble per-pixel rows (R, G, B, reduced planes..., x, y).

    Color is divided by 255; coordinates use the pixel-center convention
    (x + 0.5) / width. Plane columns are PCA-reduced to cfg.pca_dims and then
    standardized to zero mean / unit std (zero-variance columns map to 0).
    """
    n = image.n
    cols = [image.pixels.reshape(n, 3).astype(np.float64) / 255.0]
    plane_dims = 0
    if planes is not None:
        if (planes.width, planes.height) != (image.width, image.height):
            planes = bilinear_upsample(planes, image.width, image.height)
        if (planes.width, planes.height) != (image.width, image.height):
            raise ValidationError("feature planes do not match image dimensions")
        reduced = pca_reduce(planes, cfg.pca_dims, seed=cfg.seed)
        flat = reduced.planes.reshape(reduced.count, n).T
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        safe = np.where(std > 0, std, 1.0)
        scaled = (flat - mean) / safe
        scaled[:, std == 0] = 0.0
        cols.append(scaled)
        plane_dims = reduced.count
    xs = (np.arange(image.width, dtype=np.float64) + 0.5) / image.width
    ys = (np.arange(image.height, dtype=np.float64) + 0.5) / image.height
    grid_x = np.tile(xs, image.height)
    grid_y = np.repeat(ys, image.width)
    cols.append(np.column_stack([grid_x, grid_y]))
    rows = np.ascontiguousarray(np.hstack(cols))
    return FeatureMatrix(rows=rows, width=image.width, height=image.height,
                         plane_dims=plane_dims)


def write_feature_planes(planes: FeaturePlanes, path):
    """Write the FPLN binary format (little-endian f32 grids)."""
    header = FPLN_MAGIC + struct.pack(
        "<IIII", FPLN_VERSION, planes.width, planes.height, planes.count
    )
    body = planes.planes.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)


def read_feature_planes(path) -> FeaturePlanes:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != FPLN_MAGIC:
        raise ValidationError(f"{path}: not an FPLN feature-plane file")
    version, width, height, count = struct.unpack("<IIII", blob[4:20])
    if version != FPLN_VERSION:
        raise ValidationError(f"{path}: unsupported FPLN version {version}")
    if width < 1 or height < 1 or count < 1:
        raise ValidationError(f"{path}: invalid FPLN dimensions")
    expected = 20 + 4 * width * height * count
    if len(blob) < expected:
        raise ValidationError(f"{path}: truncated FPLN body")
    if len(blob) > expected:
        raise ValidationError(f"{path}: trailing bytes after FPLN body")
    grids = np.frombuffer(blob, dtype="<f4", offset=20).reshape(count, height, width)
    return FeaturePlanes(grids.astype(np.float64))
