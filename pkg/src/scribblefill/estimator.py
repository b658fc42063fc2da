"""Scikit-learn style estimator wrapping the full enrichment pipeline.

fit() depends only on the image: it builds the feature matrix, hash codes,
the nonlocal affinity graph, and the Laplacian. predict() then expands any
coarse annotation of that image into dense labels, so interactive callers
pay the graph cost once and the per-scribble cost is just the class solves.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._scan import batch_knn_hamming
from .config import EnrichConfig
from .errors import ValidationError
from .features import (FeaturePlanes, RasterImage, bilinear_upsample,
                       build_feature_matrix)
from .graph import build_affinity, laplacian
from .hashing import encode, fit_itq
from .labeling import (LabelMap, downscale_annotation, downscale_image,
                       noise_control, scaled_dims, upscale_field)
from .propagate import (CoarseAnnotation, ConfidenceField, SolverReport,
                        propagate_all)

_DEFAULTS = EnrichConfig()


class ScribbleEnricher(BaseEstimator):
    """Expand sparse scribbles on an image into dense per-class confidences.

    Parameters mirror EnrichConfig. Call fit(image, feature_planes=...)
    once per image, then predict_confidence / predict per annotation.

    Attributes after fit: feature_matrix_, hash_model_, codebook_,
    neighbors_, graph_, laplacian_, width_, height_.
    """

    def __init__(self, h1=_DEFAULTS.h1, h2=_DEFAULTS.h2, K=_DEFAULTS.K,
                 lambda_=_DEFAULTS.lambda_, tau=_DEFAULTS.tau,
                 itq_iters=_DEFAULTS.itq_iters, itq_sample=_DEFAULTS.itq_sample,
                 seed=_DEFAULTS.seed, pca_dims=_DEFAULTS.pca_dims,
                 window_radius=_DEFAULTS.window_radius,
                 grid_edge_weight=_DEFAULTS.grid_edge_weight,
                 threshold=_DEFAULTS.threshold, scale=_DEFAULTS.scale,
                 tol=_DEFAULTS.tol, maxiter=_DEFAULTS.maxiter,
                 gweights=_DEFAULTS.gweights):
        self.h1 = h1
        self.h2 = h2
        self.K = K
        self.lambda_ = lambda_
        self.tau = tau
        self.itq_iters = itq_iters
        self.itq_sample = itq_sample
        self.seed = seed
        self.pca_dims = pca_dims
        self.window_radius = window_radius
        self.grid_edge_weight = grid_edge_weight
        self.threshold = threshold
        self.scale = scale
        self.tol = tol
        self.maxiter = maxiter
        self.gweights = gweights

    @classmethod
    def from_config(cls, cfg: EnrichConfig) -> "ScribbleEnricher":
        params = {f: getattr(cfg, f) for f in cls()._get_param_names()}
        return cls(**params)

    def config(self) -> EnrichConfig:
        """Validated EnrichConfig snapshot of the current parameters."""
        return EnrichConfig(**self.get_params())

    def fit(self, image: RasterImage, feature_planes: FeaturePlanes | None = None):
        """Build features, hash codes, and the affinity graph for one image."""
        cfg = self.config()
        self.width_, self.height_ = image.width, image.height
        sw, sh = scaled_dims(image.width, image.height, cfg.scale)
        self.solve_width_, self.solve_height_ = sw, sh
        work = downscale_image(image, sw, sh)
        if feature_planes is not None and (feature_planes.width,
                                           feature_planes.height) != (sw, sh):
            feature_planes = bilinear_upsample(feature_planes, sw, sh)
        fm = build_feature_matrix(work, feature_planes, cfg)
        n = fm.n
        if n < 2:
            raise ValidationError("image must have at least 2 pixels")
        rng = np.random.default_rng(cfg.seed)
        if n > cfg.itq_sample:
            pick = rng.choice(n, size=cfg.itq_sample, replace=False)
            pick.sort()
            sample = fm.rows[pick]
        else:
            sample = fm.rows
        model = fit_itq(sample, cfg.tau, cfg.itq_iters, cfg.seed)
        codes = encode(model, fm.rows)
        k_eff = min(cfg.K, n - 1)
        neighbors, _ = batch_knn_hamming(codes.codes, k_eff, sw, sh,
                                         cfg.window_radius)
        graph_cfg = cfg if k_eff == cfg.K else cfg.replace(K=k_eff)
        self.feature_matrix_ = fm
        self.hash_model_ = model
        self.codebook_ = codes
        self.neighbors_ = neighbors
        self.graph_ = build_affinity(fm, neighbors, graph_cfg)
        self.laplacian_ = laplacian(self.graph_)
        return self

    def _scaled_annotation(self, ann: CoarseAnnotation) -> CoarseAnnotation:
        if (ann.width, ann.height) != (self.width_, self.height_):
            raise ValidationError(
                f"annotation is {ann.width}x{ann.height}, image is "
                f"{self.width_}x{self.height_}"
            )
        return downscale_annotation(ann, self.solve_width_, self.solve_height_)

    def predict_confidence(self, ann: CoarseAnnotation
                           ) -> tuple[ConfidenceField, SolverReport]:
        """Solve every class and return the native-resolution field."""
        check_is_fitted(self, "laplacian_")
        work = self._scaled_annotation(ann)
        field, report = propagate_all(self.laplacian_, work, self.lambda_,
                                      tol=self.tol, maxiter=self.maxiter)
        field = upscale_field(field, self.width_, self.height_)
        return field, report

    def predict(self, ann: CoarseAnnotation,
                threshold: float | None = None) -> LabelMap:
        """Dense label map after noise control at the given threshold."""
        field, _ = self.predict_confidence(ann)
        t = self.threshold if threshold is None else threshold
        return noise_control(field, t)


def bilinear_to(planes: FeaturePlanes, width: int, height: int) -> FeaturePlanes:
    from .features import bilinear_upsample

    if (planes.width, planes.height) == (width, height):
        return planes
    return bilinear_upsample(planes, width, height)


def enrich(image: RasterImage, ann: CoarseAnnotation,
           planes: FeaturePlanes | None = None,
           cfg: EnrichConfig | None = None
           ) -> tuple[ConfidenceField, LabelMap, SolverReport]:
    """One-shot pipeline: fit on the image, solve the annotation, threshold."""
    cfg = cfg or EnrichConfig()
    est = ScribbleEnricher.from_config(cfg).fit(image, planes)
    field, report = est.predict_confidence(ann)
    labels = noise_control(field, cfg.threshold)
    return field, labels, report
