"""Pipeline configuration and its JSON file format."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .errors import ValidationError

# Python can't name a field "lambda"; the JSON file keeps the plain key.
_JSON_ALIASES = {"lambda": "lambda_"}
_FIELD_ALIASES = {v: k for k, v in _JSON_ALIASES.items()}


@dataclass(frozen=True)
class EnrichConfig:
    """Knobs for the enrichment pipeline.

    h1, h2           kernel bandwidths (feature part / pixel-distance part)
    K                neighbors per pixel in the affinity graph
    lambda_          markup confidence penalty ("lambda" in config files)
    tau              hash code length in bits
    itq_iters        rotation refinement iterations
    itq_sample       max pixels sampled for hash training and PCA
    seed             RNG seed for sampling and rotation init
    pca_dims         reduced dimension for external feature planes
    window_radius    Chebyshev radius (px) of the neighbor candidate window
    grid_edge_weight weight floor on 4-neighborhood edges (connectivity)
    threshold        noise-control cutoff on max confidence, in [0, 1]
    scale            optional downscale factor for the solve grid, in (0, 1]
    tol, maxiter     relative-residual tolerance / iteration cap for the solver
    gweights         optional per-dimension weights for the kernel's feature norm
    """

    h1: float = 0.25
    h2: float = 30.0
    K: int = 10
    lambda_: float = 100.0
    tau: int = 64
    itq_iters: int = 50
    itq_sample: int = 50_000
    seed: int = 0
    pca_dims: int = 6
    window_radius: int = 60
    grid_edge_weight: float = 1e-5
    threshold: float = 0.7
    scale: float = 1.0
    tol: float = 1e-6
    maxiter: int = 2000
    gweights: tuple[float, ...] | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (self.h1 > 0 and self.h2 > 0):
            raise ValidationError("bandwidths h1, h2 must be positive")
        if not 1 <= self.K <= 64:
            raise ValidationError(f"K must be in [1, 64], got {self.K}")
        if not self.lambda_ > 0:
            raise ValidationError("lambda must be positive")
        if not 8 <= self.tau <= 256:
            raise ValidationError(f"tau must be in [8, 256], got {self.tau}")
        if self.itq_iters < 0:
            raise ValidationError("itq_iters must be >= 0")
        if self.itq_sample < 1:
            raise ValidationError("itq_sample must be >= 1")
        if self.pca_dims < 1:
            raise ValidationError("pca_dims must be >= 1")
        if self.window_radius < 1:
            raise ValidationError("window_radius must be >= 1")
        if not self.grid_edge_weight > 0:
            raise ValidationError("grid_edge_weight must be positive")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValidationError("threshold must be in [0, 1]")
        if not 0.0 < self.scale <= 1.0:
            raise ValidationError("scale must be in (0, 1]")
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.maxiter < 1:
            raise ValidationError("maxiter must be >= 1")
        if self.gweights is not None:
            if len(self.gweights) == 0 or any(g < 0 for g in self.gweights):
                raise ValidationError("gweights must be nonnegative and non-empty")

    def replace(self, **changes) -> "EnrichConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            key = _FIELD_ALIASES.get(f.name, f.name)
            value = getattr(self, f.name)
            out[key] = list(value) if isinstance(value, tuple) else value
        return out


def config_from_dict(data: dict, base: EnrichConfig | None = None) -> EnrichConfig:
    """Build a config from a JSON-style dict; unknown keys are rejected."""
    if not isinstance(data, dict):
        raise ValidationError("config must be a JSON object")
    accepted = {
        _FIELD_ALIASES.get(f.name, f.name): f.name
        for f in dataclasses.fields(EnrichConfig)
    }
    kwargs = {}
    for key, value in data.items():
        if key not in accepted:
            raise ValidationError(f"unknown config key: {key!r}")
        if key == "gweights" and value is not None:
            value = tuple(float(g) for g in value)
        kwargs[accepted[key]] = value
    if base is not None:
        return base.replace(**kwargs)
    try:
        return EnrichConfig(**kwargs)
    except TypeError as exc:
        raise ValidationError(str(exc)) from exc


def load_config(path) -> EnrichConfig:
    """Read an EnrichConfig from a JSON file; missing keys take defaults."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def save_config(cfg: EnrichConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
        fh.write("\n")
