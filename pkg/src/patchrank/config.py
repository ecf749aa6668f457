"""Run configuration: pipeline knobs, defaults, and named presets.

Defaults reproduce the reference cross-dataset configuration: square patch
sizes 2/5/8 fused with weights 0.45/0.15/0.4 at stride 1, homography scoring,
and a shortlist of 100 candidates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from patchrank.scoring import RansacParams
from patchrank.types import PatchConfig

CONFIG_SCHEMA = "patchrank-config-v1"

SCORERS = ("ransac", "rapid")
POOLINGS = ("vlad", "average", "max")


@dataclass(frozen=True)
class RunConfig:
    patch_sizes: tuple[int, ...] = (2, 5, 8)
    fusion_weights: tuple[float, ...] = (0.45, 0.15, 0.4)
    stride: int = 1
    scorer: str = "ransac"
    k: int = 100
    inlier_tolerance: float | None = None  # None: defaults to the stride
    max_iterations: int = 2000
    confidence: float = 0.999
    rng_seed: int = 0
    max_abs_displacement: bool = False
    pooling: str = "vlad"
    proj_dim: int | None = None  # None: use the model's full projection

    def __post_init__(self):
        # PatchConfig re-checks sizes/weights/stride coherence.
        self.patch_config()
        if self.scorer not in SCORERS:
            raise ValueError(f"scorer must be one of {SCORERS}, got {self.scorer!r}")
        if self.pooling not in POOLINGS:
            raise ValueError(
                f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.proj_dim is not None and self.proj_dim < 1:
            raise ValueError(f"proj_dim must be positive, got {self.proj_dim}")
        self.ransac_params()

    def patch_config(self) -> PatchConfig:
        return PatchConfig(
            patch_sizes=tuple(self.patch_sizes),
            stride=self.stride,
            fusion_weights=tuple(self.fusion_weights),
        )

    def ransac_params(self, rng_seed: int | None = None) -> RansacParams:
        tolerance = self.inlier_tolerance
        if tolerance is None:
            tolerance = float(self.stride)
        return RansacParams(
            inlier_tolerance=tolerance,
            max_iterations=self.max_iterations,
            confidence=self.confidence,
            rng_seed=self.rng_seed if rng_seed is None else rng_seed,
        )

    def to_dict(self) -> dict:
        return {
            "schema": CONFIG_SCHEMA,
            "patch_sizes": list(self.patch_sizes),
            "fusion_weights": list(self.fusion_weights),
            "stride": self.stride,
            "scorer": self.scorer,
            "k": self.k,
            "inlier_tolerance": self.inlier_tolerance,
            "max_iterations": self.max_iterations,
            "confidence": self.confidence,
            "rng_seed": self.rng_seed,
            "max_abs_displacement": self.max_abs_displacement,
            "pooling": self.pooling,
            "proj_dim": self.proj_dim,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        schema = data.get("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ValueError(f"unsupported config schema {schema!r}")
        kwargs = {}
        for key in ("stride", "scorer", "k", "inlier_tolerance", "max_iterations",
                    "confidence", "rng_seed", "max_abs_displacement", "pooling",
                    "proj_dim"):
            if key in data:
                kwargs[key] = data[key]
        if "patch_sizes" in data:
            kwargs["patch_sizes"] = tuple(data["patch_sizes"])
        if "fusion_weights" in data:
            kwargs["fusion_weights"] = tuple(data["fusion_weights"])
        return cls(**kwargs)


# Named presets trading recall for speed and storage; every knob can still be
# overridden. proj_dim asks for a leading-components truncation of the model.
PRESETS: dict[str, RunConfig] = {
    "performance": RunConfig(scorer="ransac", proj_dim=4096),
    "balanced": RunConfig(scorer="rapid", proj_dim=4096),
    "speed": RunConfig(
        scorer="rapid", patch_sizes=(5,), fusion_weights=(1.0,), proj_dim=512),
    "storage": RunConfig(scorer="rapid", proj_dim=128),
}


def preset(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    cfg = PRESETS[name]
    return replace(cfg, **overrides) if overrides else cfg
