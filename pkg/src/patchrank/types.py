"""Shared tensor, model, and dataset-manifest types.

Everything here is immutable after construction and safe to share across
concurrent workers. Feature values are stored as float32; downstream
aggregation upcasts to float64 and stores results back as float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TOLERANCE_KINDS = ("frame_window", "radius", "radius_orientation", "pose_thresholds")


@dataclass(frozen=True)
class FeatureMap:
    """Dense H x W x D feature tensor for one image."""

    data: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"feature map must be (H, W, D), got shape {arr.shape}")
        if any(s < 1 for s in arr.shape):
            raise ValueError(f"feature map dims must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature map contains non-finite values")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def depth(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class VladModel:
    """Cluster centers, soft-assignment parameters, and PCA projection.

    centers, assign_weights: (K, D); assign_bias: (K,); pca_mean: (K*D,);
    pca_basis: (D_proj, K*D); pca_whiten: (D_proj,) strictly positive.
    """

    centers: np.ndarray
    assign_weights: np.ndarray
    assign_bias: np.ndarray
    pca_mean: np.ndarray
    pca_basis: np.ndarray
    pca_whiten: np.ndarray

    def __post_init__(self):
        for name in ("centers", "assign_weights", "assign_bias",
                     "pca_mean", "pca_basis", "pca_whiten"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_clusters(self) -> int:
        return self.centers.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centers.shape[1]

    @property
    def proj_dim(self) -> int:
        return self.pca_basis.shape[0]

    def truncated(self, proj_dim: int) -> "VladModel":
        """Keep only the leading `proj_dim` PCA components.

        Taking a prefix of the (ordered) principal components is itself a
        valid lower-dimensional PCA, so one model can serve every preset.
        """
        if not 1 <= proj_dim <= self.proj_dim:
            raise ValueError(
                f"proj_dim must be in [1, {self.proj_dim}], got {proj_dim}")
        if proj_dim == self.proj_dim:
            return self
        return VladModel(
            centers=self.centers,
            assign_weights=self.assign_weights,
            assign_bias=self.assign_bias,
            pca_mean=self.pca_mean,
            pca_basis=self.pca_basis[:proj_dim],
            pca_whiten=self.pca_whiten[:proj_dim],
        )


def validate_model(model: VladModel) -> list[str]:
    """Check dimension consistency and finiteness; returns violations (empty if ok)."""
    problems: list[str] = []
    if model.centers.ndim != 2:
        problems.append(f"centers must be 2-D, got ndim={model.centers.ndim}")
        return problems
    k, d = model.centers.shape
    if k < 1 or d < 1:
        problems.append(f"centers shape must be positive, got {(k, d)}")
    if model.assign_weights.shape != (k, d):
        problems.append(
            f"assign_weights shape {model.assign_weights.shape} != centers shape {(k, d)}")
    if model.assign_bias.shape != (k,):
        problems.append(f"assign_bias shape {model.assign_bias.shape} != ({k},)")
    if model.pca_mean.shape != (k * d,):
        problems.append(f"pca_mean shape {model.pca_mean.shape} != ({k * d},)")
    if model.pca_basis.ndim != 2 or model.pca_basis.shape[1] != k * d:
        problems.append(
            f"pca_basis shape {model.pca_basis.shape} incompatible with K*D={k * d}")
    else:
        p = model.pca_basis.shape[0]
        if p < 1 or p > k * d:
            problems.append(f"proj_dim {p} outside [1, {k * d}]")
        if model.pca_whiten.shape != (p,):
            problems.append(
                f"pca_whiten shape {model.pca_whiten.shape} != ({p},)")
        elif not np.all(model.pca_whiten > 0):
            problems.append("pca_whiten entries must be strictly positive")
    for name in ("centers", "assign_weights", "assign_bias",
                 "pca_mean", "pca_basis", "pca_whiten"):
        if not np.all(np.isfinite(getattr(model, name))):
            problems.append(f"{name} contains non-finite values")
    return problems


@dataclass(frozen=True)
class PatchConfig:
    """Square patch sizes, stride, and convex fusion weights."""

    patch_sizes: tuple[int, ...]
    stride: int = 1
    fusion_weights: tuple[float, ...] = ()

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.patch_sizes)
        if not sizes or any(s < 1 for s in sizes):
            raise ValueError(f"patch sizes must be positive, got {sizes}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        weights = tuple(float(w) for w in self.fusion_weights)
        if not weights:
            weights = tuple(1.0 / len(sizes) for _ in sizes)
        if len(weights) != len(sizes):
            raise ValueError(
                f"{len(weights)} fusion weights for {len(sizes)} patch sizes")
        if any(w < 0 for w in weights):
            raise ValueError(f"fusion weights must be nonnegative, got {weights}")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ValueError(f"fusion weights must sum to 1, got sum {sum(weights)!r}")
        object.__setattr__(self, "patch_sizes", sizes)
        object.__setattr__(self, "stride", int(self.stride))
        object.__setattr__(self, "fusion_weights", weights)


@dataclass(frozen=True)
class Pose:
    """Position in meters plus a unit orientation quaternion (w, x, y, z)."""

    position: tuple[float, float, float]
    quaternion: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        quat = tuple(float(v) for v in self.quaternion)
        if len(pos) != 3:
            raise ValueError(f"position must have 3 entries, got {len(pos)}")
        if len(quat) != 4:
            raise ValueError(f"quaternion must have 4 entries, got {len(quat)}")
        norm = float(np.linalg.norm(quat))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"quaternion must be unit-norm, got norm {norm}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "quaternion", quat)

    def translation_error(self, other: "Pose") -> float:
        a = np.asarray(self.position)
        b = np.asarray(other.position)
        return float(np.linalg.norm(a - b))

    def orientation_error_deg(self, other: "Pose") -> float:
        # Absolute angle of the relative rotation between two unit quaternions.
        dot = abs(float(np.dot(self.quaternion, other.quaternion)))
        return float(np.degrees(2.0 * np.arccos(min(1.0, dot))))


@dataclass(frozen=True)
class ToleranceSpec:
    """Ground-truth tolerance for deciding whether a retrieval is correct.

    kind selects the semantics:
      frame_window       -- |query frame - reference frame| <= frame_window
      radius             -- translation error <= radius_m
      radius_orientation -- translation <= radius_m and orientation <= orientation_deg
      pose_thresholds    -- per-(meters, degrees) buckets on the inherited pose
    """

    kind: str
    frame_window: int = 0
    radius_m: float = 0.0
    orientation_deg: float = 0.0
    pose_thresholds: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.kind not in TOLERANCE_KINDS:
            raise ValueError(f"unknown tolerance kind {self.kind!r}")
        if self.frame_window < 0 or self.radius_m < 0 or self.orientation_deg < 0:
            raise ValueError("tolerance fields must be non-negative")
        thresholds = tuple((float(m), float(d)) for m, d in self.pose_thresholds)
        if any(m < 0 or d < 0 for m, d in thresholds):
            raise ValueError("pose thresholds must be non-negative")
        if self.kind == "pose_thresholds" and not thresholds:
            raise ValueError("pose_thresholds kind requires at least one threshold")
        object.__setattr__(self, "pose_thresholds", thresholds)


@dataclass(frozen=True)
class ImageEntry:
    """One reference or query image: id, feature-map path, optional ground truth."""

    image_id: str
    path: str
    pose: Pose | None = None
    frame_index: int | None = None


@dataclass(frozen=True)
class DatasetManifest:
    references: tuple[ImageEntry, ...]
    queries: tuple[ImageEntry, ...]
    tolerance: ToleranceSpec
    schema: str = "patchrank-manifest-v1"

    def __post_init__(self):
        object.__setattr__(self, "references", tuple(self.references))
        object.__setattr__(self, "queries", tuple(self.queries))
        for label, entries in (("reference", self.references), ("query", self.queries)):
            ids = [e.image_id for e in entries]
            if len(set(ids)) != len(ids):
                dupes = sorted({i for i in ids if ids.count(i) > 1})
                raise ValueError(f"duplicate {label} image_ids: {dupes}")

    def reference_by_id(self) -> dict[str, ImageEntry]:
        return {e.image_id: e for e in self.references}
