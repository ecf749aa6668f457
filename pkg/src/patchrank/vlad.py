"""VLAD aggregation over feature-map locations, projection, and patch pooling.

All functions are pure; arithmetic runs in float64 regardless of input
storage dtype. A module-level counter tracks how many per-location
soft-assignment evaluations have been performed, so tests can verify the
integral extraction path's cost advantage.
"""

from __future__ import annotations

import numpy as np

from patchrank.types import FeatureMap, VladModel

ZERO_ROW_EPS = 1e-12

_assign_evals = 0


class DegeneratePatchError(ValueError):
    """Raised when a patch aggregate is identically zero and cannot be projected."""


def assign_eval_count() -> int:
    """Number of per-location soft-assignment evaluations since the last reset."""
    return _assign_evals


def reset_assign_eval_count() -> None:
    global _assign_evals
    _assign_evals = 0


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def soft_assign_batch(features: np.ndarray, model: VladModel) -> np.ndarray:
    """Soft-assignment weights for a batch of features; rows sum to 1.

    features: (N, D) -> (N, K), computed as softmax(assign_weights @ x + bias).
    """
    global _assign_evals
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != model.feature_dim:
        raise ValueError(
            f"features must be (N, {model.feature_dim}), got shape {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise ValueError("features contain non-finite values")
    logits = feats @ model.assign_weights.T + model.assign_bias
    _assign_evals += feats.shape[0]
    return _softmax_rows(logits)


def soft_assign(feature: np.ndarray, model: VladModel) -> np.ndarray:
    """Soft-assignment weight vector (K,) for a single D-vector."""
    feat = np.asarray(feature, dtype=np.float64).reshape(-1)
    if feat.shape[0] != model.feature_dim:
        raise ValueError(
            f"feature dim {feat.shape[0]} != model dim {model.feature_dim}")
    return soft_assign_batch(feat[None, :], model)[0]


def vlad_aggregate_features(features: np.ndarray, model: VladModel) -> np.ndarray:
    """Aggregate an (N, D) feature set into a raw (K, D) VLAD matrix.

    Entry (k, j) is the assignment-weighted sum of residuals
    sum_i a_k(x_i) * (x_i[j] - centers[k, j]).
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"features must be (N, D), got shape {feats.shape}")
    if feats.shape[0] == 0:
        raise ValueError("cannot aggregate an empty feature set")
    assigns = soft_assign_batch(feats, model)  # (N, K)
    # sum_i a_ik * (x_i - c_k) = A^T X - diag(A^T 1) C
    raw = assigns.T @ feats
    raw -= assigns.sum(axis=0)[:, None] * model.centers
    return raw


def vlad_aggregate(
    locations, fmap: FeatureMap, model: VladModel
) -> np.ndarray:
    """Raw (K, D) VLAD aggregate over the given (row, col) feature-map locations.

    Locations are sorted row-major before accumulation so the result is
    independent of input order down to float64 determinism.
    """
    locs = np.asarray(list(locations), dtype=np.int64).reshape(-1, 2)
    if locs.shape[0] == 0:
        raise ValueError("location list is empty")
    h, w = fmap.height, fmap.width
    if (locs < 0).any() or (locs[:, 0] >= h).any() or (locs[:, 1] >= w).any():
        bad = locs[((locs < 0).any(axis=1))
                   | (locs[:, 0] >= h) | (locs[:, 1] >= w)][0]
        raise ValueError(f"location {tuple(bad)} outside {h}x{w} feature map")
    if fmap.depth != model.feature_dim:
        raise ValueError(
            f"feature depth {fmap.depth} != model dim {model.feature_dim}")
    order = np.lexsort((locs[:, 1], locs[:, 0]))
    locs = locs[order]
    feats = fmap.data[locs[:, 0], locs[:, 1], :]
    return vlad_aggregate_features(feats, model)


def project(raw: np.ndarray, model: VladModel) -> np.ndarray:
    """Project a raw (K, D) VLAD matrix to a unit-norm (D_proj,) descriptor.

    Pipeline: per-row (intra) L2 normalization, row-major flatten, whole-vector
    L2 normalization, PCA (subtract mean, multiply basis, scale by whitening),
    final L2 normalization. Rows with norm below ZERO_ROW_EPS pass through as
    zeros; an all-zero input raises DegeneratePatchError.
    """
    return project_batch(np.asarray(raw)[None, ...], model)[0]


def project_batch(raws: np.ndarray, model: VladModel) -> np.ndarray:
    """Vectorized `project` over a stack of raw matrices: (N, K, D) -> (N, D_proj)."""
    k, d = model.num_clusters, model.feature_dim
    raws = np.asarray(raws, dtype=np.float64)
    if raws.ndim != 3 or raws.shape[1:] != (k, d):
        raise ValueError(
            f"raw stack must be (N, {k}, {d}), got shape {raws.shape}")
    row_norms = np.linalg.norm(raws, axis=2)  # (N, K)
    if np.any(np.all(row_norms < ZERO_ROW_EPS, axis=1)):
        raise DegeneratePatchError("all-zero raw VLAD matrix")
    safe = np.where(row_norms < ZERO_ROW_EPS, 1.0, row_norms)
    intra = raws / safe[:, :, None]
    flat = intra.reshape(raws.shape[0], k * d)
    flat = flat / np.linalg.norm(flat, axis=1, keepdims=True)
    proj = (flat - model.pca_mean) @ model.pca_basis.T
    proj *= model.pca_whiten
    norms = np.linalg.norm(proj, axis=1)
    if np.any(norms < ZERO_ROW_EPS):
        raise DegeneratePatchError("projection annihilated the descriptor")
    return proj / norms[:, None]


def pool_patch(patch_features: np.ndarray, strategy: str, model: VladModel) -> np.ndarray:
    """Pool an (N, D) set of patch features into one unit-norm descriptor.

    vlad:    VLAD aggregation followed by the projection layer (main path).
    average: elementwise mean, L2-normalized.
    max:     elementwise max, L2-normalized.
    """
    feats = np.asarray(patch_features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("patch must be a non-empty (N, D) feature set")
    if strategy == "vlad":
        return project(vlad_aggregate_features(feats, model), model)
    if strategy == "average":
        pooled = feats.mean(axis=0)
    elif strategy == "max":
        pooled = feats.max(axis=0)
    else:
        raise ValueError(f"unknown pooling strategy {strategy!r}")
    norm = np.linalg.norm(pooled)
    if norm < ZERO_ROW_EPS:
        raise DegeneratePatchError(f"{strategy}-pooled descriptor is zero")
    return pooled / norm
