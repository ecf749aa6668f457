"""Spatial consistency scoring of match sets and multi-scale score fusion.

Two scorers are provided: homography RANSAC (inlier fraction, slower, more
selective) and a rapid displacement-coherence score computed directly on the
matched patch offsets. Both normalize by the query grid's patch count so
scores are comparable across scales before fusion.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from patchrank.matching import MatchSet
from patchrank.patches import PatchGrid

_CHUNK = 256
_COLLINEAR_EPS = 1e-9


@dataclass(frozen=True)
class RansacParams:
    """Homography-RANSAC knobs; tolerance is in feature-grid units."""

    inlier_tolerance: float = 1.0
    max_iterations: int = 2000
    confidence: float = 0.999
    rng_seed: int = 0

    def __post_init__(self):
        if self.inlier_tolerance <= 0:
            raise ValueError("inlier_tolerance must be > 0")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must be in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class ScoredPair:
    """Per-scale and fused spatial scores for one query/candidate pair."""

    query_id: str
    candidate_id: str
    per_scale_scores: tuple[float, ...]
    fused_score: float
    per_scale_inliers: tuple[tuple[tuple[int, int], ...], ...] | None = None


def derive_seed(base_seed: int, *parts) -> int:
    """Stable 64-bit seed from a base seed and context strings.

    Gives every (query, candidate, patch size) scoring call its own
    deterministic PRNG so concurrent candidate evaluation stays reproducible.
    """
    text = "|".join([str(base_seed), *[str(p) for p in parts]])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _normalization(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Hartley conditioning: centroid to origin, mean distance sqrt(2).
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    mean_dist = np.sqrt((centered**2).sum(axis=1)).mean()
    scale = math.sqrt(2.0) / max(mean_dist, 1e-12)
    t = np.array([
        [scale, 0.0, -scale * centroid[0]],
        [0.0, scale, -scale * centroid[1]],
        [0.0, 0.0, 1.0],
    ])
    t_inv = np.array([
        [1.0 / scale, 0.0, centroid[0]],
        [0.0, 1.0 / scale, centroid[1]],
        [0.0, 0.0, 1.0],
    ])
    return t, t_inv


def _noncollinear(samples: np.ndarray) -> np.ndarray:
    # samples: (m, 4, 2); reject any sample whose 4 points contain 3 collinear.
    ok = np.ones(samples.shape[0], dtype=bool)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        u = samples[:, j] - samples[:, i]
        v = samples[:, k] - samples[:, i]
        area = np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
        ok &= area > _COLLINEAR_EPS
    return ok


def _dlt_batch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # src, dst: (m, 4, 2) conditioned points -> (m, 3, 3) homographies + validity.
    m = src.shape[0]
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    zeros = np.zeros_like(x)
    ones = np.ones_like(x)
    row_a = np.stack([x, y, ones, zeros, zeros, zeros, -u * x, -u * y, -u], axis=-1)
    row_b = np.stack([zeros, zeros, zeros, -x, -y, -ones, v * x, v * y, v], axis=-1)
    a = np.concatenate([row_a, row_b], axis=1)  # (m, 8, 9)
    _, _, vt = np.linalg.svd(a)
    h = vt[:, -1, :].reshape(m, 3, 3)
    valid = np.abs(h[:, 2, 2]) > 1e-12
    h = np.where(valid[:, None, None], h, np.eye(3))
    return h / h[:, 2:3, 2:3], valid


def _apply_batch(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    # h: (m, 3, 3), pts: (n, 2) -> (m, n, 2); w ~ 0 maps to inf coordinates.
    ph = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1)
    q = np.einsum("mij,nj->mni", h, ph)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = q[..., :2] / q[..., 2:3]
    return np.nan_to_num(out, nan=np.inf, posinf=np.inf, neginf=-np.inf)


def _inlier_matrix(
    h: np.ndarray, ref_pts: np.ndarray, query_pts: np.ndarray, tol: float
) -> np.ndarray:
    """Boolean (m, n) inlier decisions under symmetric transfer error."""
    with np.errstate(divide="ignore", invalid="ignore"):
        h_inv = np.linalg.inv(h)
    fwd = _apply_batch(h, ref_pts) - query_pts[None, :, :]
    bwd = _apply_batch(h_inv, query_pts) - ref_pts[None, :, :]
    with np.errstate(invalid="ignore", over="ignore"):
        err_sq = (fwd**2).sum(axis=2) + (bwd**2).sum(axis=2)
    err_sq = np.nan_to_num(err_sq, nan=np.inf)
    return err_sq <= tol * tol


def _adaptive_needed(inlier_ratio: float, confidence: float, cap: int) -> int:
    w4 = inlier_ratio**4
    if w4 >= 1.0:
        return 1
    if w4 <= 0.0:
        return cap
    denom = math.log1p(-w4)
    if denom >= 0.0:
        return cap
    return min(cap, int(math.ceil(math.log(1.0 - confidence) / denom)))


def ransac_score(
    matches: MatchSet,
    ref_grid: PatchGrid,
    query_grid: PatchGrid,
    params: RansacParams,
) -> tuple[float, np.ndarray]:
    """Best homography inlier count divided by the query grid's patch count.

    Repeated 4-point minimal samples with normalized DLT, adaptive iteration
    count capped at max_iterations. An inlier is a pair whose symmetric
    transfer error (root of summed forward and backward squared errors) is at
    most the tolerance. Fewer than four matches cannot constrain a
    homography, so they all count as inliers; the same fallback applies if
    every minimal sample was degenerate. Deterministic for a fixed seed;
    returns (score, inlier pair array).
    """
    n = len(matches)
    n_p = query_grid.count
    if n_p < 1:
        raise ValueError("query grid has no patches")
    if n == 0:
        return 0.0, matches.pairs.copy()
    if n < 4:
        return n / n_p, matches.pairs.copy()

    ref_pts = matches.ref_coords.astype(np.float64)
    query_pts = matches.query_coords.astype(np.float64)
    t_ref, _ = _normalization(ref_pts)
    t_query, t_query_inv = _normalization(query_pts)
    ref_norm = ref_pts * t_ref[0, 0] + t_ref[:2, 2]
    query_norm = query_pts * t_query[0, 0] + t_query[:2, 2]

    rng = np.random.default_rng(params.rng_seed)
    best_count = -1
    best_mask: np.ndarray | None = None
    needed = params.max_iterations
    done = 0
    while done < min(needed, params.max_iterations):
        chunk = min(_CHUNK, params.max_iterations - done)
        done += chunk
        # 4 distinct indices per iteration via order statistics of uniforms.
        keys = rng.random((chunk, n))
        samples = np.argpartition(keys, 3, axis=1)[:, :4]
        src = ref_norm[samples]
        dst = query_norm[samples]
        ok = _noncollinear(src) & _noncollinear(dst)
        if not ok.any():
            continue
        h_cond, valid = _dlt_batch(src[ok], dst[ok])
        if not valid.any():
            continue
        h = t_query_inv @ h_cond[valid] @ t_ref
        invertible = np.abs(np.linalg.det(h)) > 1e-12
        if not invertible.any():
            continue
        h = h[invertible]
        inliers = _inlier_matrix(h, ref_pts, query_pts, params.inlier_tolerance)
        counts = inliers.sum(axis=1)
        idx = int(np.argmax(counts))  # first maximum: deterministic tie-break
        if counts[idx] > best_count:
            best_count = int(counts[idx])
            best_mask = inliers[idx]
            needed = _adaptive_needed(
                best_count / n, params.confidence, params.max_iterations)

    if best_mask is None:
        # Every sample was collinear/singular; geometry cannot be verified.
        return n / n_p, matches.pairs.copy()
    return best_count / n_p, matches.pairs[best_mask].copy()


def rapid_spatial_score(
    matches: MatchSet, n_p: int, max_abs_displacement: bool = False
) -> float:
    """Displacement-coherence score of a match set, higher is better.

    For per-pair offsets x_d, y_d between matched patch centers, sums
    (|max x_d| - |x_d,i - mean(x_d)|)^2 + (same for y) over pairs and divides
    by n_p. The default takes the signed maximum then its absolute value,
    exactly as the scoring formula is written; max_abs_displacement=True uses
    max |x_d| instead, which also makes the score invariant to swapping the
    roles of the two images. A perfectly aligned set (all offsets zero)
    scores 0 by construction.
    """
    if n_p < 1:
        raise ValueError("n_p must be >= 1")
    if len(matches) == 0:
        return 0.0
    disp = matches.displacements
    total = 0.0
    for axis in (0, 1):
        d = disp[:, axis]
        peak = np.abs(d).max() if max_abs_displacement else abs(d.max())
        total += ((peak - np.abs(d - d.mean()))**2).sum()
    return float(total / n_p)


def fuse_scores(per_scale, weights) -> float:
    """Convex combination of per-scale spatial scores."""
    scores = np.asarray(per_scale, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if scores.shape != w.shape:
        raise ValueError(
            f"{scores.shape[0]} scores but {w.shape[0]} weights")
    if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
        raise ValueError(f"weights must be convex, got {weights}")
    return float(scores @ w)


def score_match_set(
    matches: MatchSet,
    ref_grid: PatchGrid,
    query_grid: PatchGrid,
    scorer: str,
    params: RansacParams,
    max_abs_displacement: bool = False,
) -> tuple[float, np.ndarray | None]:
    """Dispatch to the selected scorer; returns (score, inliers-or-None)."""
    if scorer == "ransac":
        return ransac_score(matches, ref_grid, query_grid, params)
    if scorer == "rapid":
        return rapid_spatial_score(
            matches, query_grid.count, max_abs_displacement), None
    raise ValueError(f"unknown scorer {scorer!r}")
