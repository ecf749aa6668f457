"""Exhaustive descriptor comparison and mutual-nearest-neighbor extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from patchrank.patches import PatchDescriptorSet


@dataclass(frozen=True)
class MatchSet:
    """Mutual-NN correspondences between a reference and a query descriptor set.

    pairs[:, 0] indexes the reference set, pairs[:, 1] the query set; each
    index appears at most once. Coordinates are the matched patch centers on
    the feature grid, carried along so scorers need no further lookups.
    """

    pairs: np.ndarray        # (n, 2) int64
    distances: np.ndarray    # (n,) float64
    ref_coords: np.ndarray   # (n, 2) float64 (x, y)
    query_coords: np.ndarray  # (n, 2) float64 (x, y)
    patch_size: int

    def __post_init__(self):
        n = self.pairs.shape[0]
        for name in ("distances", "ref_coords", "query_coords"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} length != number of pairs")

    def __len__(self) -> int:
        return self.pairs.shape[0]

    @property
    def displacements(self) -> np.ndarray:
        """(n, 2) reference-minus-query patch-center offsets (x_d, y_d)."""
        return self.ref_coords - self.query_coords


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix between the rows of two descriptor matrices.

    Uses the |a|^2 + |b|^2 - 2ab identity with clamping at zero; for
    unit-norm rows this reduces to sqrt(2 - 2 a.b).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(
            f"descriptor dims differ: {a.shape} vs {b.shape}")
    sq = (np.sum(a * a, axis=1)[:, None]
          + np.sum(b * b, axis=1)[None, :]
          - 2.0 * (a @ b.T))
    np.maximum(sq, 0.0, out=sq)
    return np.sqrt(sq)


def mutual_nn(ref_set: PatchDescriptorSet, query_set: PatchDescriptorSet) -> MatchSet:
    """Pairs (i, j) where i and j are each other's nearest neighbor.

    Argmin ties break toward the lowest index, making results reproducible
    when duplicated descriptors occur.
    """
    if ref_set.patch_size != query_set.patch_size:
        raise ValueError(
            f"cross-size matching not supported: {ref_set.patch_size} vs "
            f"{query_set.patch_size}")
    if ref_set.grid.count == 0 or query_set.grid.count == 0:
        raise ValueError("cannot match empty descriptor sets")
    dist = pairwise_distances(ref_set.descriptors, query_set.descriptors)
    nn_of_ref = dist.argmin(axis=1)   # best query for each reference
    nn_of_query = dist.argmin(axis=0)  # best reference for each query
    ref_idx = np.arange(dist.shape[0])
    mutual = nn_of_query[nn_of_ref] == ref_idx
    pairs = np.stack([ref_idx[mutual], nn_of_ref[mutual]], axis=1)
    return MatchSet(
        pairs=pairs,
        distances=dist[pairs[:, 0], pairs[:, 1]],
        ref_coords=ref_set.grid.centers[pairs[:, 0]],
        query_coords=query_set.grid.centers[pairs[:, 1]],
        patch_size=ref_set.patch_size,
    )
