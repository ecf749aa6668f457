from __future__ import annotations

import numpy as np
import pytest

from patchrank.matching import MatchSet
from patchrank.patches import build_grid
from patchrank.types import FeatureMap, VladModel


def random_model(rng: np.random.Generator, k: int, d: int,
                 proj_dim: int | None = None) -> VladModel:
    kd = k * d
    proj = proj_dim if proj_dim is not None else kd
    q, _ = np.linalg.qr(rng.normal(size=(kd, kd)))
    return VladModel(
        centers=rng.normal(size=(k, d)),
        assign_weights=rng.normal(size=(k, d)),
        assign_bias=rng.normal(size=k),
        pca_mean=0.01 * rng.normal(size=kd),
        pca_basis=q[:, :proj].T,
        pca_whiten=rng.uniform(0.5, 2.0, size=proj),
    )


def identity_model(k: int, d: int) -> VladModel:
    """Projection reduces to plain normalization: zero mean, identity basis."""
    return VladModel(
        centers=np.zeros((k, d)),
        assign_weights=np.zeros((k, d)),
        assign_bias=np.zeros(k),
        pca_mean=np.zeros(k * d),
        pca_basis=np.eye(k * d),
        pca_whiten=np.ones(k * d),
    )


def random_fmap(rng: np.random.Generator, h: int, w: int, d: int,
                image_id: str = "img") -> FeatureMap:
    return FeatureMap(rng.normal(size=(h, w, d)).astype(np.float32), image_id)


def make_match_set(ref_xy, query_xy, patch_size: int = 1) -> MatchSet:
    """MatchSet with identity pairing over explicit patch-center coordinates."""
    ref_xy = np.asarray(ref_xy, dtype=np.float64).reshape(-1, 2)
    query_xy = np.asarray(query_xy, dtype=np.float64).reshape(-1, 2)
    n = ref_xy.shape[0]
    pairs = np.stack([np.arange(n), np.arange(n)], axis=1)
    return MatchSet(
        pairs=pairs,
        distances=np.zeros(n),
        ref_coords=ref_xy,
        query_coords=query_xy,
        patch_size=patch_size,
    )


def grid_with_count(n_p: int):
    """A 1 x n_p patch grid, handy when a scorer only needs the patch count."""
    return build_grid(1, n_p, 1, 1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240811)
