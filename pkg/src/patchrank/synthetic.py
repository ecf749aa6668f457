"""Deterministic synthetic datasets with planted ground truth.

Reference maps are built from a shared bank of tile features arranged at
random, so their global statistics overlap while their layouts differ.
Queries are planted by translating a source map on the feature grid (the
vacated strip is refilled with fresh tiles) plus per-channel noise. A
configurable fraction of references gains a location-shuffled twin: a
distractor with near-identical global content but scrambled geometry, which
confuses the global stage and is resolved by spatial re-ranking.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from patchrank import tensorio
from patchrank.types import (
    DatasetManifest,
    FeatureMap,
    ImageEntry,
    Pose,
    ToleranceSpec,
    VladModel,
)

FRAME_SPACING = 20  # frames between consecutive source places
TWIN_FRAME_OFFSET = 10  # twins sit between places, never inside a window


@dataclass(frozen=True)
class SyntheticSpec:
    num_references: int = 100
    num_queries: int = 50
    height: int = 14
    width: int = 14
    depth: int = 16
    clusters: int = 8
    proj_dim: int = 128
    tile_count: int = 8
    tile_mix: float = 1.0  # Dirichlet concentration of per-place tile mixes
    jitter: float = 0.05
    noise: float = 0.2
    shuffle_fraction: float = 0.4
    min_shift_x: int = 2
    min_shift_y: int = 2
    max_shift_x: int = 4
    max_shift_y: int = 3
    seed: int = 0

    def __post_init__(self):
        if min(self.num_references, self.num_queries) < 1:
            raise ValueError("need at least one reference and one query")
        if min(self.height, self.width, self.depth, self.clusters,
               self.proj_dim, self.tile_count) < 1:
            raise ValueError("dims must be positive")
        if self.proj_dim > self.clusters * self.depth:
            raise ValueError(
                f"proj_dim {self.proj_dim} exceeds K*D = "
                f"{self.clusters * self.depth}")
        if not 0.0 <= self.shuffle_fraction <= 1.0:
            raise ValueError("shuffle_fraction must be in [0, 1]")
        if self.max_shift_x >= self.width or self.max_shift_y >= self.height:
            raise ValueError("shift range must be smaller than the grid")
        if not (0 <= self.min_shift_x <= self.max_shift_x
                and 0 <= self.min_shift_y <= self.max_shift_y):
            raise ValueError("need 0 <= min shift <= max shift per axis")
        if self.max_shift_x == 0 and self.max_shift_y == 0:
            raise ValueError("at least one shift axis must be nonzero")

    @property
    def num_twins(self) -> int:
        twins = int(round(self.shuffle_fraction * self.num_references))
        return min(twins, self.num_references - 1)

    @property
    def num_sources(self) -> int:
        return self.num_references - self.num_twins


def random_vlad_model(rng: np.random.Generator, clusters: int, depth: int,
                      proj_dim: int, alpha: float = 1.0) -> VladModel:
    """Random model with proximity-driven assignments and orthonormal PCA.

    assign_weights = 2*alpha*centers with bias -alpha*|c|^2 makes the softmax
    score of cluster k proportional to exp(-alpha*|x - c_k|^2), so nearby
    clusters dominate just as in a trained aggregation layer.
    """
    kd = clusters * depth
    centers = rng.normal(size=(clusters, depth))
    q, _ = np.linalg.qr(rng.normal(size=(kd, kd)))
    return VladModel(
        centers=centers,
        assign_weights=2.0 * alpha * centers,
        assign_bias=-alpha * (centers**2).sum(axis=1),
        pca_mean=np.zeros(kd),
        pca_basis=q[:, :proj_dim].T,
        pca_whiten=np.ones(proj_dim),
    )


def _tile_map_features(rng, tile_bank, tile_map, jitter):
    feats = tile_bank[tile_map]
    if jitter > 0:
        feats = feats + rng.normal(0.0, jitter, size=feats.shape)
    return feats


def _sample_tile_map(rng, spec: SyntheticSpec, mix: np.ndarray) -> np.ndarray:
    flat = rng.choice(spec.tile_count, size=spec.height * spec.width, p=mix)
    return flat.reshape(spec.height, spec.width)


def _plant_query(rng, spec: SyntheticSpec, source: np.ndarray, mix: np.ndarray,
                 tile_bank: np.ndarray) -> tuple[np.ndarray, int, int]:
    """Translate the source on the grid; refill vacated cells, add noise."""
    h, w = spec.height, spec.width
    while True:
        dx = int(rng.integers(spec.min_shift_x, spec.max_shift_x + 1))
        dy = int(rng.integers(spec.min_shift_y, spec.max_shift_y + 1))
        dx *= -1 if rng.random() < 0.5 else 1
        dy *= -1 if rng.random() < 0.5 else 1
        if (dx, dy) != (0, 0):
            break
    fresh_tiles = _sample_tile_map(rng, spec, mix)
    query = _tile_map_features(rng, tile_bank, fresh_tiles, spec.jitter)
    # query[r, c] sees what the source saw at (r + dy, c + dx)
    src_r0, src_c0 = max(0, dy), max(0, dx)
    dst_r0, dst_c0 = max(0, -dy), max(0, -dx)
    rows, cols = h - abs(dy), w - abs(dx)
    query[dst_r0:dst_r0 + rows, dst_c0:dst_c0 + cols] = \
        source[src_r0:src_r0 + rows, src_c0:src_c0 + cols]
    if spec.noise > 0:
        query = query + rng.normal(0.0, spec.noise, size=query.shape)
    return query, dx, dy


def gen_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write maps, model, and manifest under out_dir; returns the manifest path.

    Byte-identical output for identical spec (including seed).
    """
    out = Path(out_dir)
    (out / "refs").mkdir(parents=True, exist_ok=True)
    (out / "queries").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    model = random_vlad_model(rng, spec.clusters, spec.depth, spec.proj_dim)
    tensorio.save_model(model, out / "model.json")

    tile_bank = rng.normal(size=(spec.tile_count, spec.depth))
    h, w = spec.height, spec.width

    sources = []
    mixes = []
    references: list[ImageEntry] = []
    for i in range(spec.num_sources):
        # Each place gets its own tile mix so global content differs across
        # places while every map still draws from the shared bank.
        mix = rng.dirichlet(np.full(spec.tile_count, spec.tile_mix))
        tile_map = _sample_tile_map(rng, spec, mix)
        feats = _tile_map_features(rng, tile_bank, tile_map, spec.jitter)
        sources.append(feats)
        mixes.append(mix)
        image_id = f"ref{i:04d}"
        rel = f"refs/{image_id}.pvt"
        tensorio.write_feature_map(
            FeatureMap(feats.astype(np.float32), image_id), out / rel)
        frame = i * FRAME_SPACING
        references.append(ImageEntry(
            image_id=image_id,
            path=rel,
            pose=Pose((float(frame), 0.0, 0.0)),
            frame_index=frame,
        ))

    for t in range(spec.num_twins):
        source = sources[t % spec.num_sources]
        perm = rng.permutation(h * w)
        shuffled = source.reshape(h * w, spec.depth)[perm].reshape(h, w, spec.depth)
        if spec.jitter > 0:
            shuffled = shuffled + rng.normal(0.0, spec.jitter, size=shuffled.shape)
        image_id = f"ref{t:04d}_shuf"
        rel = f"refs/{image_id}.pvt"
        tensorio.write_feature_map(
            FeatureMap(shuffled.astype(np.float32), image_id), out / rel)
        frame = (t % spec.num_sources) * FRAME_SPACING + TWIN_FRAME_OFFSET
        references.append(ImageEntry(
            image_id=image_id,
            path=rel,
            pose=Pose((float(frame), 0.0, 0.0)),
            frame_index=frame,
        ))

    queries: list[ImageEntry] = []
    for i in range(spec.num_queries):
        source_idx = i % spec.num_sources
        feats, _, _ = _plant_query(
            rng, spec, sources[source_idx], mixes[source_idx], tile_bank)
        image_id = f"qry{i:04d}"
        rel = f"queries/{image_id}.pvt"
        tensorio.write_feature_map(
            FeatureMap(feats.astype(np.float32), image_id), out / rel)
        frame = source_idx * FRAME_SPACING
        queries.append(ImageEntry(
            image_id=image_id,
            path=rel,
            pose=Pose((float(frame), 0.0, 0.0)),
            frame_index=frame,
        ))

    manifest = DatasetManifest(
        references=tuple(references),
        queries=tuple(queries),
        tolerance=ToleranceSpec(kind="frame_window", frame_window=0),
    )
    manifest_path = out / "manifest.json"
    tensorio.save_manifest(manifest, manifest_path)
    return manifest_path
