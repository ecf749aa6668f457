"""Dense patch grids, per-patch descriptors, and the integral aggregation map.

The integral map stores prefix sums of unprojected 1x1 VLAD aggregates, so a
patch of any size is recovered with four-corner arithmetic before the
(nonlinear) projection is applied. Building it costs exactly H*W
soft-assignment evaluations no matter how many scales are extracted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from patchrank.types import FeatureMap, PatchConfig, VladModel
from patchrank.vlad import project_batch, soft_assign_batch


@dataclass(frozen=True)
class PatchGrid:
    """All top-left offsets of d_p x d_p patches at a fixed stride.

    centers holds (x, y) patch-center coordinates on the feature grid;
    even sizes give half-integer centers.
    """

    patch_size: int
    stride: int
    rows: int
    cols: int
    top_lefts: np.ndarray  # (n_p, 2) int64 (row, col)
    centers: np.ndarray    # (n_p, 2) float64 (x, y)

    @property
    def count(self) -> int:
        return self.rows * self.cols


def grid_count(height: int, width: int, patch_size: int, stride: int) -> int:
    """Patch count floor((H-d)/s + 1) * floor((W-d)/s + 1) for square patches."""
    return (((height - patch_size) // stride + 1)
            * ((width - patch_size) // stride + 1))


def build_grid(height: int, width: int, patch_size: int, stride: int = 1) -> PatchGrid:
    if patch_size < 1 or stride < 1:
        raise ValueError("patch_size and stride must be positive")
    if patch_size > min(height, width):
        raise ValueError(
            f"patch size {patch_size} exceeds feature map {height}x{width}")
    row_offsets = np.arange(0, height - patch_size + 1, stride, dtype=np.int64)
    col_offsets = np.arange(0, width - patch_size + 1, stride, dtype=np.int64)
    rr, cc = np.meshgrid(row_offsets, col_offsets, indexing="ij")
    top_lefts = np.stack([rr.ravel(), cc.ravel()], axis=1)
    half = (patch_size - 1) / 2.0
    centers = np.stack(
        [top_lefts[:, 1] + half, top_lefts[:, 0] + half], axis=1).astype(np.float64)
    top_lefts.setflags(write=False)
    centers.setflags(write=False)
    return PatchGrid(
        patch_size=patch_size,
        stride=stride,
        rows=len(row_offsets),
        cols=len(col_offsets),
        top_lefts=top_lefts,
        centers=centers,
    )


@dataclass(frozen=True)
class PatchDescriptorSet:
    """Projected descriptors for every patch of one size, row-major patch order."""

    patch_size: int
    grid: PatchGrid
    descriptors: np.ndarray  # (n_p, D_proj) float32, unit-norm rows

    def __post_init__(self):
        if self.descriptors.shape[0] != self.grid.count:
            raise ValueError(
                f"{self.descriptors.shape[0]} descriptors for "
                f"{self.grid.count} grid positions")


@dataclass(frozen=True)
class IntegralFeatureMap:
    """(H+1, W+1, K, D) prefix sums of 1x1 raw VLAD aggregates (float64).

    Entry (i, j) is the sum of the 1x1 aggregates at all (i', j') with
    i' < i and j' < j; the first row and column are zero.
    """

    data: np.ndarray

    @property
    def height(self) -> int:
        return self.data.shape[0] - 1

    @property
    def width(self) -> int:
        return self.data.shape[1] - 1


def unit_raw_vlads(fmap: FeatureMap, model: VladModel) -> np.ndarray:
    """Raw 1x1 VLAD aggregate at every location: (H, W, K, D) float64."""
    h, w = fmap.height, fmap.width
    if fmap.depth != model.feature_dim:
        raise ValueError(
            f"feature depth {fmap.depth} != model dim {model.feature_dim}")
    feats = fmap.data.reshape(h * w, fmap.depth).astype(np.float64)
    assigns = soft_assign_batch(feats, model)  # (H*W, K)
    residuals = feats[:, None, :] - model.centers[None, :, :]  # (H*W, K, D)
    raw = assigns[:, :, None] * residuals
    return raw.reshape(h, w, model.num_clusters, model.feature_dim)


def build_integral(fmap: FeatureMap, model: VladModel) -> IntegralFeatureMap:
    raw = unit_raw_vlads(fmap, model)
    h, w, k, d = raw.shape
    integral = np.zeros((h + 1, w + 1, k, d), dtype=np.float64)
    np.cumsum(raw, axis=0, out=integral[1:, 1:])
    np.cumsum(integral[1:, 1:], axis=1, out=integral[1:, 1:])
    integral.setflags(write=False)
    return IntegralFeatureMap(data=integral)


def patch_raw_from_integral(
    integral: IntegralFeatureMap, top_left: tuple[int, int], patch_size: int
) -> np.ndarray:
    """Raw (K, D) aggregate of one patch via four-corner arithmetic."""
    r, c = int(top_left[0]), int(top_left[1])
    d = int(patch_size)
    if d < 1 or r < 0 or c < 0 or r + d > integral.height or c + d > integral.width:
        raise ValueError(
            f"patch (top_left={top_left}, size={patch_size}) outside "
            f"{integral.height}x{integral.width} map")
    grid = integral.data
    return grid[r + d, c + d] - grid[r, c + d] - grid[r + d, c] + grid[r, c]


def _all_patch_raws(
    integral: IntegralFeatureMap, grid: PatchGrid
) -> np.ndarray:
    # Vectorized four-corner arithmetic over the entire grid; equivalent to a
    # depth-wise [[1,-1],[-1,1]] kernel dilated by the patch size.
    d = grid.patch_size
    data = integral.data
    block = (data[d:, d:] - data[:-d, d:] - data[d:, :-d] + data[:-d, :-d])
    s = grid.stride
    block = block[::s, ::s][:grid.rows, :grid.cols]
    return block.reshape(grid.count, *data.shape[2:])


def extract_multiscale(
    fmap: FeatureMap,
    model: VladModel,
    cfg: PatchConfig,
    strategy: str = "vlad",
) -> list[PatchDescriptorSet]:
    """Per-size patch descriptor sets, one integral pass for all VLAD scales.

    average/max pooling variants skip the integral machinery and pool the raw
    feature windows directly.
    """
    for size in cfg.patch_sizes:
        if size > min(fmap.height, fmap.width):
            raise ValueError(
                f"patch size {size} exceeds feature map "
                f"{fmap.height}x{fmap.width}")
    if strategy == "vlad":
        return _extract_vlad(fmap, model, cfg)
    if strategy in ("average", "max"):
        return _extract_pooled(fmap, cfg, strategy)
    raise ValueError(f"unknown pooling strategy {strategy!r}")


def _extract_vlad(
    fmap: FeatureMap, model: VladModel, cfg: PatchConfig
) -> list[PatchDescriptorSet]:
    integral = build_integral(fmap, model)
    sets = []
    for size in cfg.patch_sizes:
        grid = build_grid(fmap.height, fmap.width, size, cfg.stride)
        raws = _all_patch_raws(integral, grid)
        descs = project_batch(raws, model).astype(np.float32)
        descs.setflags(write=False)
        sets.append(PatchDescriptorSet(patch_size=size, grid=grid, descriptors=descs))
    return sets


def _extract_pooled(
    fmap: FeatureMap, cfg: PatchConfig, strategy: str
) -> list[PatchDescriptorSet]:
    data = fmap.data.astype(np.float64)
    sets = []
    for size in cfg.patch_sizes:
        grid = build_grid(fmap.height, fmap.width, size, cfg.stride)
        windows = np.lib.stride_tricks.sliding_window_view(
            data, (size, size), axis=(0, 1))  # (H', W', D, size, size)
        s = cfg.stride
        windows = windows[::s, ::s][:grid.rows, :grid.cols]
        if strategy == "average":
            pooled = windows.mean(axis=(3, 4))
        else:
            pooled = windows.max(axis=(3, 4))
        pooled = pooled.reshape(grid.count, fmap.depth)
        norms = np.linalg.norm(pooled, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise ValueError(f"{strategy}-pooled descriptor is zero")
        descs = (pooled / norms).astype(np.float32)
        descs.setflags(write=False)
        sets.append(PatchDescriptorSet(patch_size=size, grid=grid, descriptors=descs))
    return sets
