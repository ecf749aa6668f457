from __future__ import annotations

import numpy as np
import pytest

from patchrank import vlad
from patchrank.patches import (
    build_grid,
    build_integral,
    extract_multiscale,
    grid_count,
    patch_raw_from_integral,
    unit_raw_vlads,
)
from patchrank.types import PatchConfig
from patchrank.vlad import project, vlad_aggregate

from conftest import random_fmap, random_model


def unit_raw_oracle(fmap, model):
    """Independent per-location 1x1 aggregates with their own softmax."""
    h, w = fmap.height, fmap.width
    k, d = model.num_clusters, model.feature_dim
    out = np.zeros((h, w, k, d))
    for r in range(h):
        for c in range(w):
            x = fmap.data[r, c].astype(np.float64)
            logits = model.assign_weights @ x + model.assign_bias
            e = np.exp(logits - logits.max())
            a = e / e.sum()
            out[r, c] = a[:, None] * (x[None, :] - model.centers)
    return out


def prefix_oracle(fmap, model):
    """O(H^2 W^2) literal prefix summation of the 1x1 aggregates."""
    unit = unit_raw_oracle(fmap, model)
    h, w = fmap.height, fmap.width
    k, d = model.num_clusters, model.feature_dim
    out = np.zeros((h + 1, w + 1, k, d))
    for i in range(h + 1):
        for j in range(w + 1):
            for r in range(i):
                for c in range(j):
                    out[i, j] += unit[r, c]
    return out


def patch_locations(top_left, size):
    r, c = top_left
    return [(r + dr, c + dc) for dr in range(size) for dc in range(size)]


class TestBuildGrid:
    @pytest.mark.parametrize("size,expected", [(5, 936), (2, 1131), (8, 759)])
    def test_conv5_grid_counts(self, size, expected):
        grid = build_grid(30, 40, size, 1)
        assert grid.count == expected
        assert grid_count(30, 40, size, 1) == expected

    def test_full_map_patch(self):
        grid = build_grid(7, 7, 7, 3)
        assert grid.count == 1
        np.testing.assert_array_equal(grid.top_lefts, [[0, 0]])

    def test_centers_follow_top_lefts(self):
        grid = build_grid(6, 6, 3, 2)
        # top-left (r, c) -> center (c + (d-1)/2, r + (d-1)/2)
        for (r, c), (x, y) in zip(grid.top_lefts, grid.centers):
            assert x == c + 1.0 and y == r + 1.0

    def test_even_size_half_integer_centers(self):
        grid = build_grid(4, 4, 2, 1)
        assert grid.centers[0, 0] == pytest.approx(0.5)
        assert grid.centers[0, 1] == pytest.approx(0.5)

    def test_stride_respected(self):
        grid = build_grid(10, 10, 3, 2)
        assert grid.rows == 4 and grid.cols == 4
        assert grid.count == 16

    def test_patch_larger_than_map_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            build_grid(4, 10, 5, 1)


class TestIntegral:
    def test_zero_first_row_and_column(self, rng):
        model = random_model(rng, k=2, d=3)
        integral = build_integral(random_fmap(rng, 3, 4, 3), model)
        np.testing.assert_array_equal(integral.data[0], 0.0)
        np.testing.assert_array_equal(integral.data[:, 0], 0.0)

    def test_total_prefix_equals_full_aggregate(self, rng):
        model = random_model(rng, k=2, d=3)
        fmap = random_fmap(rng, 4, 5, 3)
        integral = build_integral(fmap, model)
        locs = [(r, c) for r in range(4) for c in range(5)]
        np.testing.assert_allclose(
            integral.data[4, 5], vlad_aggregate(locs, fmap, model), atol=1e-9)

    def test_matches_brute_force_prefix_oracle(self, rng):
        model = random_model(rng, k=2, d=2)
        fmap = random_fmap(rng, 4, 5, 2)
        integral = build_integral(fmap, model)
        np.testing.assert_allclose(
            integral.data, prefix_oracle(fmap, model), atol=1e-9)

    def test_unit_raws_match_oracle(self, rng):
        model = random_model(rng, k=3, d=2)
        fmap = random_fmap(rng, 3, 3, 2)
        np.testing.assert_allclose(
            unit_raw_vlads(fmap, model), unit_raw_oracle(fmap, model),
            atol=1e-12)


class TestPatchFromIntegral:
    def test_whole_map_patch(self, rng):
        model = random_model(rng, k=2, d=2)
        fmap = random_fmap(rng, 4, 4, 2)
        integral = build_integral(fmap, model)
        np.testing.assert_array_equal(
            patch_raw_from_integral(integral, (0, 0), 4), integral.data[4, 4])

    def test_unit_patch_is_single_location_vlad(self, rng):
        model = random_model(rng, k=2, d=3)
        fmap = random_fmap(rng, 3, 4, 3)
        integral = build_integral(fmap, model)
        for r in range(3):
            for c in range(4):
                np.testing.assert_allclose(
                    patch_raw_from_integral(integral, (r, c), 1),
                    vlad_aggregate([(r, c)], fmap, model),
                    atol=1e-9)

    def test_all_offsets_and_sizes_match_direct(self, rng):
        model = random_model(rng, k=2, d=2)
        fmap = random_fmap(rng, 6, 6, 2)
        integral = build_integral(fmap, model)
        for size in range(1, 7):
            for r in range(6 - size + 1):
                for c in range(6 - size + 1):
                    direct = vlad_aggregate(
                        patch_locations((r, c), size), fmap, model)
                    from_integral = patch_raw_from_integral(
                        integral, (r, c), size)
                    err = np.linalg.norm(from_integral - direct)
                    assert err <= 1e-6 * max(np.linalg.norm(direct), 1e-30)

    def test_out_of_bounds_rejected(self, rng):
        model = random_model(rng, k=1, d=2)
        integral = build_integral(random_fmap(rng, 3, 3, 2), model)
        with pytest.raises(ValueError, match="outside"):
            patch_raw_from_integral(integral, (1, 1), 3)


class TestExtractMultiscale:
    def test_conv5_grid_single_size(self, rng):
        model = random_model(rng, k=2, d=4, proj_dim=6)
        fmap = random_fmap(rng, 30, 40, 4)
        sets = extract_multiscale(fmap, model, PatchConfig((5,), 1))
        assert len(sets) == 1
        assert sets[0].descriptors.shape == (936, 6)
        norms = np.linalg.norm(sets[0].descriptors, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)

    def test_three_scales_counts(self, rng):
        model = random_model(rng, k=1, d=3, proj_dim=3)
        fmap = random_fmap(rng, 30, 40, 3)
        sets = extract_multiscale(fmap, model, PatchConfig((2, 5, 8), 1))
        assert [s.descriptors.shape[0] for s in sets] == [1131, 936, 759]

    def test_matches_direct_path_on_tiny_map(self, rng):
        model = random_model(rng, k=2, d=3, proj_dim=4)
        fmap = random_fmap(rng, 3, 3, 3)
        sets = extract_multiscale(fmap, model, PatchConfig((1, 2, 3), 1))
        for s in sets:
            for i, (r, c) in enumerate(s.grid.top_lefts):
                direct = project(
                    vlad_aggregate(
                        patch_locations((r, c), s.patch_size), fmap, model),
                    model)
                np.testing.assert_allclose(
                    s.descriptors[i], direct, atol=1e-5)

    def test_integral_vs_direct_random_maps(self, rng):
        for _ in range(5):
            h = int(rng.integers(4, 17))
            w = int(rng.integers(4, 17))
            model = random_model(rng, k=2, d=3, proj_dim=5)
            fmap = random_fmap(rng, h, w, 3)
            sizes = sorted(set(int(s) for s in
                               rng.integers(1, min(h, w) + 1, size=3)))
            sets = extract_multiscale(fmap, model, PatchConfig(tuple(sizes), 1))
            for s in sets:
                pick = rng.integers(0, s.grid.count, size=min(5, s.grid.count))
                for i in pick:
                    r, c = s.grid.top_lefts[i]
                    direct = project(
                        vlad_aggregate(
                            patch_locations((r, c), s.patch_size), fmap, model),
                        model)
                    np.testing.assert_allclose(
                        s.descriptors[i], direct, atol=1e-5)

    def test_integral_path_assignment_economy(self, rng):
        model = random_model(rng, k=2, d=3, proj_dim=4)
        h, w = 10, 12
        fmap = random_fmap(rng, h, w, 3)
        cfg = PatchConfig((2, 5, 8), 1)

        vlad.reset_assign_eval_count()
        extract_multiscale(fmap, model, cfg)
        integral_evals = vlad.assign_eval_count()
        assert integral_evals == h * w

        vlad.reset_assign_eval_count()
        for size in cfg.patch_sizes:
            grid = build_grid(h, w, size, cfg.stride)
            for (r, c) in grid.top_lefts:
                vlad_aggregate(patch_locations((r, c), size), fmap, model)
        naive_evals = vlad.assign_eval_count()
        expected_naive = sum(
            grid_count(h, w, size, 1) * size * size for size in cfg.patch_sizes)
        assert naive_evals == expected_naive
        assert naive_evals / integral_evals == expected_naive / (h * w)

    def test_pooled_strategies_match_window_reduction(self, rng):
        fmap = random_fmap(rng, 5, 6, 3)
        model = random_model(rng, k=1, d=3, proj_dim=3)
        for strategy, reducer in (("average", np.mean), ("max", np.max)):
            sets = extract_multiscale(
                fmap, model, PatchConfig((2,), 1), strategy=strategy)
            s = sets[0]
            for i, (r, c) in enumerate(s.grid.top_lefts):
                window = fmap.data[r:r + 2, c:c + 2].astype(np.float64)
                pooled = reducer(window.reshape(4, 3), axis=0)
                pooled = pooled / np.linalg.norm(pooled)
                np.testing.assert_allclose(s.descriptors[i], pooled, atol=1e-6)

    def test_oversized_patch_rejected(self, rng):
        model = random_model(rng, k=1, d=2)
        with pytest.raises(ValueError, match="exceeds"):
            extract_multiscale(
                random_fmap(rng, 4, 4, 2), model, PatchConfig((6,), 1))
