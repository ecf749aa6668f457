from __future__ import annotations

import numpy as np
import pytest

from patchrank.types import (
    DatasetManifest,
    FeatureMap,
    ImageEntry,
    PatchConfig,
    Pose,
    ToleranceSpec,
    validate_model,
)

from conftest import random_model


class TestFeatureMap:
    def test_accepts_valid_tensor(self, rng):
        fmap = FeatureMap(rng.normal(size=(4, 5, 3)).astype(np.float32), "a")
        assert (fmap.height, fmap.width, fmap.depth) == (4, 5, 3)
        assert fmap.data.dtype == np.float32

    def test_rejects_wrong_rank(self, rng):
        with pytest.raises(ValueError, match="must be"):
            FeatureMap(rng.normal(size=(4, 5)), "a")

    def test_rejects_nan(self, rng):
        data = rng.normal(size=(2, 2, 2))
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            FeatureMap(data, "a")

    def test_rejects_empty_axis(self):
        with pytest.raises(ValueError):
            FeatureMap(np.zeros((0, 3, 3)), "a")

    def test_data_is_readonly(self, rng):
        fmap = FeatureMap(rng.normal(size=(2, 2, 2)), "a")
        with pytest.raises(ValueError):
            fmap.data[0, 0, 0] = 1.0


class TestVladModel:
    def test_wellformed_model_passes(self, rng):
        model = random_model(rng, k=16, d=32, proj_dim=64)
        assert validate_model(model) == []

    def test_basis_row_mismatch_reported(self, rng):
        model = random_model(rng, k=2, d=3)
        bad = type(model)(
            centers=model.centers,
            assign_weights=model.assign_weights,
            assign_bias=model.assign_bias,
            pca_mean=model.pca_mean,
            pca_basis=model.pca_basis,
            pca_whiten=model.pca_whiten[:-1],
        )
        assert any("pca_whiten" in p for p in validate_model(bad))

    def test_nan_center_reported(self, rng):
        model = random_model(rng, k=2, d=3)
        centers = model.centers.copy()
        centers[0, 0] = np.nan
        bad = type(model)(
            centers=centers,
            assign_weights=model.assign_weights,
            assign_bias=model.assign_bias,
            pca_mean=model.pca_mean,
            pca_basis=model.pca_basis,
            pca_whiten=model.pca_whiten,
        )
        assert any("centers" in p and "non-finite" in p for p in validate_model(bad))

    def test_oversized_projection_reported(self, rng):
        model = random_model(rng, k=2, d=2)
        bad = type(model)(
            centers=model.centers,
            assign_weights=model.assign_weights,
            assign_bias=model.assign_bias,
            pca_mean=model.pca_mean,
            pca_basis=np.vstack([model.pca_basis, model.pca_basis]),
            pca_whiten=np.concatenate([model.pca_whiten, model.pca_whiten]),
        )
        assert any("outside" in p for p in validate_model(bad))

    def test_truncated_keeps_leading_components(self, rng):
        model = random_model(rng, k=2, d=4, proj_dim=6)
        small = model.truncated(3)
        assert small.proj_dim == 3
        np.testing.assert_array_equal(small.pca_basis, model.pca_basis[:3])
        np.testing.assert_array_equal(small.pca_whiten, model.pca_whiten[:3])
        assert model.truncated(6) is model
        with pytest.raises(ValueError):
            model.truncated(7)


class TestPatchConfig:
    def test_defaults_to_uniform_weights(self):
        cfg = PatchConfig(patch_sizes=(2, 5, 8), stride=1)
        assert cfg.fusion_weights == (1 / 3, 1 / 3, 1 / 3)

    def test_paper_style_weights_accepted(self):
        cfg = PatchConfig((2, 5, 8), 1, (0.45, 0.15, 0.4))
        assert abs(sum(cfg.fusion_weights) - 1.0) <= 1e-9

    def test_rejects_nonconvex_weights(self):
        with pytest.raises(ValueError, match="sum to 1"):
            PatchConfig((2, 5), 1, (0.9, 0.2))
        with pytest.raises(ValueError, match="nonnegative"):
            PatchConfig((2, 5), 1, (1.5, -0.5))

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            PatchConfig((0, 5), 1)
        with pytest.raises(ValueError):
            PatchConfig((5,), 0)


class TestPose:
    def test_translation_error(self):
        a = Pose((0.0, 0.0, 0.0))
        b = Pose((3.0, 4.0, 0.0))
        assert a.translation_error(b) == pytest.approx(5.0)

    def test_orientation_error_right_angle(self):
        a = Pose((0, 0, 0), (1.0, 0.0, 0.0, 0.0))
        half = np.sin(np.pi / 4)
        b = Pose((0, 0, 0), (np.cos(np.pi / 4), 0.0, 0.0, half))
        assert a.orientation_error_deg(b) == pytest.approx(90.0, abs=1e-9)

    def test_identical_orientation_zero_error(self):
        q = np.array([0.3, 0.5, -0.2, 0.2])
        q = tuple(q / np.linalg.norm(q))
        assert Pose((0, 0, 0), q).orientation_error_deg(Pose((1, 1, 1), q)) \
            == pytest.approx(0.0, abs=1e-5)

    def test_rejects_non_unit_quaternion(self):
        with pytest.raises(ValueError, match="unit"):
            Pose((0, 0, 0), (2.0, 0.0, 0.0, 0.0))


class TestManifest:
    def test_rejects_duplicate_ids(self):
        tol = ToleranceSpec(kind="frame_window", frame_window=10)
        entries = (ImageEntry("a", "a.pvt"), ImageEntry("a", "b.pvt"))
        with pytest.raises(ValueError, match="duplicate"):
            DatasetManifest(references=entries, queries=(), tolerance=tol)

    def test_tolerance_validation(self):
        with pytest.raises(ValueError):
            ToleranceSpec(kind="radius", radius_m=-1.0)
        with pytest.raises(ValueError):
            ToleranceSpec(kind="nope")
        with pytest.raises(ValueError):
            ToleranceSpec(kind="pose_thresholds")
        spec = ToleranceSpec(
            kind="pose_thresholds",
            pose_thresholds=((0.25, 2.0), (0.5, 5.0), (5.0, 10.0)))
        assert spec.pose_thresholds[2] == (5.0, 10.0)
