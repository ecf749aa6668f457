"""Batch export of feature maps and aggregation models to engine formats."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from featbridge import formats
from featbridge.backbone import (
    DEFAULT_RESIZE,
    Vgg16Trunk,
    extract_feature_map,
)
from featbridge.netvlad import VladHead

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm")

FRAGMENT_SCHEMA = "patchrank-manifest-fragment-v1"


@dataclass(frozen=True)
class ExportJob:
    image_dir: str
    out_dir: str
    resize: tuple[int, int] = DEFAULT_RESIZE  # (width, height)
    layer: str = "conv5_3"
    checkpoint: str | None = None
    export_model: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.resize[0] < 1 or self.resize[1] < 1:
            raise ValueError(f"resize target must be positive, got {self.resize}")


def list_images(image_dir) -> list[Path]:
    root = Path(image_dir)
    if not root.is_dir():
        raise NotADirectoryError(f"image directory not found: {root}")
    paths = sorted(
        p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise FileNotFoundError(f"no images under {root}")
    return paths


def export_features(job: ExportJob) -> list[dict]:
    """One TensorFile per image plus a manifest fragment; returns the entries."""
    trunk = Vgg16Trunk(layer=job.layer, checkpoint=job.checkpoint,
                       seed=job.seed)
    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for path in list_images(job.image_dir):
        fmap = extract_feature_map(trunk, path, job.resize)
        rel = f"{path.stem}.pvt"
        formats.write_tensor(fmap, out / rel)
        entries.append({
            "image_id": path.stem,
            "path": rel,
            "dims": list(fmap.shape),
        })
    fragment = {"schema": FRAGMENT_SCHEMA, "entries": entries}
    (out / "fragment.json").write_text(
        json.dumps(fragment, indent=1, sort_keys=True))
    return entries


def export_model(
    head: VladHead,
    corpus_flats: torch.Tensor,
    proj_dim: int,
    out_path,
) -> None:
    """Fit whitened PCA on the corpus and write the engine model document."""
    head.fit_pca(corpus_flats, proj_dim)
    formats.save_model_file(head.export_tensors(), out_path)


def corpus_from_images(
    trunk: Vgg16Trunk, head: VladHead, image_dir,
    resize: tuple[int, int] = DEFAULT_RESIZE,
) -> torch.Tensor:
    """Normalized flat full-image VLAD vectors for every corpus image."""
    flats = []
    for path in list_images(image_dir):
        fmap = torch.from_numpy(extract_feature_map(trunk, path, resize))
        flats.append(head.normalized_flat(head.raw_vlad(fmap)))
    return torch.stack(flats)


def global_descriptors(
    trunk: Vgg16Trunk, head: VladHead, image_dir,
    resize: tuple[int, int] = DEFAULT_RESIZE,
) -> dict[str, np.ndarray]:
    """Framework-side projected descriptors, keyed by image id."""
    out = {}
    for path in list_images(image_dir):
        fmap = torch.from_numpy(extract_feature_map(trunk, path, resize))
        out[path.stem] = head.descriptor(fmap).numpy()
    return out
