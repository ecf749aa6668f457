"""Dense conv5 feature extraction from a VGG16 trunk.

Images resize to a fixed target (default 640x480) and pass through the VGG16
convolutional stack truncated after the selected conv5 ReLU, giving an
H/16 x W/16 x 512 feature map. Weights come from a checkpoint when supplied;
otherwise the trunk is seeded randomly, which is sufficient for format and
parity testing.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision import models

# Slice index just past the ReLU following each conv5 block layer.
LAYER_SLICES = {"conv5_1": 26, "conv5_2": 28, "conv5_3": 30}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

DEFAULT_RESIZE = (640, 480)  # (width, height)


class Vgg16Trunk(torch.nn.Module):
    def __init__(self, layer: str = "conv5_3", checkpoint: str | None = None,
                 seed: int = 0):
        super().__init__()
        if layer not in LAYER_SLICES:
            raise ValueError(
                f"layer must be one of {sorted(LAYER_SLICES)}, got {layer!r}")
        torch.manual_seed(seed)
        vgg = models.vgg16(weights=None)
        self.features = vgg.features[:LAYER_SLICES[layer]]
        if checkpoint is not None:
            path = Path(checkpoint)
            if not path.exists():
                raise FileNotFoundError(f"weights not found: {path}")
            state = torch.load(path, map_location="cpu", weights_only=True)
            self.load_state_dict(state)
        self.eval()

    @torch.no_grad()
    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        return self.features(batch)


def load_image(path, resize: tuple[int, int] = DEFAULT_RESIZE) -> torch.Tensor:
    """PNG/JPEG -> normalized (1, 3, H, W) float tensor."""
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize(resize, Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(IMAGENET_MEAN, dtype=np.float32)) \
        / np.asarray(IMAGENET_STD, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1))[None, :]


@torch.no_grad()
def extract_feature_map(trunk: Vgg16Trunk, image_path,
                        resize: tuple[int, int] = DEFAULT_RESIZE) -> np.ndarray:
    """One image -> (H, W, D) float32 feature map."""
    out = trunk(load_image(image_path, resize))
    return out[0].permute(1, 2, 0).contiguous().numpy().astype(np.float32)
