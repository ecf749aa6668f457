"""Tensor and model containers byte-compatible with the retrieval engine.

The bridge deliberately re-implements the writers instead of importing the
engine: it must produce the exact published byte layout (magic "PVT1", u8
rank, little-endian u32 dims, dtype code 1 = float32, row-major payload)
so the two sides stay coupled only through files.
"""

from __future__ import annotations

import base64
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PVT1"
DTYPE_FLOAT32 = 1
MODEL_SCHEMA = "patchrank-model-v1"

MODEL_TENSORS = ("centers", "assign_weights", "assign_bias",
                 "pca_mean", "pca_basis", "pca_whiten")


def tensor_to_bytes(tensor: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    header = MAGIC + struct.pack("<B", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<B", DTYPE_FLOAT32)
    return header + arr.tobytes()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r}")
    rank = blob[4]
    dims = struct.unpack(f"<{rank}I", blob[5:5 + 4 * rank])
    if blob[5 + 4 * rank] != DTYPE_FLOAT32:
        raise ValueError("unsupported dtype code")
    payload = blob[6 + 4 * rank:]
    count = int(np.prod(dims))
    if len(payload) != 4 * count:
        raise ValueError(f"payload is {len(payload)} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def write_tensor(tensor: np.ndarray, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(tensor))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def save_model_file(tensors: dict[str, np.ndarray], path) -> None:
    """Write the engine's model document with inline base64 tensors."""
    missing = [n for n in MODEL_TENSORS if n not in tensors]
    if missing:
        raise ValueError(f"missing model tensors: {missing}")
    k, d = tensors["centers"].shape
    doc = {
        "schema": MODEL_SCHEMA,
        "num_clusters": int(k),
        "feature_dim": int(d),
        "proj_dim": int(tensors["pca_basis"].shape[0]),
        "tensors": {
            name: {"b64": base64.b64encode(
                tensor_to_bytes(tensors[name])).decode("ascii")}
            for name in MODEL_TENSORS
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_index_descriptors(path) -> tuple[list[str], np.ndarray]:
    """Read image ids and descriptor rows from an engine index file."""
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != "patchrank-index-v1":
        raise ValueError(f"unsupported index schema {doc.get('schema')!r}")
    descriptors = tensor_from_bytes(base64.b64decode(doc["descriptors_b64"]))
    return list(doc["image_ids"]), descriptors
