"""Bit-exact file formats: tensors, models, manifests, indexes, and results.

The tensor container is deliberately minimal: magic "PVT1", rank (u8), dims
(u32 little-endian each), a dtype code (1 = float32), then the row-major
little-endian payload. Structured documents (model, manifest, config,
index, results) are JSON with explicit schema tags; tensors embed as base64
of the same container bytes or as sibling file references.
"""

from __future__ import annotations

import base64
import json
import struct
from pathlib import Path

import numpy as np

from patchrank.config import RunConfig
from patchrank.types import (
    DatasetManifest,
    FeatureMap,
    ImageEntry,
    Pose,
    ToleranceSpec,
    VladModel,
    validate_model,
)

MAGIC = b"PVT1"
DTYPE_FLOAT32 = 1

MODEL_SCHEMA = "patchrank-model-v1"
MANIFEST_SCHEMA = "patchrank-manifest-v1"
INDEX_SCHEMA = "patchrank-index-v1"

MODEL_TENSORS = ("centers", "assign_weights", "assign_bias",
                 "pca_mean", "pca_basis", "pca_whiten")


class TensorFileError(ValueError):
    """Base class for tensor container violations."""


class BadMagicError(TensorFileError):
    pass


class TruncatedPayloadError(TensorFileError):
    pass


class UnsupportedDtypeError(TensorFileError):
    pass


def tensor_to_bytes(tensor: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    if arr.ndim < 1 or arr.ndim > 255:
        raise TensorFileError(f"rank {arr.ndim} outside [1, 255]")
    if any(s > 0xFFFFFFFF for s in arr.shape):
        raise TensorFileError(f"dimension too large for u32: {arr.shape}")
    header = MAGIC + struct.pack("<B", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<B", DTYPE_FLOAT32)
    return header + arr.tobytes()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 4:
        raise TruncatedPayloadError("file shorter than the magic header")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 5:
        raise TruncatedPayloadError("missing rank byte")
    rank = blob[4]
    if rank < 1:
        raise TensorFileError("rank must be >= 1")
    dims_end = 5 + 4 * rank
    if len(blob) < dims_end + 1:
        raise TruncatedPayloadError("truncated header")
    dims = struct.unpack(f"<{rank}I", blob[5:dims_end])
    dtype_code = blob[dims_end]
    if dtype_code != DTYPE_FLOAT32:
        raise UnsupportedDtypeError(f"unsupported dtype code {dtype_code}")
    count = 1
    for d in dims:
        count *= d
    payload = blob[dims_end + 1:]
    if len(payload) < 4 * count:
        raise TruncatedPayloadError(
            f"payload is {len(payload)} bytes, expected {4 * count}")
    if len(payload) > 4 * count:
        raise TensorFileError(
            f"{len(payload) - 4 * count} trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def write_tensor(tensor: np.ndarray, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(tensor))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def tensor_header(path) -> dict:
    """Parse only the header: rank, dims, dtype code, payload byte count."""
    blob = Path(path).read_bytes()
    arr = tensor_from_bytes(blob)  # full validation
    return {
        "rank": arr.ndim,
        "dims": list(arr.shape),
        "dtype": "float32",
        "payload_bytes": arr.size * 4,
    }


def write_feature_map(fmap: FeatureMap, path) -> None:
    write_tensor(fmap.data, path)


def read_feature_map(path, image_id: str | None = None) -> FeatureMap:
    arr = read_tensor(path)
    if arr.ndim != 3:
        raise TensorFileError(
            f"feature map must be rank 3, got rank {arr.ndim} in {path}")
    name = image_id if image_id is not None else Path(path).stem
    return FeatureMap(arr, name)


# -- model files --------------------------------------------------------------

def save_model(model: VladModel, path, inline: bool = True) -> None:
    """Write a model document; tensors inline (base64) or as sibling files."""
    path = Path(path)
    doc: dict = {
        "schema": MODEL_SCHEMA,
        "num_clusters": model.num_clusters,
        "feature_dim": model.feature_dim,
        "proj_dim": model.proj_dim,
        "tensors": {},
    }
    for name in MODEL_TENSORS:
        blob = tensor_to_bytes(getattr(model, name))
        if inline:
            doc["tensors"][name] = {
                "b64": base64.b64encode(blob).decode("ascii")}
        else:
            sidecar = path.with_name(f"{path.stem}.{name}.pvt")
            sidecar.write_bytes(blob)
            doc["tensors"][name] = {"file": sidecar.name}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_model(path) -> VladModel:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("schema") != MODEL_SCHEMA:
        raise ValueError(f"unsupported model schema {doc.get('schema')!r}")
    tensors = {}
    for name in MODEL_TENSORS:
        entry = doc["tensors"].get(name)
        if entry is None:
            raise ValueError(f"model file missing tensor {name!r}")
        if "b64" in entry:
            tensors[name] = tensor_from_bytes(base64.b64decode(entry["b64"]))
        elif "file" in entry:
            tensors[name] = read_tensor(path.parent / entry["file"])
        else:
            raise ValueError(f"tensor {name!r} has neither b64 nor file")
    model = VladModel(**tensors)
    declared = (doc["num_clusters"], doc["feature_dim"], doc["proj_dim"])
    actual = (model.num_clusters, model.feature_dim, model.proj_dim)
    if tuple(declared) != actual:
        raise ValueError(
            f"declared (K, D, D_proj) {declared} != tensor shapes {actual}")
    problems = validate_model(model)
    if problems:
        raise ValueError("invalid model: " + "; ".join(problems))
    return model


# -- manifests -----------------------------------------------------------------

def _entry_to_dict(entry: ImageEntry) -> dict:
    out: dict = {"image_id": entry.image_id, "path": entry.path}
    if entry.frame_index is not None:
        out["frame_index"] = entry.frame_index
    if entry.pose is not None:
        out["pose"] = {
            "position": list(entry.pose.position),
            "quaternion": list(entry.pose.quaternion),
        }
    return out


def _entry_from_dict(data: dict, base: Path) -> ImageEntry:
    pose = None
    if "pose" in data and data["pose"] is not None:
        pose = Pose(
            position=tuple(data["pose"]["position"]),
            quaternion=tuple(data["pose"].get("quaternion", (1, 0, 0, 0))),
        )
    raw_path = data["path"]
    resolved = Path(raw_path)
    if not resolved.is_absolute():
        resolved = base / resolved
    return ImageEntry(
        image_id=data["image_id"],
        path=str(resolved),
        pose=pose,
        frame_index=data.get("frame_index"),
    )


def _tolerance_to_dict(tol: ToleranceSpec) -> dict:
    out: dict = {"kind": tol.kind}
    if tol.kind == "frame_window":
        out["frame_window"] = tol.frame_window
    elif tol.kind == "radius":
        out["radius_m"] = tol.radius_m
    elif tol.kind == "radius_orientation":
        out["radius_m"] = tol.radius_m
        out["orientation_deg"] = tol.orientation_deg
    else:
        out["pose_thresholds"] = [list(t) for t in tol.pose_thresholds]
    return out


def _tolerance_from_dict(data: dict) -> ToleranceSpec:
    kind = data["kind"]
    return ToleranceSpec(
        kind=kind,
        frame_window=data.get("frame_window", 0),
        radius_m=data.get("radius_m", 0.0),
        orientation_deg=data.get("orientation_deg", 0.0),
        pose_thresholds=tuple(tuple(t) for t in data.get("pose_thresholds", ())),
    )


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "schema": MANIFEST_SCHEMA,
        "tolerance": _tolerance_to_dict(manifest.tolerance),
        "references": [_entry_to_dict(e) for e in manifest.references],
        "queries": [_entry_to_dict(e) for e in manifest.queries],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"unsupported manifest schema {doc.get('schema')!r}")
    base = path.parent
    return DatasetManifest(
        references=tuple(_entry_from_dict(e, base) for e in doc["references"]),
        queries=tuple(_entry_from_dict(e, base) for e in doc["queries"]),
        tolerance=_tolerance_from_dict(doc["tolerance"]),
    )


# -- configs -------------------------------------------------------------------

def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(json.loads(Path(path).read_text()))


# -- global index --------------------------------------------------------------

def save_index(image_ids, descriptors: np.ndarray, paths, path) -> None:
    """Persist a global index plus the feature-map path of each reference.

    Paths are stored relative to the index file when possible so the tree
    can be relocated as a unit.
    """
    path = Path(path)
    rel_paths = []
    for p in paths:
        p = Path(p)
        try:
            rel_paths.append(str(p.resolve().relative_to(path.resolve().parent)))
        except ValueError:
            rel_paths.append(str(p))
    doc = {
        "schema": INDEX_SCHEMA,
        "image_ids": list(image_ids),
        "paths": rel_paths,
        "descriptors_b64": base64.b64encode(
            tensor_to_bytes(descriptors)).decode("ascii"),
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_index(path) -> tuple[list[str], np.ndarray, dict[str, str]]:
    """Returns (image_ids, descriptor matrix, id -> feature-map path)."""
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("schema") != INDEX_SCHEMA:
        raise ValueError(f"unsupported index schema {doc.get('schema')!r}")
    ids = list(doc["image_ids"])
    descriptors = tensor_from_bytes(base64.b64decode(doc["descriptors_b64"]))
    paths = {}
    for image_id, p in zip(ids, doc["paths"]):
        resolved = Path(p)
        if not resolved.is_absolute():
            resolved = path.parent / resolved
        paths[image_id] = str(resolved)
    return ids, descriptors, paths
