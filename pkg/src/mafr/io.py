"""Binary feature-map files and JSON dataset manifests.

Feature-map layout (all integers little-endian)::

    b"MAFR" | version u32 = 1 | modality u8 | H u32 | W u32 | D u32
    | H*W*D float32 payload (channels-last, row-major) | H*W validity bytes
"""
from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureFormatError, FeatureMap, Modality

MAGIC = b"MAFR"
VERSION = 1
_HEADER = struct.Struct("<4sIBIII")
# refuse headers that would need more than 4 GiB of payload
_MAX_ELEMENTS = (1 << 32) // 4


def encode_feature_map(fmap: FeatureMap) -> bytes:
    h, w, d = fmap.shape
    header = _HEADER.pack(MAGIC, VERSION, int(fmap.modality), h, w, d)
    payload = fmap.data.astype("<f4", copy=False).tobytes(order="C")
    mask = fmap.validity.astype(np.uint8).tobytes(order="C")
    return header + payload + mask


def decode_feature_map(buf: bytes) -> FeatureMap:
    if len(buf) < _HEADER.size:
        raise FeatureFormatError("truncated feature-map header")
    magic, version, modality, h, w, d = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FeatureFormatError(f"unsupported format version {version}")
    if modality not in (0, 1):
        raise FeatureFormatError(f"unknown modality code {modality}")
    if min(h, w, d) < 1:
        raise FeatureFormatError(f"zero dimension in header {h}x{w}x{d}")
    if h * w * d > _MAX_ELEMENTS:
        raise FeatureFormatError(f"dimensions {h}x{w}x{d} overflow the format limit")
    n_payload = h * w * d * 4
    expected = _HEADER.size + n_payload + h * w
    if len(buf) != expected:
        raise FeatureFormatError(f"expected {expected} bytes, found {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", count=h * w * d, offset=_HEADER.size)
    data = data.astype(np.float32).reshape(h, w, d)
    mask_bytes = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=_HEADER.size + n_payload)
    if mask_bytes.max() > 1:
        raise FeatureFormatError("validity bytes must be 0 or 1")
    if not np.isfinite(data).all():
        raise FeatureFormatError("non-finite payload")
    return FeatureMap(data, Modality(modality), mask_bytes.reshape(h, w).astype(bool))


def save_feature_map(fmap: FeatureMap, path) -> None:
    Path(path).write_bytes(encode_feature_map(fmap))


def load_feature_map(path) -> FeatureMap:
    return decode_feature_map(Path(path).read_bytes())


def save_mask(mask: np.ndarray, path) -> None:
    """Store a binary H x W mask as a one-channel feature map."""
    mask = np.asarray(mask, dtype=bool)
    save_feature_map(FeatureMap(mask[:, :, None].astype(np.float32)), path)


def load_mask(path) -> np.ndarray:
    return load_feature_map(path).data[:, :, 0] > 0.5


class Label(str, enum.Enum):
    NORMAL = "Normal"
    ANOMALOUS = "Anomalous"


class Split(str, enum.Enum):
    TRAIN = "Train"
    VALIDATION = "Validation"
    TEST = "Test"


@dataclass
class Sample:
    id: str
    path_2d: str
    path_3d: str
    label: Label = Label.NORMAL
    mask_path: str | None = None

    def __post_init__(self):
        self.label = Label(self.label)


@dataclass
class DatasetManifest:
    samples: list[Sample]
    split: Split = Split.TRAIN
    root: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.split = Split(self.split)
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest sample ids must be unique")
        if self.split is Split.TRAIN and any(s.label is not Label.NORMAL for s in self.samples):
            raise ValueError("the Train split may only contain Normal samples")

    def __len__(self):
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def to_dict(self) -> dict:
        return {
            "split": self.split.value,
            "samples": [
                {
                    "id": s.id,
                    "path_2d": s.path_2d,
                    "path_3d": s.path_3d,
                    "label": s.label.value,
                    "mask_path": s.mask_path,
                }
                for s in self.samples
            ],
        }


MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["split", "samples"],
    "additionalProperties": False,
    "properties": {
        "split": {"enum": [s.value for s in Split]},
        "samples": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "path_2d", "path_3d", "label"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string"},
                    "path_2d": {"type": "string"},
                    "path_3d": {"type": "string"},
                    "label": {"enum": [lab.value for lab in Label]},
                    "mask_path": {"type": ["string", "null"]},
                },
            },
        },
    },
}


def manifest_from_dict(doc: dict, root=None) -> DatasetManifest:
    if not isinstance(doc, dict) or set(doc) - {"split", "samples"}:
        raise ValueError("manifest must be an object with 'split' and 'samples' only")
    samples = []
    for entry in doc["samples"]:
        extra = set(entry) - {"id", "path_2d", "path_3d", "label", "mask_path"}
        if extra:
            raise ValueError(f"unknown manifest fields {sorted(extra)}")
        samples.append(Sample(**entry))
    return DatasetManifest(samples, doc["split"], Path(root) if root is not None else None)


def save_manifest(manifest: DatasetManifest, path) -> None:
    text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    return manifest_from_dict(doc, root=path.parent)


def tensor_to_feature_map(arr: np.ndarray) -> FeatureMap:
    """Pack an arbitrary-rank float tensor into the 3-axis container."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1, 1)
    elif arr.ndim == 2:
        arr = arr[:, :, None]
    elif arr.ndim > 3:
        arr = arr.reshape(arr.shape[0], arr.shape[1], -1)
    return FeatureMap(arr)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
