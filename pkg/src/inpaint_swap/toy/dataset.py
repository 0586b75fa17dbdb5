"""On-disk toy dataset: generation, file formats and validated loading.

Layout::

    <dir>/dataset.json        metadata (size, K, seed, category table)
    <dir>/manifest.jsonl      one record per item
    <dir>/images/NNNNN.png    8-bit RGB
    <dir>/labels/NNNNN.png    8-bit single channel, pixel = category id
    <dir>/landmarks/NNNNN.txt 68 lines "x y", normalised to [0, 1]
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..masks import CATEGORY_NAMES, validate_label_map
from .render import ToyFactorSpec, random_spec, render_toy_face

MANIFEST = "manifest.jsonl"
METADATA = "dataset.json"
FORMAT_VERSION = 1


class DatasetError(RuntimeError):
    """Base class for dataset ingestion failures."""


class MissingFileError(DatasetError):
    pass


class SchemaError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


def _sha256(*paths: Path) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(p.read_bytes())
    return h.hexdigest()


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8."""
    return np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: Path, image: np.ndarray) -> None:
    Image.fromarray(image_to_uint8(image), mode="RGB").save(path)


def read_image(path: Path) -> np.ndarray:
    """Read an 8-bit RGB file as float32 (3, H, W) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def write_label_map(path: Path, labels: np.ndarray) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path)


def read_label_map(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise SchemaError(f"{path}: label map must be single-channel 8-bit, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8).copy()
    validate_label_map(arr, str(path))
    return arr


def write_landmarks(path: Path, landmarks: np.ndarray) -> None:
    lines = [f"{float(x)!r} {float(y)!r}" for x, y in np.asarray(landmarks)]
    path.write_text("\n".join(lines) + "\n")


def read_landmarks(path: Path) -> np.ndarray:
    rows = [ln.split() for ln in path.read_text().splitlines() if ln.strip()]
    if len(rows) != 68 or any(len(r) != 2 for r in rows):
        raise SchemaError(f"{path}: expected 68 lines of 'x y', got {len(rows)}")
    arr = np.array([[float(a), float(b)] for a, b in rows], dtype=np.float64)
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise SchemaError(f"{path}: landmark coordinates must lie in [0, 1]")
    return arr


def generate_toy_dataset(
    n_identities: int,
    n_per_identity: int,
    size: int,
    seed: int,
    out_dir: str | Path,
    val_fraction: float = 0.25,
) -> list[dict]:
    """Render ``n_identities * n_per_identity`` faces into ``out_dir``.

    The last ``val_fraction`` of each identity's items go to the ``val``
    split. Returns the manifest records.
    """
    if n_identities < 2 or n_per_identity < 1:
        raise ValueError("need at least 2 identities and 1 image per identity")
    out = Path(out_dir)
    for sub in ("images", "labels", "landmarks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    n_val = int(round(n_per_identity * val_fraction))
    records = []
    index = 0
    for ident in range(n_identities):
        for j in range(n_per_identity):
            rng = np.random.default_rng([int(seed), ident, j])
            spec = random_spec(rng, ident)
            image, labels, lms = render_toy_face(spec, size)
            stem = f"{index:05d}"
            paths = {
                "image": f"images/{stem}.png",
                "label": f"labels/{stem}.png",
                "landmarks": f"landmarks/{stem}.txt",
            }
            write_image(out / paths["image"], image)
            write_label_map(out / paths["label"], labels)
            write_landmarks(out / paths["landmarks"], lms)
            records.append(
                {
                    "index": index,
                    **paths,
                    **spec.to_dict(),
                    "split": "val" if j >= n_per_identity - n_val else "train",
                    "sha256": _sha256(*(out / p for p in paths.values())),
                }
            )
            index += 1
    meta = {
        "format_version": FORMAT_VERSION,
        "size": size,
        "n_identities": n_identities,
        "n_per_identity": n_per_identity,
        "seed": seed,
        "categories": list(CATEGORY_NAMES),
    }
    (out / METADATA).write_text(json.dumps(meta, indent=2) + "\n")
    with open(out / MANIFEST, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return records


@dataclass
class ToyDataset:
    """In-memory, indexable view of a loaded dataset directory."""

    root: Path
    images: torch.Tensor  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N, H, W) uint8
    landmarks: np.ndarray  # (N, 68, 2) float64
    records: list[dict]
    meta: dict

    def __len__(self) -> int:
        return len(self.records)

    @property
    def identities(self) -> np.ndarray:
        return np.array([r["identity"] for r in self.records])

    @property
    def poses(self) -> np.ndarray:
        return np.array([r["pose"] for r in self.records])

    @property
    def expressions(self) -> np.ndarray:
        return np.array([r["expression"] for r in self.records])

    def split_indices(self, split: str) -> np.ndarray:
        if split == "all":
            return np.arange(len(self))
        idx = np.array([i for i, r in enumerate(self.records) if r["split"] == split], dtype=np.int64)
        if idx.size == 0:
            raise DatasetError(f"split {split!r} is empty")
        return idx

    def spec(self, i: int) -> ToyFactorSpec:
        r = self.records[i]
        return ToyFactorSpec(r["identity"], r["pose"], r["expression"], r["lighting"], r["color_seed"])

    def path(self, i: int, kind: str = "image") -> Path:
        return self.root / self.records[i][kind]


_REQUIRED = ("index", "image", "label", "landmarks", "identity", "pose", "expression", "lighting", "split", "sha256")


def load_dataset(root: str | Path, verify_checksums: bool = True) -> ToyDataset:
    """Load and validate a dataset directory.

    Raises ``MissingFileError``, ``SchemaError``, ``ChecksumError`` or
    ``masks.UnknownLabelError`` naming the offending file.
    """
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise MissingFileError(f"{manifest}: missing manifest")
    meta_path = root / METADATA
    meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {}
    records = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{manifest}:{lineno}: {exc}") from exc
        missing = [k for k in _REQUIRED if k not in rec]
        if missing:
            raise SchemaError(f"{manifest}:{lineno}: missing keys {missing}")
        if rec["split"] not in ("train", "val"):
            raise SchemaError(f"{manifest}:{lineno}: unknown split {rec['split']!r}")
        records.append(rec)

    images, labels, lms = [], [], []
    for rec in records:
        paths = [root / rec[k] for k in ("image", "label", "landmarks")]
        for p in paths:
            if not p.is_file():
                raise MissingFileError(f"{p}: missing file for item {rec['index']}")
        if verify_checksums and _sha256(*paths) != rec["sha256"]:
            raise ChecksumError(f"item {rec['index']}: checksum mismatch ({paths[0].name})")
        img = read_image(paths[0])
        lab = read_label_map(paths[1])
        if lab.shape != img.shape[1:]:
            raise SchemaError(f"{paths[1]}: label map shape {lab.shape} != image shape {img.shape[1:]}")
        images.append(img)
        labels.append(lab)
        lms.append(read_landmarks(paths[2]))
    if not records:
        raise SchemaError(f"{manifest}: no records")
    return ToyDataset(
        root=root,
        images=torch.from_numpy(np.stack(images)),
        labels=np.stack(labels),
        landmarks=np.stack(lms),
        records=records,
        meta=meta,
    )
