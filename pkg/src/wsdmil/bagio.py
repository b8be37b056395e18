"""Instance-embedding bags and their on-disk formats.

WSDB is a little-endian binary layout::

    magic  "WSDB"      4 bytes
    version u16 = 1
    label   u16
    n       u32
    d       u32        (16-byte header)
    coords  n x (row i32, col i32)
    feats   n x d f32, row-major

CSV bags carry a header ``row,col,f0,...,f{d-1}``; their label lives in the
dataset manifest.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

MAGIC = b"WSDB"
VERSION = 1
_HEADER = struct.Struct("<4sHHII")

PathLike = Union[str, os.PathLike]


class BagFormatError(ValueError):
    """File is not a readable bag (bad magic, version, or truncated payload)."""


class BagDataError(ValueError):
    """Bag content violates an invariant (non-finite values, duplicate coords, ...)."""


@dataclass
class Bag:
    id: str
    embeddings: np.ndarray
    coords: np.ndarray
    label: int = 0

    def __post_init__(self) -> None:
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.int64)
        self.label = int(self.label)
        validate_bag(self)

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Bag):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and np.array_equal(self.embeddings, other.embeddings)
            and np.array_equal(self.coords, other.coords)
        )


def validate_bag(bag: Bag, num_classes: Optional[int] = None) -> None:
    emb, coords = bag.embeddings, bag.coords
    if emb.ndim != 2 or emb.shape[0] < 1 or emb.shape[1] < 1:
        raise BagDataError(f"bag {bag.id!r}: embeddings must be n x d with n, d >= 1, got {emb.shape}")
    if coords.shape != (emb.shape[0], 2):
        raise BagDataError(f"bag {bag.id!r}: coords shape {coords.shape} does not match n={emb.shape[0]}")
    if not np.all(np.isfinite(emb)):
        raise BagDataError(f"bag {bag.id!r}: non-finite embedding values")
    if len(np.unique(coords, axis=0)) != len(coords):
        raise BagDataError(f"bag {bag.id!r}: duplicate patch coordinates")
    if bag.label < 0 or (num_classes is not None and bag.label >= num_classes):
        raise BagDataError(f"bag {bag.id!r}: label {bag.label} outside [0, {num_classes})")


def _sniff(path: Path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head[:4] == MAGIC:
        return "wsdb"
    if head.lstrip(b"\xef\xbb\xbf \t\r\n").startswith(b"row"):
        return "csv"
    raise BagFormatError(f"{path}: neither WSDB magic nor a row,col,... CSV header (starts {head[:4]!r})")


def read_bag(path: PathLike, label: Optional[int] = None, bag_id: Optional[str] = None) -> Bag:
    """Read a WSDB or CSV bag; the format is detected from the magic bytes.

    ``label`` overrides the label stored in a WSDB header and is required for
    CSV files, which do not store one.
    """
    path = Path(path)
    bag_id = bag_id if bag_id is not None else path.stem
    if _sniff(path) == "wsdb":
        return _read_wsdb(path, label, bag_id)
    return _read_csv(path, 0 if label is None else label, bag_id)


def _read_wsdb(path: Path, label: Optional[int], bag_id: str) -> Bag:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise BagFormatError(f"{path}: truncated header")
    magic, version, stored_label, n, d = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BagFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise BagFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + n * 8 + n * d * 4
    if len(raw) != expected:
        raise BagFormatError(f"{path}: expected {expected} bytes for n={n}, d={d}, got {len(raw)}")
    if n == 0 or d == 0:
        raise BagDataError(f"{path}: empty bag (n={n}, d={d})")
    coords = np.frombuffer(raw, dtype="<i4", count=2 * n, offset=_HEADER.size).reshape(n, 2)
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=_HEADER.size + 8 * n).reshape(n, d)
    try:
        return Bag(bag_id, feats.astype(np.float64), coords.astype(np.int64),
                   stored_label if label is None else label)
    except BagDataError as exc:
        raise BagDataError(f"{path}: {exc}") from None


def _read_csv(path: Path, label: int, bag_id: str) -> Bag:
    with open(path, newline="", encoding="utf-8-sig") as fh:
        try:
            rows = list(csv.reader(fh))
        except (csv.Error, UnicodeDecodeError) as exc:
            raise BagFormatError(f"{path}: {exc}") from None
    if not rows:
        raise BagFormatError(f"{path}: empty CSV")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 2
    if header[:2] != ["row", "col"] or d < 1 or header[2:] != [f"f{i}" for i in range(d)]:
        raise BagFormatError(f"{path}: CSV header must be row,col,f0..f{{d-1}}, got {header}")
    body = [r for r in rows[1:] if r]
    if not body:
        raise BagDataError(f"{path}: empty bag")
    try:
        table = np.array(body, dtype=np.float64)
    except ValueError as exc:
        raise BagFormatError(f"{path}: {exc}") from None
    if table.shape[1] != d + 2:
        raise BagFormatError(f"{path}: ragged CSV rows")
    try:
        return Bag(bag_id, table[:, 2:], table[:, :2].astype(np.int64), label)
    except BagDataError as exc:
        raise BagDataError(f"{path}: {exc}") from None


def wsdb_bytes(bag: Bag) -> bytes:
    validate_bag(bag)
    n, d = bag.embeddings.shape
    header = _HEADER.pack(MAGIC, VERSION, bag.label, n, d)
    coords = np.ascontiguousarray(bag.coords, dtype="<i4").tobytes()
    feats = np.ascontiguousarray(bag.embeddings, dtype="<f4").tobytes()
    return header + coords + feats


def write_bag(bag: Bag, path: PathLike, format: str = "wsdb") -> None:
    """Write ``bag`` as WSDB (features stored as f32) or CSV."""
    path = Path(path)
    try:
        if format == "wsdb":
            path.write_bytes(wsdb_bytes(bag))
        elif format == "csv":
            validate_bag(bag)
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["row", "col"] + [f"f{i}" for i in range(bag.d)])
                for (r, c), feats in zip(bag.coords, bag.embeddings):
                    w.writerow([int(r), int(c)] + [repr(float(v)) for v in feats])
        else:
            raise ValueError(f"unknown bag format {format!r}")
    except OSError as exc:
        raise OSError(f"cannot write bag to {path}: {exc}") from exc


@dataclass
class DatasetManifest:
    num_classes: int
    feature_dim: int
    bags: list = field(default_factory=list)  # [{"path": str, "label": int}]
    root: Path = Path(".")

    def paths(self) -> list[Path]:
        return [self.root / entry["path"] for entry in self.bags]

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(e["label"]) for e in self.bags], dtype=np.int64)

    def load_bags(self) -> list[Bag]:
        bags = []
        for entry, path in zip(self.bags, self.paths()):
            bag = read_bag(path, label=int(entry["label"]))
            if bag.d != self.feature_dim:
                raise BagDataError(f"{path}: feature_dim {bag.d} != manifest {self.feature_dim}")
            validate_bag(bag, self.num_classes)
            bags.append(bag)
        return bags

    def to_json(self) -> str:
        payload = {"num_classes": self.num_classes, "feature_dim": self.feature_dim,
                   "bags": [{"path": e["path"], "label": int(e["label"])} for e in self.bags]}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def read_manifest(path: PathLike, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    payload = json.loads(path.read_text())
    try:
        manifest = DatasetManifest(int(payload["num_classes"]), int(payload["feature_dim"]),
                                   list(payload["bags"]), root=path.parent)
    except KeyError as exc:
        raise BagFormatError(f"{path}: manifest missing key {exc}") from None
    for entry, p in zip(manifest.bags, manifest.paths()):
        if not 0 <= int(entry["label"]) < manifest.num_classes:
            raise BagDataError(f"{path}: label {entry['label']} outside [0, {manifest.num_classes})")
        if check_files and not p.exists():
            raise FileNotFoundError(f"{path}: referenced bag {p} does not exist")
    return manifest


def write_manifest(manifest: DatasetManifest, path: PathLike) -> None:
    Path(path).write_text(manifest.to_json())
