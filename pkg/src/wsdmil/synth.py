"""Synthetic slide bags with spatially clustered tumour blobs."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .bagio import Bag, DatasetManifest, write_bag, write_manifest


@dataclass
class SynthSpec:
    num_bags: int = 100
    grid_side: int = 32
    feature_dim: int = 16
    positive_fraction: float = 0.5
    tumor_blob_scales: list = field(default_factory=lambda: [2, 4, 8])
    noise_std: float = 1.0
    class_mean_separation: float = 3.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_bags < 1:
            raise ValueError("num_bags must be >= 1")
        if self.grid_side < 4:
            raise ValueError(f"grid_side must be >= 4, got {self.grid_side}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ValueError("positive_fraction must lie in [0, 1]")
        if self.class_mean_separation <= 0:
            raise ValueError("class_mean_separation must be > 0")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be > 0")
        if not self.tumor_blob_scales:
            raise ValueError("tumor_blob_scales must not be empty")
        for r in self.tumor_blob_scales:
            if r < 1:
                raise ValueError(f"blob radius must be >= 1, got {r}")
            if 2 * r + 1 > self.grid_side:
                raise ValueError(f"blob radius {r} does not fit a {self.grid_side}x{self.grid_side} grid")

    @classmethod
    def from_dict(cls, payload: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown SynthSpec keys: {sorted(unknown)}")
        return cls(**payload)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthBag:
    bag: Bag
    tumor: np.ndarray  # bool per instance
    radius: Optional[int] = None


def tumor_direction(feature_dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xD1])
    u = rng.normal(size=feature_dim)
    return u / np.linalg.norm(u)


def blob_mask(coords: np.ndarray, center, radius: int) -> np.ndarray:
    d2 = ((coords - np.asarray(center)) ** 2).sum(1)
    return d2 <= radius * radius


def generate(spec: SynthSpec) -> list[SynthBag]:
    """Draw ``spec.num_bags`` bags; positives carry one tumour blob each.

    Negatives are pure N(0, noise_std^2 I). In a positive bag one disc of a
    radius drawn from ``tumor_blob_scales`` is placed fully inside the grid and
    its instances get mean ``class_mean_separation * u`` for a fixed unit ``u``.
    """
    side = spec.grid_side
    rows, cols = np.divmod(np.arange(side * side), side)
    coords = np.stack([rows, cols], 1)
    u = tumor_direction(spec.feature_dim, spec.seed)

    rng = np.random.default_rng(spec.seed)
    n_pos = int(round(spec.positive_fraction * spec.num_bags))
    labels = np.zeros(spec.num_bags, dtype=np.int64)
    labels[:n_pos] = 1
    rng.shuffle(labels)

    out = []
    for i, label in enumerate(labels):
        feats = rng.normal(0.0, spec.noise_std, size=(side * side, spec.feature_dim))
        tumor = np.zeros(side * side, dtype=bool)
        radius = None
        if label:
            radius = int(rng.choice(spec.tumor_blob_scales))
            center = rng.integers(radius, side - radius, size=2)
            tumor = blob_mask(coords, center, radius)
            feats[tumor] += spec.class_mean_separation * u
        bag = Bag(f"bag_{i:04d}", feats, coords.copy(), int(tumor.any()))
        out.append(SynthBag(bag, tumor, radius))
    return out


def write_dataset(spec: SynthSpec, out_dir) -> Path:
    """Write WSDB bags, a manifest and a ground-truth sidecar; return the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    items = generate(spec)
    entries = []
    for item in items:
        rel = f"bags/{item.bag.id}.wsdb"
        write_bag(item.bag, out_dir / rel)
        entries.append({"path": rel, "label": item.bag.label})
    manifest_path = out_dir / "manifest.json"
    write_manifest(DatasetManifest(2, spec.feature_dim, entries, root=out_dir), manifest_path)
    with open(out_dir / "ground_truth.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bag_id", "instance_index", "is_tumor"])
        for item in items:
            for j, flag in enumerate(item.tumor):
                w.writerow([item.bag.id, j, int(flag)])
    (out_dir / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest_path
