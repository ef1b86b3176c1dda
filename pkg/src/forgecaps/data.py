"""Sample manifests, image pre-processing, and the synthetic desk-scale corpus.

Manifest files are UTF-8 CSV with header ``path,label,group,split``; label is
0 (real) or 1 (fake), group ties frames to their source video (an empty cell
falls back to the frame's own path), split is train, val or test.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .tensor import Tensor

IMAGE_SIZE = 128
SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Malformed manifests, unreadable images, unusable splits."""


@dataclass(frozen=True)
class Sample:
    path: str
    label: int
    group: str
    split: str


@dataclass
class SampleManifest:
    records: List[Sample]
    root: Path

    @classmethod
    def read(cls, path) -> "SampleManifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        records: List[Sample] = []
        seen_paths = set()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["path", "label", "group", "split"]:
                raise DataError(
                    f"{path}: expected header path,label,group,split, got {reader.fieldnames}"
                )
            for lineno, row in enumerate(reader, start=2):
                if any(row.get(k) is None for k in ("path", "label", "split")):
                    raise DataError(f"{path}:{lineno}: incomplete record")
                raw_label = row["label"].strip()
                if raw_label not in ("0", "1"):
                    raise DataError(
                        f"{path}:{lineno}: label must be 0 (real) or 1 (fake), got {raw_label!r}"
                    )
                split = row["split"].strip()
                if split not in SPLITS:
                    raise DataError(f"{path}:{lineno}: unknown split {split!r}")
                sample_path = row["path"].strip()
                if not sample_path:
                    raise DataError(f"{path}:{lineno}: empty path")
                if sample_path in seen_paths:
                    raise DataError(f"{path}:{lineno}: duplicate path {sample_path}")
                seen_paths.add(sample_path)
                group = (row.get("group") or "").strip() or sample_path
                records.append(Sample(sample_path, int(raw_label), group, split))
        return cls(records=records, root=path.parent)

    def write(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "label", "group", "split"])
            for s in self.records:
                writer.writerow([s.path, s.label, s.group, s.split])

    def split(self, name: str) -> List[Sample]:
        return [s for s in self.records if s.split == name]

    def resolve(self, sample: Sample) -> Path:
        p = Path(sample.path)
        return p if p.is_absolute() else self.root / p


def load_image(path) -> np.ndarray:
    """Decode an image file to an RGB uint8 raster; errors carry the path."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except FileNotFoundError:
        raise DataError(f"image not found: {path}") from None
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from None


def preprocess(
    raster: np.ndarray,
    norm: Tuple[Sequence[float], Sequence[float]],
    dtype=np.float64,
) -> Tensor:
    """RGB raster (HxWx3, uint8 or float in [0,1]) to a normalized [3,128,128] tensor.

    Inputs already at 128x128 skip resampling; anything else is resized with
    bilinear interpolation. Channels are then scaled to [0,1] and normalized
    with the supplied per-channel mean/std.
    """
    arr = np.asarray(raster)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"expected an HxWx3 RGB raster, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    if arr.shape[:2] != (IMAGE_SIZE, IMAGE_SIZE):
        channels = []
        for c in range(3):
            img = Image.fromarray(arr[:, :, c].astype(np.float32), mode="F")
            img = img.resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
            channels.append(np.asarray(img, dtype=np.float64))
        arr = np.stack(channels, axis=2)
    mean, std = norm
    out = np.empty((3, IMAGE_SIZE, IMAGE_SIZE), dtype=dtype)
    for c in range(3):
        out[c] = (arr[:, :, c] - mean[c]) / std[c]
    return Tensor(out)


def _smooth_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-frequency image channel in [0,1]: a tilted plane plus a slow sine."""
    y, x = np.mgrid[0:size, 0:size] / size
    a, b = rng.uniform(-0.8, 0.8, size=2)
    fx, fy = rng.uniform(0.5, 2.5, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.1, 0.3)
    base = rng.uniform(0.25, 0.75)
    field = base + a * (x - 0.5) + b * (y - 0.5) + amp * np.sin(2 * np.pi * (fx * x + fy * y) + phase)
    return np.clip(field, 0.0, 1.0)


def make_synthetic(
    out_dir,
    n_train: int = 200,
    n_test: int = 100,
    frames_per_group: int = 5,
    seed: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> Path:
    """Write a labeled two-class image corpus and its manifest; returns the manifest path.

    Real frames are smooth gradient fields; fake frames overlay pixel noise on
    the same kind of field. Frames come in groups of ``frames_per_group``
    jittered variants of one base image, standing in for video frames.
    Deterministic for a fixed seed.
    """
    if n_train % frames_per_group or n_test % frames_per_group:
        raise DataError(
            f"sample counts ({n_train} train, {n_test} test) must divide into "
            f"groups of {frames_per_group}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "images").mkdir(exist_ok=True)
    rng = rng if rng is not None else np.random.default_rng(seed)

    records: List[Sample] = []
    group_index = 0
    for split, count in (("train", n_train), ("test", n_test)):
        for g in range(count // frames_per_group):
            label = g % 2  # alternate real/fake groups for balance
            base = np.stack([_smooth_field(rng, IMAGE_SIZE) for _ in range(3)], axis=2)
            noise_weight = rng.uniform(0.35, 0.6) if label else 0.0
            group = f"vid{group_index:04d}"
            group_index += 1
            for f in range(frames_per_group):
                frame = np.clip(base + rng.normal(0.0, 0.02, size=base.shape), 0.0, 1.0)
                if label:
                    noise = rng.uniform(0.0, 1.0, size=base.shape)
                    frame = (1.0 - noise_weight) * frame + noise_weight * noise
                name = f"images/{group}_f{f}.png"
                Image.fromarray((frame * 255.0).round().astype(np.uint8)).save(out_dir / name)
                records.append(Sample(name, label, group, split))

    manifest = SampleManifest(records=records, root=out_dir)
    manifest_path = out_dir / "manifest.csv"
    manifest.write(manifest_path)
    return manifest_path


def grouped_probabilities(
    samples: Sequence[Sample], probs: Sequence[float]
) -> Dict[str, List[float]]:
    """Frame probabilities keyed by group id, in manifest order."""
    grouped: Dict[str, List[float]] = {}
    for sample, p in zip(samples, probs):
        grouped.setdefault(sample.group, []).append(float(p))
    return grouped
