"""Portable weight-archive file format.

Layout, in order:

    WARC1 <manifest-bytes>\\n     length-prefixed header line (ASCII)
    <manifest>                    UTF-8 text, exactly <manifest-bytes> long
    <blob>                        raw little-endian float32 values

Manifest lines are either ``meta <key> <value>`` (config records, value may
contain spaces) or ``tensor <name> f32 <d0>x<d1>x... <byte-offset>``. Tensor
offsets index into the blob, must not overlap, and must tile it exactly.
The format is plain enough to write from any ecosystem.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

MAGIC = b"WARC1"


class ArchiveError(Exception):
    """Raised for malformed, truncated, or inconsistent archives."""


@dataclass
class WeightArchive:
    """Named float32 tensors plus free-form metadata records."""

    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, str] = field(default_factory=dict)

    def add(self, name: str, values: np.ndarray) -> None:
        if name in self.tensors:
            raise ArchiveError(f"duplicate tensor {name}")
        self.tensors[name] = np.ascontiguousarray(values, dtype="<f4")

    def require(self, name: str, shape: tuple) -> np.ndarray:
        if name not in self.tensors:
            raise ArchiveError(f"missing tensor {name}")
        arr = self.tensors[name]
        if arr.shape != tuple(shape):
            raise ArchiveError(
                f"tensor {name} has shape {arr.shape}, expected {tuple(shape)}"
            )
        return arr

    @property
    def parameter_count(self) -> int:
        return sum(arr.size for arr in self.tensors.values())


def save_archive(path, archive: WeightArchive) -> None:
    """Write the archive; tensor blobs are laid out contiguously in insertion order."""
    lines = []
    for key, value in archive.meta.items():
        if not key or any(ch.isspace() for ch in key):
            raise ArchiveError(f"invalid meta key {key!r}")
        if "\n" in value:
            raise ArchiveError(f"meta value for {key} contains a newline")
        lines.append(f"meta {key} {value}")
    offset = 0
    blobs = []
    for name, arr in archive.tensors.items():
        if not name or any(ch.isspace() for ch in name):
            raise ArchiveError(f"invalid tensor name {name!r}")
        data = np.ascontiguousarray(arr, dtype="<f4")
        shape = "x".join(str(d) for d in data.shape) if data.ndim else "1"
        lines.append(f"tensor {name} f32 {shape} {offset}")
        blobs.append(data.tobytes())
        offset += data.nbytes
    manifest = ("\n".join(lines) + "\n").encode("utf-8") if lines else b""
    with open(path, "wb") as fh:
        fh.write(MAGIC + b" " + str(len(manifest)).encode("ascii") + b"\n")
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_archive(path) -> WeightArchive:
    """Read and validate an archive file."""
    path = Path(path)
    raw = path.read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise ArchiveError(f"{path}: missing header line")
    header = raw[:newline].split(b" ")
    if len(header) != 2 or header[0] != MAGIC:
        raise ArchiveError(f"{path}: bad magic, not a weight archive")
    try:
        manifest_len = int(header[1])
    except ValueError as exc:
        raise ArchiveError(f"{path}: corrupt header length") from exc
    body = raw[newline + 1:]
    if len(body) < manifest_len:
        raise ArchiveError(f"{path}: truncated manifest")
    manifest = body[:manifest_len].decode("utf-8")
    blob = body[manifest_len:]

    archive = WeightArchive()
    entries = []
    for lineno, line in enumerate(manifest.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(" ")
        if parts[0] == "meta":
            if len(parts) < 3:
                raise ArchiveError(f"{path}:{lineno}: malformed meta record")
            key = parts[1]
            if key in archive.meta:
                raise ArchiveError(f"{path}:{lineno}: duplicate meta key {key}")
            archive.meta[key] = " ".join(parts[2:])
        elif parts[0] == "tensor":
            if len(parts) != 5:
                raise ArchiveError(f"{path}:{lineno}: malformed tensor record")
            name, dtype, shape_str, offset_str = parts[1:]
            if dtype != "f32":
                raise ArchiveError(f"{path}:{lineno}: unsupported dtype {dtype}")
            try:
                shape = tuple(int(d) for d in shape_str.split("x"))
                offset = int(offset_str)
            except ValueError as exc:
                raise ArchiveError(f"{path}:{lineno}: corrupt tensor record") from exc
            if any(d <= 0 for d in shape) or offset < 0:
                raise ArchiveError(f"{path}:{lineno}: corrupt tensor record")
            if name in (e[0] for e in entries):
                raise ArchiveError(f"{path}:{lineno}: duplicate tensor {name}")
            entries.append((name, shape, offset))
        else:
            raise ArchiveError(f"{path}:{lineno}: unknown record type {parts[0]!r}")

    spans = sorted(
        (offset, offset + 4 * int(np.prod(shape)), name) for name, shape, offset in entries
    )
    covered = 0
    for start, end, name in spans:
        if start < covered:
            raise ArchiveError(f"{path}: tensor {name} overlaps a previous entry")
        covered = end
    if covered != len(blob):
        raise ArchiveError(
            f"{path}: tensor entries cover {covered} bytes but blob has {len(blob)}"
        )

    for name, shape, offset in entries:
        count = int(np.prod(shape))
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        archive.tensors[name] = values.reshape(shape).copy()
    return archive
