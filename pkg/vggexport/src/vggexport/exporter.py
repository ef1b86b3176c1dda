"""Convert VGG-19 weights (blocks 1-3, through the third maxpool) into the
forgecaps weight-archive format.

The archive layout is the documented external interface of the forgecaps
extractor and is written here from scratch:

    WARC1 <manifest-bytes>\\n   header line
    <manifest>                  UTF-8 text: meta/tensor records
    <blob>                      raw little-endian float32, tiled exactly

Sources are standard VGG-19 model files in the common ``features.N.weight``
state-dict layout (e.g. a file saved from the torchvision distribution), or
the torchvision pretrained distribution itself when no file is given.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import torch

# archive tensor name, source state-dict prefix, kernel shape
EXPECTED_LAYERS: List[Tuple[str, str, Tuple[int, int, int, int]]] = [
    ("conv1_1", "features.0", (64, 3, 3, 3)),
    ("conv1_2", "features.2", (64, 64, 3, 3)),
    ("conv2_1", "features.5", (128, 64, 3, 3)),
    ("conv2_2", "features.7", (128, 128, 3, 3)),
    ("conv3_1", "features.10", (256, 128, 3, 3)),
    ("conv3_2", "features.12", (256, 256, 3, 3)),
    ("conv3_3", "features.14", (256, 256, 3, 3)),
    ("conv3_4", "features.16", (256, 256, 3, 3)),
]

EXPORTED_PARAMETERS = 2_325_568


class ExportError(Exception):
    """Source weights missing, mis-shaped, or otherwise unusable."""


def load_source_state(source=None) -> Dict[str, torch.Tensor]:
    """State dict from a local model file, or the torchvision distribution.

    Fetching the pretrained distribution requires network access and the
    torchvision package; a local ``--source`` file needs neither.
    """
    if source is not None:
        source = Path(source)
        if not source.exists():
            raise ExportError(f"source file not found: {source}")
        obj = torch.load(source, map_location="cpu", weights_only=True)
        if isinstance(obj, dict) and "state_dict" in obj and isinstance(obj["state_dict"], dict):
            obj = obj["state_dict"]
        if not isinstance(obj, dict):
            raise ExportError(f"{source}: expected a state dict, got {type(obj).__name__}")
        return obj
    try:
        from torchvision.models import VGG19_Weights, vgg19
    except ImportError as exc:
        raise ExportError(
            "no --source given and torchvision is not installed; "
            "cannot fetch the pretrained distribution"
        ) from exc
    return vgg19(weights=VGG19_Weights.IMAGENET1K_V1).state_dict()


def collect_front_tensors(state: Dict[str, torch.Tensor]) -> Dict[str, np.ndarray]:
    """Validate and extract the 8 kernels and 8 biases of blocks 1-3."""
    tensors: Dict[str, np.ndarray] = {}
    for name, key, kshape in EXPECTED_LAYERS:
        for suffix, full_shape in (("weight", kshape), ("bias", (kshape[0],))):
            src_key = f"{key}.{suffix}"
            if src_key not in state:
                raise ExportError(f"source is missing layer {name} ({src_key})")
            value = state[src_key]
            if tuple(value.shape) != full_shape:
                raise ExportError(
                    f"layer {name} ({src_key}) has shape {tuple(value.shape)}, "
                    f"expected {full_shape}"
                )
            out_name = f"{name}.kernel" if suffix == "weight" else f"{name}.bias"
            tensors[out_name] = value.detach().cpu().numpy().astype("<f4")
    total = sum(v.size for v in tensors.values())
    if total != EXPORTED_PARAMETERS:
        raise ExportError(f"collected {total} parameters, expected {EXPORTED_PARAMETERS}")
    return tensors


def write_archive(path, tensors: Dict[str, np.ndarray], meta: Dict[str, str]) -> None:
    """Emit the weight-archive byte layout; deterministic for fixed inputs."""
    lines = [f"meta {k} {v}" for k, v in meta.items()]
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        shape = "x".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} f32 {shape} {offset}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(b"WARC1 " + str(len(manifest)).encode("ascii") + b"\n")
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def export(out_path, source=None) -> Path:
    """Read the source model, validate blocks 1-3, write the archive."""
    state = load_source_state(source)
    tensors = collect_front_tensors(state)
    meta = {
        "format": "vgg19-front-1",
        "source": "torchvision-pretrained" if source is None else Path(source).name,
        "parameters": str(EXPORTED_PARAMETERS),
    }
    out_path = Path(out_path)
    write_archive(out_path, tensors, meta)
    return out_path
