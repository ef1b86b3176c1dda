"""Frozen feature extractors feeding the capsule network.

Both kinds map a 3x128x128 image (or a batch of them) to a Cx16x16 latent
block: the front of a VGG-19 network up to and including its third maxpool
(C=256), or a small randomly initialized stand-in for desk-scale work
(C configurable, default 32).
"""

from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np

from . import tensor as T
from .archive import ArchiveError, WeightArchive
from .tensor import Tensor

INPUT_SIZE = 128
OUTPUT_SIZE = 16

# (name, in_channels, out_channels) for each convolution; pools come after
# conv1_2, conv2_2 and conv3_4, giving the three 2x spatial reductions.
VGG_FRONT_LAYERS: List[Tuple[str, int, int]] = [
    ("conv1_1", 3, 64),
    ("conv1_2", 64, 64),
    ("conv2_1", 64, 128),
    ("conv2_2", 128, 128),
    ("conv3_1", 128, 256),
    ("conv3_2", 256, 256),
    ("conv3_3", 256, 256),
    ("conv3_4", 256, 256),
]
_POOL_AFTER = {"conv1_2", "conv2_2", "conv3_4"}


def _check_input(x: Tensor) -> None:
    shape = x.data.shape
    spatial_ok = shape[-3:] == (3, INPUT_SIZE, INPUT_SIZE) and x.data.ndim in (3, 4)
    if not spatial_ok:
        raise ValueError(
            f"extractor expects [3,{INPUT_SIZE},{INPUT_SIZE}] or a batch of them, got {shape}"
        )


class _Extractor:
    kind = "base"
    out_channels = 0
    frozen = True

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self._params.items())

    @property
    def parameter_count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def _forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def extract(self, x: Tensor) -> Tensor:
        """Deterministic feature map for one image or a batch."""
        _check_input(x)
        if self.frozen:
            with T.no_grad():
                return self._forward(x)
        return self._forward(x)


class VggFrontExtractor(_Extractor):
    """First three convolution blocks of VGG-19, through the third maxpool."""

    kind = "vgg19_front"
    out_channels = 256

    def __init__(self, params: Dict[str, Tensor]):
        super().__init__()
        self._params = params

    def _forward(self, x: Tensor) -> Tensor:
        h = x
        for name, _, _ in VGG_FRONT_LAYERS:
            h = T.conv2d(h, self._params[f"{name}.kernel"], self._params[f"{name}.bias"],
                         stride=1, padding=1)
            h = T.relu(h)
            if name in _POOL_AFTER:
                h = T.maxpool2d(h, 2)
        return h


class ToyExtractor(_Extractor):
    """Small random extractor preserving the Cx16x16 output contract."""

    kind = "toy"

    def __init__(self, channels: int = 32, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        super().__init__()
        self.out_channels = channels
        rng = rng if rng is not None else np.random.default_rng(0)
        for name, cin, cout, k in (("conv1", 3, 16, 3), ("conv2", 16, channels, 3)):
            bound = np.sqrt(1.0 / (cin * k * k))
            self._params[f"{name}.kernel"] = Tensor(
                rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype))
            self._params[f"{name}.bias"] = Tensor(
                rng.uniform(-bound, bound, size=cout).astype(dtype))

    def _forward(self, x: Tensor) -> Tensor:
        h = T.relu(T.conv2d(x, self._params["conv1.kernel"], self._params["conv1.bias"], padding=1))
        h = T.maxpool2d(h, 2)
        h = T.relu(T.conv2d(h, self._params["conv2.kernel"], self._params["conv2.bias"], padding=1))
        h = T.maxpool2d(h, 2)
        return T.maxpool2d(h, 2)


def build_vgg_front(archive: WeightArchive, dtype=np.float64) -> VggFrontExtractor:
    """Assemble the VGG-19 front from an archive, validating every entry."""
    params: Dict[str, Tensor] = {}
    for name, cin, cout in VGG_FRONT_LAYERS:
        kernel = archive.require(f"{name}.kernel", (cout, cin, 3, 3))
        bias = archive.require(f"{name}.bias", (cout,))
        params[f"{name}.kernel"] = Tensor(kernel.astype(dtype))
        params[f"{name}.bias"] = Tensor(bias.astype(dtype))
    extractor = VggFrontExtractor(params)
    expected = vgg_front_parameter_count()
    if extractor.parameter_count != expected:
        raise ArchiveError(
            f"VGG front has {extractor.parameter_count} parameters, expected {expected}"
        )
    return extractor


def vgg_front_parameter_count() -> int:
    return sum(cout * cin * 9 + cout for _, cin, cout in VGG_FRONT_LAYERS)


def make_extractor(kind: str, channels: int = 32, rng: np.random.Generator | None = None,
                   archive_path=None, dtype=np.float64) -> _Extractor:
    if kind == "toy":
        return ToyExtractor(channels=channels, rng=rng, dtype=dtype)
    if kind == "vgg19_front":
        if archive_path is None:
            raise ValueError("vgg19_front extractor requires a weight archive path")
        from .archive import load_archive

        return build_vgg_front(load_archive(archive_path), dtype=dtype)
    raise ValueError(f"unknown extractor kind {kind!r}")
