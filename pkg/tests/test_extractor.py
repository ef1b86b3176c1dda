"""Feature extractors: shape contracts, freezing, archive loading."""

import numpy as np
import pytest

from forgecaps.archive import ArchiveError, WeightArchive, save_archive, load_archive
from forgecaps.extractor import (
    ToyExtractor,
    VGG_FRONT_LAYERS,
    build_vgg_front,
    vgg_front_parameter_count,
)
from forgecaps.tensor import Tensor

VGG_FRONT_PARAMS = 2_325_568


def random_vgg_archive(scale=0.05, seed=0):
    rng = np.random.default_rng(seed)
    arch = WeightArchive()
    for name, cin, cout in VGG_FRONT_LAYERS:
        arch.add(f"{name}.kernel", (scale * rng.normal(size=(cout, cin, 3, 3))).astype(np.float32))
        arch.add(f"{name}.bias", (scale * rng.normal(size=cout)).astype(np.float32))
    return arch


class TestToyExtractor:
    def test_output_shape_default(self):
        toy = ToyExtractor(rng=np.random.default_rng(1))
        out = toy.extract(Tensor(np.random.default_rng(2).normal(size=(3, 128, 128))))
        assert out.data.shape == (32, 16, 16)

    def test_output_shape_configurable(self):
        toy = ToyExtractor(channels=8, rng=np.random.default_rng(1))
        out = toy.extract(Tensor(np.zeros((2, 3, 128, 128))))
        assert out.data.shape == (2, 8, 16, 16)

    def test_zero_input_zero_biases_gives_zero(self):
        toy = ToyExtractor(rng=np.random.default_rng(1))
        for name, p in toy.parameters():
            if name.endswith("bias"):
                p.data[...] = 0.0
        out = toy.extract(Tensor(np.zeros((3, 128, 128))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_extract_is_pure(self):
        toy = ToyExtractor(rng=np.random.default_rng(3))
        x = Tensor(np.random.default_rng(4).normal(size=(3, 128, 128)))
        a = toy.extract(x).data
        b = toy.extract(x).data
        np.testing.assert_array_equal(a, b)

    def test_wrong_input_shape_rejected(self):
        toy = ToyExtractor(rng=np.random.default_rng(1))
        with pytest.raises(ValueError, match="expects"):
            toy.extract(Tensor(np.zeros((3, 64, 64))))

    def test_frozen_output_carries_no_graph(self):
        toy = ToyExtractor(rng=np.random.default_rng(1))
        out = toy.extract(Tensor(np.zeros((3, 128, 128))))
        assert not out.requires_grad


class TestVggFront:
    def test_parameter_count_arithmetic(self):
        # 1792 + 36928 + 73856 + 147584 + 295168 + 3 * 590080
        assert vgg_front_parameter_count() == VGG_FRONT_PARAMS

    def test_build_and_extract_shape(self):
        front = build_vgg_front(random_vgg_archive(), dtype=np.float32)
        assert front.parameter_count == VGG_FRONT_PARAMS
        x = Tensor(np.random.default_rng(5).normal(size=(3, 128, 128)).astype(np.float32))
        out = front.extract(x)
        assert out.data.shape == (256, 16, 16)
        assert np.all(np.isfinite(out.data))

    def test_missing_tensor_error_names_entry(self):
        arch = random_vgg_archive()
        del arch.tensors["conv3_4.kernel"]
        with pytest.raises(ArchiveError, match="missing tensor conv3_4.kernel"):
            build_vgg_front(arch)

    def test_misshaped_tensor_error_names_entry(self):
        arch = random_vgg_archive()
        arch.tensors["conv2_1.bias"] = np.zeros(64, dtype=np.float32)
        with pytest.raises(ArchiveError, match="conv2_1.bias has shape"):
            build_vgg_front(arch)

    def test_archive_round_trip_bit_identical(self, tmp_path):
        arch = random_vgg_archive()
        path = tmp_path / "vgg.wa"
        save_archive(path, arch)
        loaded = load_archive(path)
        for name in arch.tensors:
            np.testing.assert_array_equal(loaded.tensors[name], arch.tensors[name])
