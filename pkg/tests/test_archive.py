"""Weight-archive format: round trips and validation failures."""

import numpy as np
import pytest

from forgecaps.archive import ArchiveError, WeightArchive, load_archive, save_archive


def _sample_archive():
    arch = WeightArchive()
    arch.meta["format"] = "test"
    arch.meta["note"] = "value with spaces"
    rng = np.random.default_rng(7)
    arch.add("alpha.kernel", rng.normal(size=(2, 3, 3)).astype(np.float32))
    arch.add("alpha.bias", rng.normal(size=2).astype(np.float32))
    arch.add("beta", rng.normal(size=(4,)).astype(np.float32))
    return arch


class TestRoundTrip:
    def test_tensors_bit_identical(self, tmp_path):
        arch = _sample_archive()
        path = tmp_path / "weights.wa"
        save_archive(path, arch)
        loaded = load_archive(path)
        assert set(loaded.tensors) == set(arch.tensors)
        for name in arch.tensors:
            np.testing.assert_array_equal(loaded.tensors[name], arch.tensors[name])
            assert loaded.tensors[name].dtype == np.float32
        assert loaded.meta == arch.meta

    def test_save_load_save_is_byte_identical(self, tmp_path):
        arch = _sample_archive()
        first = tmp_path / "a.wa"
        second = tmp_path / "b.wa"
        save_archive(first, arch)
        save_archive(second, load_archive(first))
        assert first.read_bytes() == second.read_bytes()

    def test_parameter_count(self):
        assert _sample_archive().parameter_count == 2 * 3 * 3 + 2 + 4


class TestValidation:
    def test_duplicate_name_rejected(self):
        arch = WeightArchive()
        arch.add("w", np.zeros(2, dtype=np.float32))
        with pytest.raises(ArchiveError, match="duplicate tensor w"):
            arch.add("w", np.zeros(2, dtype=np.float32))

    def test_missing_tensor_named(self):
        arch = _sample_archive()
        with pytest.raises(ArchiveError, match="missing tensor conv3_4"):
            arch.require("conv3_4", (1,))

    def test_shape_mismatch_named(self):
        arch = _sample_archive()
        with pytest.raises(ArchiveError, match="beta has shape"):
            arch.require("beta", (5,))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.wa"
        path.write_bytes(b"NOPE 0\nxx")
        with pytest.raises(ArchiveError, match="bad magic"):
            load_archive(path)

    def test_truncated_blob(self, tmp_path):
        arch = _sample_archive()
        path = tmp_path / "t.wa"
        save_archive(path, arch)
        raw = path.read_bytes()
        path.write_bytes(raw[:-3])
        with pytest.raises(ArchiveError, match="cover .* bytes"):
            load_archive(path)

    def test_overlapping_entries(self, tmp_path):
        manifest = b"tensor a f32 2 0\ntensor b f32 2 4\n"
        blob = np.zeros(3, dtype="<f4").tobytes()
        path = tmp_path / "o.wa"
        path.write_bytes(b"WARC1 %d\n" % len(manifest) + manifest + blob)
        with pytest.raises(ArchiveError, match="overlaps"):
            load_archive(path)

    def test_unsupported_dtype(self, tmp_path):
        manifest = b"tensor a f64 1 0\n"
        blob = np.zeros(1, dtype="<f8").tobytes()
        path = tmp_path / "d.wa"
        path.write_bytes(b"WARC1 %d\n" % len(manifest) + manifest + blob)
        with pytest.raises(ArchiveError, match="unsupported dtype"):
            load_archive(path)

    def test_corrupt_manifest_record(self, tmp_path):
        manifest = b"tensor a f32 two 0\n"
        path = tmp_path / "c.wa"
        path.write_bytes(b"WARC1 %d\n" % len(manifest) + manifest)
        with pytest.raises(ArchiveError, match="corrupt tensor record"):
            load_archive(path)
