import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brainmae.errors import ConfigError, DataError, FormatError, TruncationError
from brainmae.volumes import (
    PatchGrid,
    load_atlas,
    load_volume,
    normalize_volume,
    partition_patches,
    unpartition_patches,
    write_atlas,
    write_volume,
)


class TestVolumeIO:
    def test_header_declares_shape(self, tmp_path, rng):
        data = rng.normal(size=(32, 32, 32)).astype(np.float32)
        path = tmp_path / "v.bav"
        write_volume(path, data)
        loaded = load_volume(path)
        assert loaded.shape == (32, 32, 32)
        np.testing.assert_array_equal(loaded, data)

    def test_bad_magic_is_format_error(self, tmp_path):
        path = tmp_path / "bad.bav"
        path.write_bytes(b"XXXX" + b"\x00" * 100)
        with pytest.raises(FormatError):
            load_volume(path)

    def test_short_payload_is_truncation_error(self, tmp_path, rng):
        data = rng.normal(size=(8, 8, 8)).astype(np.float32)
        path = tmp_path / "v.bav"
        write_volume(path, data)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(TruncationError):
            load_volume(path)

    def test_roundtrip_bytes_identical(self, tmp_path, rng):
        # write(load(f)) must be byte-identical to f for random files
        for trial in range(10):
            shape = tuple(int(rng.integers(2, 12)) for _ in range(3))
            data = rng.normal(size=shape).astype(np.float32)
            a = tmp_path / f"a{trial}.bav"
            b = tmp_path / f"b{trial}.bav"
            write_volume(a, data)
            write_volume(b, load_volume(a))
            assert a.read_bytes() == b.read_bytes()

    def test_atlas_roundtrip(self, tmp_path, rng):
        labels = rng.integers(0, 9, size=(16, 16, 16)).astype(np.uint16)
        path = tmp_path / "a.bal"
        write_atlas(path, labels)
        np.testing.assert_array_equal(load_atlas(path), labels)

    def test_atlas_magic_differs(self, tmp_path, rng):
        data = rng.normal(size=(8, 8, 8)).astype(np.float32)
        path = tmp_path / "v.bav"
        write_volume(path, data)
        with pytest.raises(FormatError):
            load_atlas(path)


class TestNormalize:
    def test_constant_volume_maps_to_zero(self):
        v = np.full((4, 4, 4), 5.0, dtype=np.float32)
        assert np.all(normalize_volume(v) == 0.0)

    def test_two_point_case(self):
        v = np.zeros((2, 2, 2), dtype=np.float32)
        v[0, 0, 0] = 10.0
        out = normalize_volume(v)
        assert out.min() == 0.0
        assert out[0, 0, 0] == pytest.approx(1.0, abs=1e-6)

    def test_rank_preservation(self, rng):
        v = rng.normal(size=(8, 8, 8))
        out = normalize_volume(v)
        assert out.min() == 0.0
        assert out.max() == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_array_equal(
            np.argsort(v.ravel(), kind="stable"), np.argsort(out.ravel(), kind="stable")
        )

    def test_idempotent(self, rng):
        v = rng.uniform(size=(8, 8, 8))
        once = normalize_volume(v)
        twice = normalize_volume(once)
        assert np.abs(twice - once).max() < 1e-6

    def test_non_finite_rejected(self):
        v = np.zeros((2, 2, 2), dtype=np.float32)
        v[0, 0, 0] = np.nan
        with pytest.raises(DataError):
            normalize_volume(v)


class TestPatchGrid:
    def test_counts(self):
        grid = PatchGrid((16, 16, 16), 8)
        assert grid.n_patches == 8
        assert grid.patch_voxels == 512

    def test_indivisible_shape_rejected(self):
        with pytest.raises(ConfigError):
            PatchGrid((17, 17, 17), 8)

    def test_index_mapping_bijection(self):
        grid = PatchGrid((16, 24, 32), 8)
        seen = set()
        for i in range(grid.n_patches):
            z, y, x = grid.patch_coords(i)
            assert grid.coords_to_index(z, y, x) == i
            seen.add((z, y, x))
        assert len(seen) == grid.n_patches

    def test_row_major_z_then_y_then_x(self):
        grid = PatchGrid((16, 16, 16), 8)
        assert grid.patch_coords(0) == (0, 0, 0)
        assert grid.patch_coords(1) == (0, 0, 1)
        assert grid.patch_coords(2) == (0, 1, 0)
        assert grid.patch_coords(4) == (1, 0, 0)

    def test_partition_shapes(self, rng):
        grid = PatchGrid((16, 16, 16), 8)
        v = rng.normal(size=(16, 16, 16))
        patches = partition_patches(v, grid)
        assert patches.shape == (8, 512)

    def test_partition_contents_match_blocks(self, rng):
        grid = PatchGrid((16, 16, 16), 8)
        v = rng.normal(size=(16, 16, 16))
        patches = partition_patches(v, grid)
        np.testing.assert_array_equal(
            patches[grid.coords_to_index(1, 0, 1)], v[8:16, 0:8, 8:16].ravel()
        )

    @settings(max_examples=25, deadline=None)
    @given(
        p=st.sampled_from([2, 4]),
        bz=st.integers(1, 3),
        by=st.integers(1, 3),
        bx=st.integers(1, 3),
        seed=st.integers(0, 2**16),
    )
    def test_partition_roundtrip_property(self, p, bz, by, bx, seed):
        shape = (bz * p, by * p, bx * p)
        v = np.random.default_rng(seed).normal(size=shape)
        grid = PatchGrid(shape, p)
        np.testing.assert_array_equal(unpartition_patches(partition_patches(v, grid), grid), v)

    def test_mismatched_volume_rejected(self, rng):
        grid = PatchGrid((16, 16, 16), 8)
        with pytest.raises(ConfigError):
            partition_patches(rng.normal(size=(8, 8, 8)), grid)
