import numpy as np
import pytest

from trifuse.domain import WorldPoint
from trifuse.errors import InputError
from trifuse.volume import (
    HU_MAX,
    HU_MIN,
    PATCH_SHAPE,
    PATCH_SPACING_MM,
    Volume,
    VolumeHeader,
    centroid_in_lung,
    extract_patch,
    label_at,
    load_volume,
    read_header,
    save_volume,
    voxel_to_world,
    world_to_voxel,
)


def make_volume(values, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return Volume.from_array(np.asarray(values), spacing, WorldPoint(*origin))


class TestTransforms:
    def test_origin_maps_to_zero(self):
        h = VolumeHeader((4, 4, 4), (1.0, 2.0, 3.0), WorldPoint(5, 6, 7), "int16")
        assert world_to_voxel(WorldPoint(5, 6, 7), h) == (0.0, 0.0, 0.0)

    def test_arithmetic(self):
        h = VolumeHeader((8, 8, 8), (2.0, 2.0, 2.0), WorldPoint(0, 0, 0), "int16")
        assert world_to_voxel(WorldPoint(4, 6, 8), h) == (2.0, 3.0, 4.0)

    def test_round_trip(self):
        rng = np.random.default_rng(5)
        h = VolumeHeader((10, 20, 30), (0.7, 0.7, 1.25), WorldPoint(-17.5, 4.0, 99.0), "float32")
        for _ in range(50):
            p = WorldPoint(*rng.uniform(-100, 100, size=3))
            back = voxel_to_world(world_to_voxel(p, h), h)
            assert p.distance_to(back) < 1e-9


class TestHeaderFile:
    def write_pair(self, tmp_path, values, element_type="int16", extra_lines=(), drop=None):
        arr = np.asarray(values, dtype={"int16": "<i2", "uint8": "<u1", "float32": "<f4"}[element_type])
        raw = tmp_path / "vol.raw"
        arr.T.tofile(raw)
        lines = {
            "dims": f"dims = {arr.shape[0]} {arr.shape[1]} {arr.shape[2]}",
            "spacing_mm": "spacing_mm = 1.0 1.0 2.0",
            "origin_mm": "origin_mm = 0.0 0.0 0.0",
            "element_type": f"element_type = {element_type}",
            "data_file": "data_file = vol.raw",
        }
        if drop:
            del lines[drop]
        header = tmp_path / "vol.hdr"
        header.write_text("\n".join(list(lines.values()) + list(extra_lines)) + "\n")
        return header

    def test_load_round_trip_all_dtypes(self, tmp_path):
        rng = np.random.default_rng(6)
        for element_type, values in (
            ("uint8", rng.integers(0, 255, size=(4, 3, 2)).astype("<u1")),
            ("int16", rng.integers(-1000, 500, size=(4, 3, 2)).astype("<i2")),
            ("float32", rng.normal(size=(4, 3, 2)).astype("<f4")),
        ):
            vol = Volume.from_array(values, (1.0, 1.0, 2.0), WorldPoint(0, 0, 0), element_type)
            header = save_volume(vol, tmp_path / f"{element_type}.hdr")
            loaded = load_volume(header)
            assert loaded.header == vol.header
            np.testing.assert_array_equal(loaded.values, vol.values)

    def test_x_fastest_layout(self, tmp_path):
        values = np.arange(24).reshape(2, 3, 4)  # (nx, ny, nz)
        header = self.write_pair(tmp_path, values)
        loaded = load_volume(header)
        np.testing.assert_array_equal(loaded.values, values)
        # the raw stream starts by walking x at y=z=0
        raw = np.fromfile(tmp_path / "vol.raw", dtype="<i2")
        np.testing.assert_array_equal(raw[:2], values[:, 0, 0])

    def test_unknown_key_rejected(self, tmp_path):
        header = self.write_pair(tmp_path, np.zeros((2, 2, 2)), extra_lines=("flavor = salty",))
        with pytest.raises(InputError, match="unknown header key"):
            read_header(header)

    def test_missing_key_rejected(self, tmp_path):
        header = self.write_pair(tmp_path, np.zeros((2, 2, 2)), drop="spacing_mm")
        with pytest.raises(InputError, match="missing header keys"):
            read_header(header)

    def test_size_mismatch_rejected(self, tmp_path):
        header = self.write_pair(tmp_path, np.zeros((2, 2, 2)))
        (tmp_path / "vol.raw").write_bytes(b"\x00" * 6)
        with pytest.raises(InputError, match="expected 8 voxels"):
            load_volume(header)

    def test_bad_dims_rejected(self, tmp_path):
        header = tmp_path / "bad.hdr"
        header.write_text(
            "dims = 0 2 2\nspacing_mm = 1 1 1\norigin_mm = 0 0 0\n"
            "element_type = uint8\ndata_file = bad.raw\n"
        )
        with pytest.raises(InputError):
            read_header(header)


class TestLungGating:
    def volume_with_labels(self):
        values = np.zeros((10, 10, 10), dtype=np.uint8)
        for i, label in enumerate((28, 29, 30, 31, 32)):
            values[i, 0, 0] = label
        values[9, 9, 9] = 99
        return make_volume(values)

    def test_lung_labels_accepted(self):
        vol = self.volume_with_labels()
        for i in range(5):
            assert centroid_in_lung(WorldPoint(float(i), 0.0, 0.0), vol)

    def test_background_rejected(self):
        vol = self.volume_with_labels()
        assert not centroid_in_lung(WorldPoint(5.0, 5.0, 5.0), vol)

    def test_non_lung_label_rejected(self):
        vol = self.volume_with_labels()
        assert not centroid_in_lung(WorldPoint(9.0, 9.0, 9.0), vol)
        assert label_at(WorldPoint(9.0, 9.0, 9.0), vol) == 99

    def test_out_of_bounds_rejected(self):
        vol = self.volume_with_labels()
        assert not centroid_in_lung(WorldPoint(-3.0, 0.0, 0.0), vol)
        assert not centroid_in_lung(WorldPoint(0.0, 0.0, 500.0), vol)
        assert label_at(WorldPoint(0.0, 0.0, 500.0), vol) is None

    def test_invariant_to_relabeling_non_lung(self):
        vol = self.volume_with_labels()
        relabeled = vol.values.copy()
        relabeled[relabeled == 99] = 7
        relabeled[relabeled == 0] = 250
        vol2 = make_volume(relabeled)
        rng = np.random.default_rng(7)
        for _ in range(100):
            p = WorldPoint(*rng.uniform(-2, 12, size=3))
            assert centroid_in_lung(p, vol) == centroid_in_lung(p, vol2)

    def test_nearest_voxel_uses_rounding(self):
        values = np.zeros((4, 4, 4), dtype=np.uint8)
        values[2, 2, 2] = 30
        vol = make_volume(values, spacing=(2.0, 2.0, 2.0))
        # world (3.2, 4.0, 4.0) -> voxel (1.6, 2, 2) -> nearest (2, 2, 2)
        assert centroid_in_lung(WorldPoint(3.2, 4.0, 4.0), vol)
        assert not centroid_in_lung(WorldPoint(2.9, 4.0, 4.0), vol)


class TestExtractPatch:
    # the patch spans 44.1 x 44.1 x 78.75 mm; interior tests need a volume
    # large enough to contain it

    def test_constant_volume_normalizes(self):
        vol = make_volume(np.full((60, 60, 100), 100.0, dtype="<f4"))
        patch = extract_patch(vol, WorldPoint(30, 30, 50))
        assert patch.values.shape == PATCH_SHAPE
        np.testing.assert_allclose(patch.values, (100.0 + 1000.0) / 1500.0, atol=1e-9)

    def test_clip_floor(self):
        vol = make_volume(np.full((30, 30, 30), -2000.0, dtype="<f4"))
        patch = extract_patch(vol, WorldPoint(15, 15, 15))
        np.testing.assert_array_equal(patch.values, 0.0)

    def test_clip_ceiling(self):
        vol = make_volume(np.full((60, 60, 100), 3000.0, dtype="<f4"))
        patch = extract_patch(vol, WorldPoint(30, 30, 50))
        np.testing.assert_array_equal(patch.values, 1.0)

    def test_center_far_outside_pads_with_air(self):
        vol = make_volume(np.full((20, 20, 20), 100.0, dtype="<f4"))
        patch = extract_patch(vol, WorldPoint(5000, 5000, 5000))
        np.testing.assert_array_equal(patch.values, 0.0)

    def test_values_always_in_unit_interval(self):
        rng = np.random.default_rng(8)
        values = rng.uniform(-3000, 3000, size=(25, 25, 25)).astype("<f4")
        vol = make_volume(values, spacing=(1.3, 0.9, 2.0))
        for _ in range(5):
            center = WorldPoint(*rng.uniform(-10, 40, size=3))
            patch = extract_patch(vol, center)
            assert patch.values.shape == PATCH_SHAPE
            assert patch.values.min() >= 0.0
            assert patch.values.max() <= 1.0

    def test_grid_aligned_resample_reproduces_source(self):
        # source already at patch spacing; center placed on the sample grid
        rng = np.random.default_rng(9)
        values = rng.uniform(HU_MIN, HU_MAX, size=(80, 80, 80)).astype("<f4")
        vol = make_volume(values, spacing=PATCH_SPACING_MM)
        # center at voxel (39.5, 39.5, 39.5): patch sample k maps to voxel k+8
        center = voxel_to_world((39.5, 39.5, 39.5), vol.header)
        patch = extract_patch(vol, center)
        expected = (values[8:72, 8:72, 8:72].astype(np.float64) - HU_MIN) / (HU_MAX - HU_MIN)
        np.testing.assert_allclose(patch.values, expected, atol=1e-9)

    def test_affine_field_is_interpolated_exactly(self):
        # integer grid and half-integer coefficients keep every stored voxel
        # value exact in float32, isolating the interpolation error itself
        nx, ny, nz = 60, 60, 85
        spacing = (1.0, 1.0, 1.0)
        origin = WorldPoint(0.0, 0.0, 0.0)
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        a = (3.0, -2.0, 1.5)
        b = -200.0
        field = a[0] * ix + a[1] * iy + a[2] * iz + b
        assert field.min() > HU_MIN and field.max() < HU_MAX
        vol = Volume.from_array(field.astype("<f4"), spacing, origin, "float32")
        center = WorldPoint(nx / 2, ny / 2, nz / 2)
        patch = extract_patch(vol, center)
        # expected affine values on the patch grid, windowed and normalized
        offsets = [(np.arange(64) - 31.5) * PATCH_SPACING_MM[axis] for axis in range(3)]
        gx, gy, gz = np.meshgrid(
            center.x + offsets[0], center.y + offsets[1], center.z + offsets[2], indexing="ij"
        )
        expected_field = a[0] * gx + a[1] * gy + a[2] * gz + b
        inside = (
            (gx >= 0) & (gx <= nx - 1)
            & (gy >= 0) & (gy <= ny - 1)
            & (gz >= 0) & (gz <= nz - 1)
        )
        assert inside.all()  # center and spacing keep all samples interior
        expected = (expected_field - HU_MIN) / (HU_MAX - HU_MIN)
        scale = np.maximum(np.abs(expected), 1.0)
        assert np.max(np.abs(patch.values - expected) / scale) < 1e-9
