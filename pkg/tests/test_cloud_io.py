import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import cloud_from
from rangepdm.cloud_io import (
    PointCloud,
    SensorSpec,
    assign_rings,
    load_labeled_scan,
    read_cloud,
    read_kitti_bin,
    read_kitti_label,
    read_ring_sidecar,
    write_cloud,
    write_kitti_bin,
    write_kitti_label,
    write_ring_sidecar,
)
from rangepdm.errors import DataError, FormatError
from rangepdm.synth import generate, random_scene, write_scan


def test_single_point_decoding(tmp_path):
    p = tmp_path / "one.bin"
    p.write_bytes(struct.pack("<4f", 1.0, 0.0, 0.0, 0.5))
    c = read_kitti_bin(p)
    assert c.n == 1
    np.testing.assert_array_equal(c.xyz, [[1.0, 0.0, 0.0]])
    assert c.intensity[0] == 0.5
    assert c.range[0] == 1.0
    assert c.ring is None


def test_empty_file(tmp_path):
    p = tmp_path / "empty.bin"
    p.write_bytes(b"")
    assert read_kitti_bin(p).n == 0


def test_hand_written_bytes_round_trip(tmp_path):
    pts = [(1.5, -2.25, 0.125, 0.75), (-3.0, 4.0, -1.0, 0.0), (0.0, 0.0, 2.0, 1.0)]
    raw = b"".join(struct.pack("<4f", *p) for p in pts)
    src = tmp_path / "three.bin"
    src.write_bytes(raw)
    c = read_kitti_bin(src)
    for i, p in enumerate(pts):
        assert tuple(c.xyz[i]) + (c.intensity[i],) == p
    out = tmp_path / "back.bin"
    write_kitti_bin(out, c)
    assert out.read_bytes() == raw


def test_truncated_file_reports_offset(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"\x00" * 40)
    with pytest.raises(FormatError, match="byte offset 32"):
        read_kitti_bin(p)


def test_nan_names_point_index(tmp_path):
    p = tmp_path / "nan.bin"
    p.write_bytes(struct.pack("<8f", 1, 2, 3, 0, 1, float("nan"), 3, 0))
    with pytest.raises(DataError, match="point index 1"):
        read_kitti_bin(p)


def test_label_bit_split(tmp_path):
    p = tmp_path / "a.label"
    words = [0x0001000A, 0x00000000, 0xABCD1234]
    p.write_bytes(struct.pack("<3I", *words))
    labels, inst = read_kitti_label(p, 3)
    assert labels.tolist() == [10, 0, 0x1234]
    assert inst.tolist() == [1, 0, 0xABCD]
    write_kitti_label(tmp_path / "b.label", labels, inst)
    assert (tmp_path / "b.label").read_bytes() == p.read_bytes()


def test_label_length_mismatch(tmp_path):
    p = tmp_path / "a.label"
    p.write_bytes(b"\x00" * 8)
    with pytest.raises(FormatError):
        read_kitti_label(p, 3)


def test_extended_bin_with_ring_column(tmp_path):
    c = cloud_from([[1, 2, 3], [4, 5, 6]], ring=[0, 3])
    p = tmp_path / "r.bin"
    write_kitti_bin(p, c, with_ring=True)
    back = read_kitti_bin(p, with_ring=True)
    assert back.ring.tolist() == [0, 3]


def test_range_is_derived_and_arrays_read_only():
    c = cloud_from([[3, 4, 12]])
    assert c.range[0] == 13.0
    with pytest.raises(ValueError):
        c.xyz[0, 0] = 1.0


def test_explicit_ring_file(tmp_path):
    spec = SensorSpec(2, 8, 8)
    c = cloud_from(np.ones((4, 3)))
    p = tmp_path / "x.ring"
    write_ring_sidecar(p, [0, 0, 1, 1])
    assert assign_rings(c, spec, source=p).ring.tolist() == [0, 0, 1, 1]
    with pytest.raises(FormatError):
        read_ring_sidecar(p, 5)


def test_ring_source_array_and_range_check():
    spec = SensorSpec(2, 8, 8)
    c = cloud_from(np.ones((3, 3)))
    assert assign_rings(c, spec, source=np.array([1, 0, 1])).ring.tolist() == [1, 0, 1]
    with pytest.raises(DataError):
        assign_rings(c, spec, source=np.array([0, 2, 1]))


def test_single_point_heuristic_is_ring_zero():
    c = cloud_from([[1.0, 1.0, 0.0]])
    assert assign_rings(c, SensorSpec(4, 16, 16)).ring.tolist() == [0]


@pytest.mark.parametrize("boost", [0, 2])
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_heuristic_recovers_generator_rings(seed, boost):
    spec = SensorSpec(32, 1088, 1090)
    cloud = generate(random_scene(spec, seed=seed, collision_boost=boost)).cloud
    rec = assign_rings(cloud.replace(ring=None), spec)
    np.testing.assert_array_equal(rec.ring, cloud.ring)


def test_heuristic_clockwise_storage():
    spec = SensorSpec(8, 64, 64)
    cloud = generate(random_scene(spec, seed=5, with_wall=True)).cloud
    # mirror y so each ring now sweeps clockwise
    flipped = cloud.replace(xyz=cloud.xyz * np.array([1.0, -1.0, 1.0]), ring=None)
    rec = assign_rings(flipped, spec, direction="auto")
    np.testing.assert_array_equal(rec.ring, cloud.ring)
    rec = assign_rings(flipped, spec, direction="cw")
    np.testing.assert_array_equal(rec.ring, cloud.ring)


def test_heuristic_too_many_rings():
    spec = SensorSpec(4, 16, 16)
    cloud = generate(random_scene(spec, seed=1)).cloud
    with pytest.raises(DataError, match="rings"):
        assign_rings(cloud.replace(ring=None), SensorSpec(2, 16, 16))


def test_heuristic_is_deterministic(small_scan, small_spec):
    a = assign_rings(small_scan.cloud.replace(ring=None), small_spec)
    b = assign_rings(small_scan.cloud.replace(ring=None), small_spec)
    assert np.array_equal(a.ring, b.ring)


def test_internal_format_round_trip(tmp_path, small_scan, small_spec):
    p = tmp_path / "c.rpdm"
    write_cloud(p, small_scan.cloud, small_spec)
    back, spec = read_cloud(p)
    assert spec == small_spec
    assert back.equals(small_scan.cloud)


def test_internal_format_rejects_bad_magic(tmp_path):
    p = tmp_path / "c.rpdm"
    write_cloud(p, cloud_from([[1, 2, 3]]))
    raw = bytearray(p.read_bytes())
    raw[0] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        read_cloud(p)
    write_cloud(p, cloud_from([[1, 2, 3]]))
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(FormatError):
        read_cloud(p)


def test_write_scan_and_load(tmp_path, small_scan):
    paths = write_scan(tmp_path / "seq.000", small_scan.cloud)
    c = load_labeled_scan(paths["bin"], paths["label"], paths["ring"])
    assert c.n == small_scan.cloud.n
    np.testing.assert_array_equal(c.labels, small_scan.cloud.labels)
    np.testing.assert_array_equal(c.ring, small_scan.cloud.ring)
    np.testing.assert_array_equal(c.xyz, small_scan.cloud.xyz.astype(np.float32))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(*[st.floats(-1e4, 1e4, width=32)] * 4), max_size=40))
def test_bin_round_trip_property(tmp_path_factory, pts):
    p = tmp_path_factory.mktemp("prop") / "p.bin"
    raw = b"".join(struct.pack("<4f", *q) for q in pts)
    p.write_bytes(raw)
    c = read_kitti_bin(p)
    write_kitti_bin(p, c)
    assert p.read_bytes() == raw
    # range recomputed at f64 from the f32 values, within an f32 ulp of the f32 norm
    if pts:
        r32 = np.sqrt((c.xyz.astype(np.float32) ** 2).sum(axis=1, dtype=np.float32))
        np.testing.assert_allclose(c.range, r32, rtol=2 * np.finfo(np.float32).eps, atol=1e-30)


def test_point_cloud_validation():
    with pytest.raises(DataError):
        PointCloud(np.array([[np.inf, 0, 0]]), np.zeros(1))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        SensorSpec(4, 10, 9)
