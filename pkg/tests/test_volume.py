import json
import struct

import numpy as np
import pytest

from arhnet.errors import PreconditionError, UnsupportedFormatError, VolumeFormatError, VolumeIOError
from arhnet.volume import (
    Mask3D,
    PatchSpec,
    Volume3D,
    extract_patch,
    infer_format,
    insert_patch,
    load_mask,
    load_volume,
    normalize_intensity,
    save_mask,
    save_volume,
)


def nifti_bytes(data, datatype=16, slope=0.0, inter=0.0, spacing=(1.0, 1.0, 1.0)):
    """Hand-built single-file NIfTI-1: 348-byte header, 4-byte extension flag, payload."""
    dims = data.shape
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, *dims, 1, 1, 1, 1)
    bitpix = 16 if datatype == 4 else 32
    struct.pack_into("<hh", header, 70, datatype, bitpix)
    struct.pack_into("<8f", header, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<fff", header, 108, 352.0, slope, inter)
    header[344:348] = b"n+1\x00"
    dtype = "<i2" if datatype == 4 else "<f4"
    # NIfTI stores x fastest
    payload = np.asarray(data, dtype=dtype).tobytes(order="F")
    return bytes(header) + b"\x00" * 4 + payload


@pytest.mark.parametrize("values, expected", [
    ([2, 4, 6], [0, 0.5, 1]),
    ([5, 5, 5], [0, 0, 0]),
    ([0, 1], [0, 1]),
])
def test_normalize_intensity_examples(values, expected):
    v = Volume3D(np.array(values, dtype=np.float32).reshape(-1, 1, 1))
    np.testing.assert_allclose(normalize_intensity(v).data.ravel(), expected)


def test_normalize_intensity_is_idempotent(rng):
    v = Volume3D(rng.uniform(-3, 7, size=(5, 4, 3)))
    once = normalize_intensity(v)
    twice = normalize_intensity(once)
    np.testing.assert_allclose(once.data, twice.data, atol=1e-7)
    assert once.data.min() == 0.0 and once.data.max() == 1.0


def test_volume_rejects_bad_spacing():
    with pytest.raises(PreconditionError):
        Volume3D(np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))


def test_nifti_float32_header_written_by_hand(tmp_path):
    path = tmp_path / "zeros.nii"
    path.write_bytes(nifti_bytes(np.zeros((4, 4, 4), dtype=np.float32)))
    v = load_volume(path, "nifti1")
    assert v.dims == (4, 4, 4)
    assert v.data.size == 64 and not v.data.any()
    assert v.spacing == (1.0, 1.0, 1.0)


def test_nifti_int16_applies_scaling(tmp_path):
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    path = tmp_path / "scaled.nii"
    path.write_bytes(nifti_bytes(data, datatype=4, slope=2.0, inter=1.0))
    v = load_volume(path)
    np.testing.assert_array_equal(v.data, data * 2.0 + 1.0)


def test_nifti_truncated_payload(tmp_path):
    path = tmp_path / "short.nii"
    path.write_bytes(nifti_bytes(np.ones((4, 4, 4), dtype=np.float32))[:-10])
    with pytest.raises(VolumeFormatError):
        load_volume(path)


def test_nifti_bad_magic_names_field(tmp_path):
    raw = bytearray(nifti_bytes(np.ones((2, 2, 2), dtype=np.float32)))
    raw[344:348] = b"ni1\x00"
    path = tmp_path / "pair.nii"
    path.write_bytes(bytes(raw))
    with pytest.raises(VolumeFormatError) as info:
        load_volume(path)
    assert info.value.field == "magic"


@pytest.mark.parametrize("code", [2, 64, 999])
def test_nifti_unsupported_datatype(tmp_path, code):
    raw = bytearray(nifti_bytes(np.ones((2, 2, 2), dtype=np.float32)))
    struct.pack_into("<h", raw, 70, code)
    path = tmp_path / "other.nii"
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedFormatError, match=f"code {code}"):
        load_volume(path)


def test_rawf32_reads_index_order(tmp_path):
    (tmp_path / "v.json").write_text(json.dumps({"dims": [2, 2, 2], "spacing": [1, 1, 1]}))
    values = np.arange(8, dtype="<f4")
    (tmp_path / "v.bin").write_bytes(values.tobytes())
    v = load_volume(tmp_path / "v.bin")
    assert v.data[0, 0, 1] == 1.0
    assert v.data[0, 1, 0] == 2.0
    assert v.data[1, 0, 0] == 4.0
    np.testing.assert_array_equal(v.data.ravel(), values)


def test_rawf32_bad_dims_names_field(tmp_path):
    (tmp_path / "v.json").write_text(json.dumps({"dims": [2, 2], "spacing": [1, 1, 1]}))
    (tmp_path / "v.bin").write_bytes(b"\x00" * 16)
    with pytest.raises(VolumeFormatError) as info:
        load_volume(tmp_path / "v.json")
    assert info.value.field == "dims"


@pytest.mark.parametrize("meta, field", [
    ({"dims": [2, 2, 2], "spacing": ["a", 1, 1]}, "spacing"),
    ({"dims": [2, 2, 2], "spacing": [None, 1, 1]}, "spacing"),
    ({"dims": [2, 2, 2], "spacing": [1, 1]}, "spacing"),
    ({"dims": [2, 2, 2], "spacing": [0, 1, 1]}, "spacing"),
    ({"dims": [2, 2, 2], "affine": [["x"] * 4] * 4}, "affine"),
    ({"dims": [2, 2, 2], "affine": [[1, 0], [0, 1]]}, "affine"),
])
def test_rawf32_malformed_sidecar_names_field(tmp_path, meta, field):
    (tmp_path / "v.json").write_text(json.dumps(meta))
    (tmp_path / "v.bin").write_bytes(b"\x00" * 32)
    with pytest.raises(VolumeFormatError) as info:
        load_volume(tmp_path / "v.bin")
    assert info.value.field == field


@pytest.mark.parametrize("name, format", [("v.bin", "rawf32"), ("v.nii", "nifti1")])
def test_save_load_round_trip_is_bit_exact(tmp_path, rng, name, format):
    v = Volume3D(rng.standard_normal((8, 8, 8)).astype(np.float32), spacing=(1.0, 1.5, 2.0))
    save_volume(v, tmp_path / name, format)
    back = load_volume(tmp_path / name, format)
    assert back.dims == v.dims
    assert back.spacing == v.spacing
    assert back.data.tobytes() == v.data.tobytes()


def test_save_to_unwritable_path(tmp_path):
    blocker = tmp_path / "file.txt"
    blocker.write_text("not a directory")
    with pytest.raises(VolumeIOError):
        save_volume(Volume3D(np.zeros((2, 2, 2))), blocker / "v.bin")


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(VolumeIOError):
        load_volume(tmp_path / "absent.nii")


def test_infer_format():
    assert infer_format("a/b.nii") == "nifti1"
    assert infer_format("a/b.bin") == "rawf32"
    with pytest.raises(UnsupportedFormatError):
        infer_format("a/b.nii.gz")
    with pytest.raises(UnsupportedFormatError):
        infer_format("a/b.dcm")


def test_mask_round_trip(tmp_path, rng):
    m = Mask3D(rng.random((4, 5, 6)) > 0.5)
    save_mask(m, tmp_path / "m.bin")
    np.testing.assert_array_equal(load_mask(tmp_path / "m.bin").data, m.data)


def test_extract_patch_single_valid_origin(rng):
    mask = np.zeros((64, 64, 64), dtype=bool)
    mask[32, 32, 32] = True
    _, _, spec = extract_patch(Volume3D(np.zeros((64, 64, 64))), Mask3D(mask), (64, 64, 64), rng)
    assert spec.origin == (0, 0, 0)


def test_extract_patch_corner_voxel(rng):
    mask = np.zeros((8, 8, 8), dtype=bool)
    mask[7, 7, 7] = True
    for _ in range(5):
        _, patch_mask, spec = extract_patch(Volume3D(np.zeros((8, 8, 8))), Mask3D(mask), (4, 4, 4), rng)
        assert spec.origin == (4, 4, 4)
        assert patch_mask.data[3, 3, 3]


def test_extract_patch_is_deterministic_and_covers_lesion():
    data = np.random.default_rng(0).random((10, 10, 10))
    mask = np.zeros((10, 10, 10), dtype=bool)
    mask[2:4, 6:8, 1:3] = True
    v, m = Volume3D(data), Mask3D(mask)
    first = extract_patch(v, m, (4, 4, 4), np.random.default_rng(7))
    second = extract_patch(v, m, (4, 4, 4), np.random.default_rng(7))
    assert first[2] == second[2]
    assert first[1].data.any()
    np.testing.assert_array_equal(first[0].data, data[first[2].slices].astype(np.float32))


def test_extract_patch_origin_distribution_is_uniform():
    mask = np.zeros((6, 1, 1), dtype=bool)
    mask[3, 0, 0] = True
    rng = np.random.default_rng(3)
    origins = [extract_patch(Volume3D(np.zeros((6, 1, 1))), Mask3D(mask), (2, 1, 1), rng)[2].origin[0]
               for _ in range(400)]
    assert set(origins) == {2, 3}
    assert 150 < origins.count(2) < 250


def test_extract_patch_errors(rng):
    v = Volume3D(np.zeros((4, 4, 4)))
    with pytest.raises(PreconditionError):
        extract_patch(v, Mask3D(np.zeros((4, 4, 4))), (2, 2, 2), rng)
    with pytest.raises(PreconditionError):
        extract_patch(v, Mask3D(np.ones((4, 4, 4))), (5, 2, 2), rng)


def test_insert_patch_examples(rng):
    ones = Volume3D(np.ones((4, 4, 4)))
    spec = PatchSpec((0, 0, 0), (2, 2, 2))
    out = insert_patch(ones, Volume3D(np.zeros((2, 2, 2))), spec)
    assert int((out.data == 0).sum()) == 8

    v = Volume3D(rng.random((6, 6, 6)))
    spec = PatchSpec((1, 2, 3), (3, 3, 3))
    same = insert_patch(v, v.with_data(v.data[spec.slices]), spec)
    np.testing.assert_array_equal(same.data, v.data)

    with pytest.raises(PreconditionError):
        insert_patch(ones, Volume3D(np.zeros((2, 2, 2))), PatchSpec((3, 0, 0), (2, 2, 2)))
    with pytest.raises(PreconditionError):
        insert_patch(ones, Volume3D(np.zeros((3, 2, 2))), PatchSpec((0, 0, 0), (2, 2, 2)))
