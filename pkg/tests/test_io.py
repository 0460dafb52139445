import gzip
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linguine.errors import VolumeFormatError
from linguine.io import decode_nifti, encode_nifti, load_volume, save_volume
from linguine.volume import ElementKind, Volume


def sample(kind, dims=(3, 4, 5), seed=0):
    rng = np.random.default_rng(seed)
    if kind is ElementKind.HU_INT:
        data = rng.integers(-1024, 3000, size=dims)
    elif kind is ElementKind.PROB_FLOAT:
        data = rng.uniform(0, 1, size=dims)
    else:
        data = rng.integers(0, 45, size=dims)
    return Volume(data, (1.5, 1.25, 2.0), (-10.5, 3.25, 100.0), kind)


@pytest.mark.parametrize("kind", list(ElementKind))
@pytest.mark.parametrize("name", ["v.nii", "v.nii.gz", "v.json"])
def test_round_trip_bit_exact(tmp_path, kind, name):
    v = sample(kind)
    save_volume(v, tmp_path / name)
    w = load_volume(tmp_path / name)
    assert w.kind is kind
    assert w.dims == v.dims
    assert w.data.dtype == v.data.dtype
    assert w.data.tobytes() == v.data.tobytes()
    assert w.spacing == v.spacing
    assert w.origin == v.origin


def test_tiny_hu_round_trip(tmp_path):
    v = Volume(np.arange(8).reshape(2, 2, 2) * 100 - 400, (1.5, 1.5, 2.0), (0, 0, 0), ElementKind.HU_INT)
    save_volume(v, tmp_path / "a.nii.gz")
    assert np.array_equal(load_volume(tmp_path / "a.nii.gz").data, v.data)


def test_sidecar_keeps_full_precision_geometry(tmp_path):
    v = Volume(np.zeros((2, 2, 2)), (0.1, 1 / 3, 2.0), (1e-7, -123.456789012345, 0.0), ElementKind.HU_INT)
    save_volume(v, tmp_path / "a.json")
    w = load_volume(tmp_path / "a.json")
    assert w.spacing == v.spacing and w.origin == v.origin


def test_gzip_output_is_reproducible(tmp_path):
    v = sample(ElementKind.HU_INT)
    save_volume(v, tmp_path / "a.nii.gz")
    save_volume(v, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


def test_payload_is_x_fastest():
    data = np.arange(24).reshape(2, 3, 4)
    v = Volume(data, (1, 1, 1), (0, 0, 0), ElementKind.HU_INT)
    payload = np.frombuffer(encode_nifti(v)[352:], dtype="<i2")
    assert payload[1] == data[1, 0, 0]
    assert payload[2] == data[0, 1, 0]


def test_bad_magic_is_format_error():
    raw = bytearray(encode_nifti(sample(ElementKind.HU_INT)))
    raw[344:348] = b"ni1\x00"
    with pytest.raises(VolumeFormatError) as err:
        decode_nifti(bytes(raw))
    assert err.value.field == "magic"


def test_unsupported_datatype_is_format_error():
    raw = bytearray(encode_nifti(sample(ElementKind.HU_INT)))
    struct.pack_into("<h", raw, 70, 64)  # float64
    with pytest.raises(VolumeFormatError) as err:
        decode_nifti(bytes(raw))
    assert err.value.field == "datatype"


def test_truncated_payload_is_format_error():
    raw = encode_nifti(sample(ElementKind.HU_INT))
    with pytest.raises(VolumeFormatError) as err:
        decode_nifti(raw[:-2])
    assert err.value.field == "data"


def test_oblique_sform_rejected():
    raw = bytearray(encode_nifti(sample(ElementKind.HU_INT)))
    struct.pack_into("<f", raw, 284, 0.5)  # srow_x[1]
    with pytest.raises(VolumeFormatError) as err:
        decode_nifti(bytes(raw))
    assert err.value.field == "srow"


def test_sidecar_size_mismatch_names_field(tmp_path):
    save_volume(sample(ElementKind.LABEL_UINT), tmp_path / "a.json")
    meta = json.loads((tmp_path / "a.json").read_text())
    meta["dims"] = [3, 4, 6]
    (tmp_path / "a.json").write_text(json.dumps(meta))
    with pytest.raises(VolumeFormatError) as err:
        load_volume(tmp_path / "a.json")
    assert err.value.field == "dims"


def test_sidecar_missing_field(tmp_path):
    save_volume(sample(ElementKind.LABEL_UINT), tmp_path / "a.json")
    meta = json.loads((tmp_path / "a.json").read_text())
    del meta["spacing"]
    (tmp_path / "a.json").write_text(json.dumps(meta))
    with pytest.raises(VolumeFormatError) as err:
        load_volume(tmp_path / "a.json")
    assert err.value.field == "spacing"


def test_unknown_extension(tmp_path):
    with pytest.raises(VolumeFormatError):
        save_volume(sample(ElementKind.HU_INT), tmp_path / "a.mhd")


@settings(max_examples=25, deadline=None)
@given(kind=st.sampled_from(list(ElementKind)), dims=st.tuples(*[st.integers(1, 6)] * 3), seed=st.integers(0, 999))
def test_round_trip_property(kind, dims, seed):
    v = sample(kind, dims, seed)
    w = decode_nifti(gzip.compress(encode_nifti(v)))
    assert w.data.tobytes() == v.data.tobytes()


# independent reader ---------------------------------------------------------


@pytest.mark.parametrize("kind", list(ElementKind))
def test_files_readable_by_nibabel(tmp_path, kind):
    nib = pytest.importorskip("nibabel")
    v = sample(kind)
    save_volume(v, tmp_path / "a.nii.gz")
    img = nib.load(str(tmp_path / "a.nii.gz"))
    assert img.shape == v.dims
    assert np.array_equal(np.asarray(img.dataobj), v.data)
    assert np.allclose(img.affine[:3, 3], v.origin)
    assert np.allclose(np.diag(img.affine)[:3], v.spacing)


def test_reads_nibabel_written_file(tmp_path):
    nib = pytest.importorskip("nibabel")
    data = np.random.default_rng(3).integers(-1000, 1000, size=(4, 5, 6)).astype(np.int16)
    affine = np.diag([1.5, 1.5, 2.0, 1.0])
    affine[:3, 3] = (-20.0, 5.0, 7.5)
    img = nib.Nifti1Image(data, affine)
    img.set_sform(affine, code=1)
    nib.save(img, str(tmp_path / "n.nii"))
    v = load_volume(tmp_path / "n.nii")
    assert np.array_equal(v.data, data)
    assert v.origin == (-20.0, 5.0, 7.5)
    assert v.spacing == (1.5, 1.5, 2.0)
