"""Minimal NIfTI-1 layer: round trips, determinism, malformed input."""
import gzip

import numpy as np
import pytest

from longreg.nifti import read_nifti, write_nifti


def test_float32_roundtrip_lossless(tmp_path, rng):
    data = rng.random((6, 7, 8)).astype(np.float32)
    write_nifti(tmp_path / "v.nii.gz", data, spacing=1.5, descrip="hello")
    back, spacing, descrip = read_nifti(tmp_path / "v.nii.gz")
    assert np.array_equal(back, data)
    assert spacing == pytest.approx(1.5)
    assert descrip == "hello"


def test_uint8_mask_roundtrip(tmp_path, rng):
    data = (rng.random((5, 5, 5)) > 0.5).astype(np.uint8)
    write_nifti(tmp_path / "m.nii", data)
    back, _, _ = read_nifti(tmp_path / "m.nii")
    assert back.dtype == np.uint8
    assert np.array_equal(back, data)


def test_4d_field_roundtrip(tmp_path, rng):
    data = rng.normal(size=(3, 4, 5, 6)).astype(np.float32)
    write_nifti(tmp_path / "f.nii.gz", data)
    back, _, _ = read_nifti(tmp_path / "f.nii.gz")
    assert back.shape == (3, 4, 5, 6)
    assert np.array_equal(back, data)


def test_gzip_output_is_deterministic(tmp_path):
    data = np.arange(60, dtype=np.float32).reshape(3, 4, 5)
    write_nifti(tmp_path / "a.nii.gz", data)
    write_nifti(tmp_path / "b.nii.gz", data)
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


def test_header_is_valid_nifti1(tmp_path):
    data = np.zeros((4, 4, 4), dtype=np.float32)
    write_nifti(tmp_path / "v.nii.gz", data, spacing=2.0)
    raw = gzip.decompress((tmp_path / "v.nii.gz").read_bytes())
    assert int.from_bytes(raw[:4], "little") == 348
    assert raw[344:348] == b"n+1\x00"
    assert len(raw) == 352 + data.nbytes


def test_truncated_file_rejected(tmp_path):
    (tmp_path / "bad.nii").write_bytes(b"\x00" * 100)
    with pytest.raises(IOError, match="header"):
        read_nifti(tmp_path / "bad.nii")


def test_wrong_magic_rejected(tmp_path):
    data = np.zeros((4, 4, 4), dtype=np.float32)
    write_nifti(tmp_path / "v.nii", data)
    raw = bytearray((tmp_path / "v.nii").read_bytes())
    raw[344:348] = b"xxxx"
    (tmp_path / "v.nii").write_bytes(bytes(raw))
    with pytest.raises(IOError, match="magic"):
        read_nifti(tmp_path / "v.nii")


def test_data_truncation_detected(tmp_path):
    data = np.zeros((8, 8, 8), dtype=np.float32)
    write_nifti(tmp_path / "v.nii", data)
    raw = (tmp_path / "v.nii").read_bytes()
    (tmp_path / "v.nii").write_bytes(raw[: len(raw) - 64])
    with pytest.raises(IOError, match="truncated"):
        read_nifti(tmp_path / "v.nii")
