import json
import struct

import numpy as np
import pytest

from bwseg.fileio import (FormatError, read_label, read_series, read_volume, write_label, write_series,
                          write_volume)
from bwseg.volgrid import BoldSeries, LabelMap, Volume


def _vol(rng, shape=(4, 5, 6), spacing=(1.5, 2.0, 3.25)):
    return Volume(rng.normal(100, 20, shape), spacing)


@pytest.mark.parametrize("ext", [".raw", ".nii"])
def test_volume_roundtrip(tmp_path, rng, ext):
    v = _vol(rng)
    write_volume(v, tmp_path / f"v{ext}")
    w = read_volume(tmp_path / f"v{ext}")
    assert w.spacing == v.spacing
    assert np.array_equal(w.data, v.data)


@pytest.mark.parametrize("ext", [".raw", ".nii"])
def test_label_roundtrip(tmp_path, rng, ext):
    y = LabelMap(rng.random((3, 4, 5)) < 0.4, (1, 1, 2))
    write_label(y, tmp_path / f"y{ext}")
    z = read_label(tmp_path / f"y{ext}")
    assert np.array_equal(z.data, y.data) and z.spacing == y.spacing


def test_raw_header_layout(tmp_path):
    write_volume(Volume(np.zeros((2, 3, 4)), (1, 2, 3)), tmp_path / "v.raw", {"who": "test"})
    blob = (tmp_path / "v.raw").read_bytes()
    assert blob[:4] == b"BWV1"
    assert struct.unpack_from("<HH3I3f", blob, 4) == (1, 0, 2, 3, 4, 1.0, 2.0, 3.0)
    assert len(blob) == 32 + 4 * 24
    side = json.loads((tmp_path / "v.json").read_text())
    assert side["provenance"] == {"who": "test"} and side["kind"] == "volume"


def test_nifti_header_fields(tmp_path):
    write_volume(Volume(np.ones((2, 3, 4)), (0.5, 1, 2)), tmp_path / "v.nii")
    blob = (tmp_path / "v.nii").read_bytes()
    assert struct.unpack_from("<i", blob, 0)[0] == 348
    assert blob[344:348] == b"n+1\0"
    assert struct.unpack_from("<4h", blob, 40) == (3, 2, 3, 4)
    assert struct.unpack_from("<f", blob, 108)[0] == 352.0
    assert struct.unpack_from("<3f", blob, 80) == (0.5, 1.0, 2.0)


def test_nifti_big_endian_and_scaling(tmp_path):
    # hand-built big-endian int16 file with slope 0.5
    data = np.arange(8, dtype=">i2").reshape(2, 2, 2, order="F")
    hdr = bytearray(348)
    struct.pack_into(">i", hdr, 0, 348)
    struct.pack_into(">8h", hdr, 40, 3, 2, 2, 2, 1, 1, 1, 1)
    struct.pack_into(">hh", hdr, 70, 4, 16)
    struct.pack_into(">8f", hdr, 76, 1, 2, 2, 2, 0, 0, 0, 0)
    struct.pack_into(">f", hdr, 108, 352)
    struct.pack_into(">ff", hdr, 112, 0.5, 0)
    hdr[344:348] = b"n+1\0"
    (tmp_path / "be.nii").write_bytes(bytes(hdr) + bytes(4) + data.tobytes(order="F"))
    v = read_volume(tmp_path / "be.nii")
    assert v.spacing == (2, 2, 2)
    assert np.array_equal(v.data, data.astype(float) * 0.5)


def test_nifti_integer_dtype_must_fit(tmp_path):
    write_volume(Volume(np.full((2, 2, 2), 7.0)), tmp_path / "i.nii", nifti_dtype=np.int16)
    assert np.all(read_volume(tmp_path / "i.nii").data == 7)
    with pytest.raises(FormatError):
        write_volume(Volume(np.full((2, 2, 2), 7.5)), tmp_path / "j.nii", nifti_dtype=np.int16)


@pytest.mark.parametrize("mutate, msg", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:-4], "expected"),
    (lambda b: b[:10], "truncated"),
])
def test_raw_corruption(tmp_path, mutate, msg):
    p = tmp_path / "v.raw"
    write_volume(Volume(np.zeros((2, 2, 2))), p)
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(FormatError, match=msg):
        read_volume(p)


def test_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_volume(tmp_path / "none.raw")
    with pytest.raises(FormatError, match="unknown volume format"):
        write_volume(Volume(np.zeros((1, 1, 1))), tmp_path / "v.png")
    write_label(LabelMap(np.ones((1, 1, 2))), tmp_path / "y.raw")
    with pytest.raises(FormatError, match="label map"):
        read_volume(tmp_path / "y.raw")
    write_volume(Volume(np.full((1, 1, 2), 3.0)), tmp_path / "v.raw")
    with pytest.raises(FormatError, match="non-binary"):
        read_label(tmp_path / "v.raw")
    (tmp_path / "n.nii").write_bytes(bytes(400))
    with pytest.raises(FormatError):
        read_volume(tmp_path / "n.nii")


@pytest.mark.parametrize("ext", [".raw", ".nii"])
def test_series_roundtrip(tmp_path, rng, ext):
    frames = [_vol(rng, (3, 3, 2)) for _ in range(5)]
    labels = {1: LabelMap(rng.random((3, 3, 2)) < 0.5, frames[0].spacing)}
    s = BoldSeries(frames, (2, 4), labels, "abc")
    write_series(s, tmp_path / "s", ext)
    r = read_series(tmp_path / "s")
    assert r.subject_id == "abc" and r.phase_bounds == (2, 4) and list(r.labels) == [1]
    assert all(np.array_equal(a.data, b.data) for a, b in zip(r.frames, s.frames))
    assert np.array_equal(r.labels[1].data, labels[1].data)


def test_series_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_series(tmp_path)
    (tmp_path / "manifest.json").write_text("{")
    with pytest.raises(FormatError):
        read_series(tmp_path)
    (tmp_path / "manifest.json").write_text('{"frames": []}')
    with pytest.raises(FormatError, match="phase_bounds"):
        read_series(tmp_path)
