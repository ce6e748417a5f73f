"""Readers and writers for volumes, label maps and series manifests.

Two voxel formats are supported, chosen by file extension:

``.nii``
    Single-file NIfTI-1 subset. Datatypes uint8, int16 and float32; dims from
    ``dim[1..3]`` and spacing from ``pixdim[1..3]``. Orientation fields are
    ignored on read and written as identity.

``.raw``
    Native format. A 32-byte little-endian header followed by float32 voxels,
    x fastest::

        offset  size  field
        0       4     magic b"BWV1"
        4       2     format version (1)
        6       2     kind (0 = intensity volume, 1 = label map)
        8       12    dims, 3 x uint32
        20      12    spacing in mm, 3 x float32

    A JSON sidecar (``<name>.json``) records provenance. Spacing is stored as
    float32, so spacings round-trip at float32 precision.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .volgrid import BoldSeries, LabelMap, Volume

PathLike = Union[str, os.PathLike]

RAW_MAGIC = b"BWV1"
RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<4sHH3I3f")
assert _RAW_HEADER.size == 32

NIFTI_DTYPES = {2: np.dtype(np.uint8), 4: np.dtype(np.int16), 16: np.dtype(np.float32)}
_NIFTI_CODES = {v: k for k, v in NIFTI_DTYPES.items()}

MANIFEST_VERSION = 1


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


# -- native raw ---------------------------------------------------------------

def _write_raw(data: np.ndarray, spacing, path: Path, kind: int, provenance: Optional[dict]):
    header = _RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, kind, *data.shape, *spacing)
    body = np.asarray(data, dtype="<f4").tobytes(order="F")
    path.write_bytes(header + body)
    sidecar = {"format": "bwseg-raw", "version": RAW_VERSION,
               "kind": "label" if kind else "volume", "dims": list(data.shape)}
    if provenance:
        sidecar["provenance"] = provenance
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")


def _read_raw(path: Path):
    blob = path.read_bytes()
    if len(blob) < _RAW_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, kind, H, W, D, sx, sy, sz = _RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != RAW_VERSION:
        raise FormatError(f"{path}: unsupported raw version {version}")
    n = H * W * D
    if len(blob) - _RAW_HEADER.size != 4 * n:
        raise FormatError(f"{path}: expected {n} voxels for dims {(H, W, D)}, "
                          f"found {(len(blob) - _RAW_HEADER.size) / 4:g}")
    data = np.frombuffer(blob, dtype="<f4", offset=_RAW_HEADER.size, count=n)
    return data.reshape((H, W, D), order="F"), (sx, sy, sz), kind


# -- NIfTI-1 ------------------------------------------------------------------

def _write_nifti(data: np.ndarray, spacing, path: Path, dtype):
    dtype = np.dtype(dtype)
    if dtype not in _NIFTI_CODES:
        raise FormatError(f"NIfTI subset cannot store dtype {dtype}")
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, _NIFTI_CODES[dtype], dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<B", hdr, 123, 10)  # xyzt_units: mm, sec
    struct.pack_into("<hh", hdr, 252, 0, 1)  # qform_code, sform_code
    struct.pack_into("<12f", hdr, 280, spacing[0], 0, 0, 0, 0, spacing[1], 0, 0, 0, 0, spacing[2], 0)
    hdr[344:348] = b"n+1\0"
    body = np.asarray(data).astype(dtype.newbyteorder("<")).tobytes(order="F")
    path.write_bytes(bytes(hdr) + b"\0\0\0\0" + body)


def _read_nifti(path: Path):
    blob = path.read_bytes()
    if len(blob) < 352:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
    if struct.unpack_from("<i", blob, 0)[0] == 348:
        end = "<"
    elif struct.unpack_from(">i", blob, 0)[0] == 348:
        end = ">"
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348")
    if blob[344:348] != b"n+1\0":
        raise FormatError(f"{path}: magic {blob[344:348]!r} is not single-file NIfTI-1")
    dim = struct.unpack_from(end + "8h", blob, 40)
    ndim = dim[0]
    if not 3 <= ndim <= 7 or any(d != 1 for d in dim[4:ndim + 1]):
        raise FormatError(f"{path}: only 3D images are supported, dim={dim}")
    shape = tuple(int(d) for d in dim[1:4])
    if min(shape) < 1:
        raise FormatError(f"{path}: invalid dims {shape}")
    code = struct.unpack_from(end + "h", blob, 70)[0]
    if code not in NIFTI_DTYPES:
        raise FormatError(f"{path}: unsupported datatype code {code}")
    pixdim = struct.unpack_from(end + "8f", blob, 76)
    spacing = tuple(abs(float(p)) for p in pixdim[1:4])
    offset = int(struct.unpack_from(end + "f", blob, 108)[0])
    slope, inter = struct.unpack_from(end + "ff", blob, 112)
    dtype = NIFTI_DTYPES[code].newbyteorder(end)
    n = shape[0] * shape[1] * shape[2]
    if offset < 352 or len(blob) < offset + n * dtype.itemsize:
        raise FormatError(f"{path}: data block too short for dims {shape}")
    data = np.frombuffer(blob, dtype=dtype, offset=offset, count=n).reshape(shape, order="F")
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data.astype(np.float64) * (slope or 1.0) + inter
    return data, spacing


# -- public API ---------------------------------------------------------------

def _suffix(path: Path) -> str:
    s = path.suffix.lower()
    if s not in (".nii", ".raw"):
        raise FormatError(f"{path}: unknown volume format {s!r} (expected .nii or .raw)")
    return s


def write_volume(v: Volume, path: PathLike, provenance: Optional[dict] = None,
                 nifti_dtype=np.float32):
    """Write ``v``; ``nifti_dtype`` (uint8/int16/float32) applies to ``.nii`` only."""
    path = Path(path)
    if _suffix(path) == ".raw":
        _write_raw(v.data, v.spacing, path, 0, provenance)
        return
    dt = np.dtype(nifti_dtype)
    if dt.kind in "iu":
        info = np.iinfo(dt)
        if np.any(v.data != np.round(v.data)) or v.data.min() < info.min or v.data.max() > info.max:
            raise FormatError(f"volume values do not fit NIfTI datatype {dt} exactly")
    _write_nifti(v.data, v.spacing, path, dt)


def read_volume(path: PathLike) -> Volume:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"volume file not found: {path}")
    if _suffix(path) == ".raw":
        data, spacing, kind = _read_raw(path)
        if kind != 0:
            raise FormatError(f"{path}: holds a label map, not a volume")
    else:
        data, spacing = _read_nifti(path)
    try:
        return Volume(data, spacing)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


def write_label(y: LabelMap, path: PathLike, provenance: Optional[dict] = None):
    path = Path(path)
    if _suffix(path) == ".raw":
        _write_raw(y.data, y.spacing, path, 1, provenance)
    else:
        _write_nifti(y.data, y.spacing, path, np.uint8)


def read_label(path: PathLike) -> LabelMap:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"label file not found: {path}")
    if _suffix(path) == ".raw":
        data, spacing, _ = _read_raw(path)
    else:
        data, spacing = _read_nifti(path)
    try:
        return LabelMap(data, spacing)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


def write_series(series: BoldSeries, directory: PathLike, ext: str = ".raw") -> Path:
    """Write frames, labels and ``manifest.json`` into ``directory``.

    Manifest layout (paths relative to the manifest)::

        {"version": 1, "subject_id": "...", "frames": ["frames/f0000.raw", ...],
         "phase_bounds": [h, r], "labels": {"3": "labels/l0003.raw", ...}}
    """
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    frames = []
    for t, f in enumerate(series.frames):
        rel = f"frames/f{t:04d}{ext}"
        write_volume(f, directory / rel, {"subject_id": series.subject_id, "frame": t})
        frames.append(rel)
    labels = {}
    if series.labels:
        (directory / "labels").mkdir(exist_ok=True)
    for t, lab in series.labels.items():
        rel = f"labels/l{t:04d}{ext}"
        write_label(lab, directory / rel, {"subject_id": series.subject_id, "frame": t})
        labels[str(t)] = rel
    manifest = {"version": MANIFEST_VERSION, "subject_id": series.subject_id, "frames": frames,
                "phase_bounds": list(series.phase_bounds), "labels": labels}
    out = directory / "manifest.json"
    out.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def resolve_manifest(path: PathLike) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"series manifest not found: {path}")
    return path


def read_series(path: PathLike) -> BoldSeries:
    """Load a series from a manifest file (or a directory holding ``manifest.json``)."""
    path = resolve_manifest(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None
    for key in ("frames", "phase_bounds"):
        if key not in manifest:
            raise FormatError(f"{path}: manifest lacks {key!r}")
    if manifest.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {manifest['version']}")
    base = path.parent
    frames = [read_volume(base / p) for p in manifest["frames"]]
    labels: Dict[int, LabelMap] = {int(k): read_label(base / p)
                                   for k, p in manifest.get("labels", {}).items()}
    try:
        return BoldSeries(frames, tuple(manifest["phase_bounds"]), labels,
                          manifest.get("subject_id", path.parent.name))
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None
