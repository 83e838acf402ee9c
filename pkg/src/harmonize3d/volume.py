"""Volumes, site label vectors, percentile normalization and NIfTI-1 I/O."""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

__all__ = [
    "Volume",
    "LabelVector",
    "LabeledVolume",
    "NiftiError",
    "NotNiftiError",
    "UnsupportedDatatypeError",
    "TruncatedPayloadError",
    "DegenerateVolumeWarning",
    "read_nifti",
    "write_nifti",
    "normalize",
]

# NIfTI-1 header layout (348 bytes, little-endian).
HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "<i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "<i4"),
        ("session_error", "<i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "<i2", (8,)),
        ("intent_p1", "<f4"),
        ("intent_p2", "<f4"),
        ("intent_p3", "<f4"),
        ("intent_code", "<i2"),
        ("datatype", "<i2"),
        ("bitpix", "<i2"),
        ("slice_start", "<i2"),
        ("pixdim", "<f4", (8,)),
        ("vox_offset", "<f4"),
        ("scl_slope", "<f4"),
        ("scl_inter", "<f4"),
        ("slice_end", "<i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "<f4"),
        ("cal_min", "<f4"),
        ("slice_duration", "<f4"),
        ("toffset", "<f4"),
        ("glmax", "<i4"),
        ("glmin", "<i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "<i2"),
        ("sform_code", "<i2"),
        ("quatern_b", "<f4"),
        ("quatern_c", "<f4"),
        ("quatern_d", "<f4"),
        ("qoffset_x", "<f4"),
        ("qoffset_y", "<f4"),
        ("qoffset_z", "<f4"),
        ("srow_x", "<f4", (4,)),
        ("srow_y", "<f4", (4,)),
        ("srow_z", "<f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert HEADER_DTYPE.itemsize == 348

# datatype code -> (numpy dtype, bitpix)
DATATYPES = {2: (np.dtype("u1"), 8), 4: (np.dtype("<i2"), 16), 16: (np.dtype("<f4"), 32)}

# Orientation fields carried through read/write untouched.
ORIENTATION_FIELDS = (
    "qform_code", "sform_code", "quatern_b", "quatern_c", "quatern_d",
    "qoffset_x", "qoffset_y", "qoffset_z", "srow_x", "srow_y", "srow_z", "qfac",
)


class NiftiError(ValueError):
    """Base class for NIfTI-1 decoding failures."""


class NotNiftiError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedPayloadError(NiftiError):
    pass


class DegenerateVolumeWarning(UserWarning):
    """Emitted when a volume has no intensity spread to normalize."""


@dataclass(frozen=True, eq=False)
class Volume:
    """A single-channel 3-D scalar field.

    ``voxels`` is a float32 array indexed ``[i, j, k]`` along the file's
    first, second and third axes.  ``orientation`` holds the header's
    qform/sform fields verbatim so they survive a read/write round trip.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_range: tuple[float, float] | None = None
    orientation: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        v = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"volume must be 3-d with positive extents, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("volume contains non-finite voxels")
        object.__setattr__(self, "voxels", v)
        # spacing is held at the header's float32 precision so file round trips are exact
        object.__setattr__(self, "spacing", tuple(float(np.float32(s)) for s in self.spacing))
        if self.intensity_range is None:
            object.__setattr__(self, "intensity_range", (float(v.min()), float(v.max())))

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    def with_voxels(self, voxels: np.ndarray) -> "Volume":
        """Same spacing and orientation, new voxel values (intensity range recomputed)."""
        return Volume(voxels, self.spacing, None, dict(self.orientation))


@dataclass(frozen=True)
class LabelVector:
    """Site indicator over {-1, +1}^K; all -1 denotes the style-agnostic target."""

    entries: tuple[int, ...]

    def __post_init__(self):
        entries = tuple(int(e) for e in self.entries)
        if not entries:
            raise ValueError("label vector must have at least one entry")
        if any(e not in (-1, 1) for e in entries):
            raise ValueError(f"label entries must be -1 or +1, got {entries}")
        if entries.count(1) > 1:
            raise ValueError("label vector may contain at most one +1 entry")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def site(cls, index: int, n_sites: int) -> "LabelVector":
        if not 0 <= index < n_sites:
            raise ValueError(f"site index {index} out of range for K={n_sites}")
        return cls(tuple(1 if i == index else -1 for i in range(n_sites)))

    @classmethod
    def agnostic(cls, n_sites: int) -> "LabelVector":
        return cls((-1,) * n_sites)

    @property
    def n_sites(self) -> int:
        return len(self.entries)

    @property
    def index(self) -> int | None:
        return self.entries.index(1) if 1 in self.entries else None

    def as_array(self) -> np.ndarray:
        return np.asarray(self.entries, dtype=np.float32)


@dataclass(frozen=True)
class LabeledVolume:
    volume: Volume
    label: LabelVector
    site_name: str = ""

    def __post_init__(self):
        if self.label.index is None:
            raise ValueError("a labeled volume needs exactly one +1 label entry")


def read_nifti(path: str | os.PathLike) -> Volume:
    """Read a single-frame, little-endian NIfTI-1 (.nii) file.

    Supports uint8, int16 and float32 payloads; ``scl_slope``/``scl_inter``
    are applied when the slope is non-zero.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 348:
        raise NotNiftiError(f"{path}: not NIfTI-1 (file shorter than the 348-byte header)")
    hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE)[0]
    if hdr["magic"] != b"n+1":
        raise NotNiftiError(f"{path}: not NIfTI-1 (bad magic {bytes(hdr['magic'])!r})")
    if int(hdr["sizeof_hdr"]) != 348:
        raise NotNiftiError(f"{path}: not NIfTI-1 little-endian (sizeof_hdr={int(hdr['sizeof_hdr'])})")
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: unsupported datatype code {code}")
    dim = [int(d) for d in hdr["dim"]]
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise NiftiError(f"{path}: expected a single 3-d frame, got dim={dim[: ndim + 1]}")
    shape = tuple(dim[1:4])
    if min(shape) < 1:
        raise NiftiError(f"{path}: non-positive extents {shape}")
    dtype, _ = DATATYPES[code]
    offset = int(hdr["vox_offset"])
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if offset < 348 or len(raw) < offset + nbytes:
        raise TruncatedPayloadError(f"{path}: payload truncated (need {nbytes} bytes at offset {offset}, file has {len(raw)})")

    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    data = data.reshape(shape, order="F").astype(np.float32)
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0.0 and np.isfinite(slope) and not (slope == 1.0 and inter == 0.0):
        data = (data * np.float32(slope) + np.float32(inter)).astype(np.float32)

    orientation = {name: _plain(hdr[name]) for name in ORIENTATION_FIELDS if name != "qfac"}
    orientation["qfac"] = float(hdr["pixdim"][0])
    spacing = tuple(float(s) for s in hdr["pixdim"][1:4])
    return Volume(data, spacing, None, orientation)


def _plain(value):
    arr = np.asarray(value)
    return arr.tolist() if arr.ndim else arr.item()


def write_nifti(volume: Volume, path: str | os.PathLike) -> None:
    """Write ``volume`` as an uncompressed float32 NIfTI-1 file (vox_offset 352)."""
    hdr = np.zeros((), dtype=HEADER_DTYPE)
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *volume.extents, 1, 1, 1, 1]
    hdr["datatype"] = 16
    hdr["bitpix"] = 32
    orient = dict(volume.orientation)
    hdr["pixdim"] = [float(orient.get("qfac", 1.0)) or 1.0, *volume.spacing, 0.0, 0.0, 0.0, 0.0]
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # millimetres
    hdr["magic"] = b"n+1"
    if orient:
        for name in ORIENTATION_FIELDS:
            if name != "qfac" and name in orient:
                hdr[name] = orient[name]
    else:
        sx, sy, sz = volume.spacing
        hdr["sform_code"] = 1
        hdr["srow_x"] = [sx, 0.0, 0.0, 0.0]
        hdr["srow_y"] = [0.0, sy, 0.0, 0.0]
        hdr["srow_z"] = [0.0, 0.0, sz, 0.0]
    payload = np.asarray(volume.voxels, dtype="<f4").tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(b"\x00\x00\x00\x00")
        fh.write(payload)


def normalize(volume: Volume, lo_pct: float = 0.005, hi_pct: float = 0.995) -> Volume:
    """Map the ``lo_pct``/``hi_pct`` quantiles to 0/1 linearly and clamp to [0, 1].

    Quantiles are taken as nearest order statistics, so applying the map
    twice is the identity.  A volume whose quantiles coincide is returned as
    all zeros with a :class:`DegenerateVolumeWarning`.
    """
    if not 0.0 <= lo_pct < hi_pct <= 1.0:
        raise ValueError(f"need 0 <= lo_pct < hi_pct <= 1, got {lo_pct}, {hi_pct}")
    v = volume.voxels.astype(np.float64)
    lo, hi = np.quantile(v, [lo_pct, hi_pct], method="nearest")
    if hi <= lo:
        warnings.warn("volume has no intensity spread between the requested percentiles", DegenerateVolumeWarning, stacklevel=2)
        return volume.with_voxels(np.zeros_like(volume.voxels))
    out = np.clip((v - lo) / (hi - lo), 0.0, 1.0)
    return volume.with_voxels(out.astype(np.float32))
