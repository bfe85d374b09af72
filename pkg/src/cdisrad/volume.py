"""3D intensity volumes and the on-disk volume container.

File layout (little-endian)::

    b"CDVOL1\\n"
    one line of UTF-8 JSON: {"channels", "dims", "dtype", "spacing", "meta"}
    raw voxels, C order, shape (channels, nx, ny, nz)

NIfTI files (``.nii``/``.nii.gz``) can be read when nibabel is installed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CDVOL1\n"
VOLUME_SUFFIX = ".cdv"


class VolumeError(ValueError):
    """Raised for invalid volumes or unreadable volume files."""


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Real-valued intensity grid with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeError(f"volume must be 3D with all dims >= 1, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise VolumeError(f"spacing must be 3 positive values, got {self.spacing}")
        if not np.isfinite(data).all():
            raise VolumeError(f"volume has {int((~np.isfinite(data)).sum())} non-finite voxels")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def same_grid(self, other: Volume3D) -> bool:
        return self.dims == other.dims and np.allclose(self.spacing, other.spacing, rtol=1e-6)

    def with_data(self, data, **meta) -> Volume3D:
        """New volume on this grid."""
        return Volume3D(data, self.spacing, {**self.meta, **meta})


def write_array(path, data, spacing=(1.0, 1.0, 1.0), meta=None, dtype="<f8"):
    """Write a ``(channels, nx, ny, nz)`` or ``(nx, ny, nz)`` array."""
    arr = np.asarray(data)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise VolumeError(f"expected 3D or 4D array, got shape {arr.shape}")
    header = {
        "channels": int(arr.shape[0]),
        "dims": [int(n) for n in arr.shape[1:]],
        "dtype": np.dtype(dtype).str,
        "spacing": [float(s) for s in spacing],
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(raw)


def read_array(path):
    """Read a volume file; returns ``(array (channels, nx, ny, nz), spacing, meta)``."""
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        return _read_nifti(path)
    try:
        with open(path, "rb") as fh:
            if fh.read(len(MAGIC)) != MAGIC:
                raise VolumeError(f"{path}: not a volume file (bad magic)")
            header = json.loads(fh.readline())
            raw = fh.read()
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeError(f"{path}: unreadable header ({exc})") from exc
    try:
        shape = (int(header["channels"]), *map(int, header["dims"]))
        dtype = np.dtype(header["dtype"])
        spacing = tuple(header["spacing"])
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeError(f"{path}: malformed header ({exc})") from exc
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise VolumeError(f"{path}: expected {expected} data bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float64)
    return arr, spacing, header.get("meta", {})


def write_volume(path, volume: Volume3D, meta=None):
    write_array(path, volume.data, volume.spacing, {**volume.meta, **(meta or {})})


def read_volume(path) -> Volume3D:
    arr, spacing, meta = read_array(path)
    if arr.shape[0] != 1:
        raise VolumeError(f"{path}: expected a single-channel volume, found {arr.shape[0]} channels")
    return Volume3D(arr[0], spacing, meta)


def _read_nifti(path):
    try:
        import nibabel
    except ImportError as exc:
        raise VolumeError(f"{path}: reading NIfTI requires nibabel (pip install nibabel)") from exc
    img = nibabel.load(str(path))
    arr = np.asarray(img.get_fdata(), dtype=np.float64)
    if arr.ndim == 4 and arr.shape[3] == 1:
        arr = arr[..., 0]
    if arr.ndim != 3:
        raise VolumeError(f"{path}: expected a 3D image, got shape {arr.shape}")
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return arr[None], spacing, {}
