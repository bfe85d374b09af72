"""Fixed-size, intensity-normalised data cubes for the network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cdisrad import kernels
from cdisrad.volume import Volume3D, read_array, write_array

CUBE_SHAPE = (224, 224, 25)
CONSTANT_STD = 1e-12


@dataclass(frozen=True, eq=False)
class DataCube:
    """``(channels, 224, 224, 25)`` array plus the (mean, std) used per channel."""

    data: np.ndarray
    normalization: tuple[tuple[float, float], ...]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[0] < 1:
            raise ValueError(f"cube data must be (channels, nx, ny, nz), got {data.shape}")
        if len(self.normalization) != data.shape[0]:
            raise ValueError("one (mean, std) pair is needed per channel")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "normalization", tuple(tuple(map(float, p)) for p in self.normalization))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


def fit_slices(data, nz_out):
    """Centre-crop or symmetrically zero-pad the slice axis to ``nz_out``.

    Returns the new array and a boolean mask of the original (unpadded) slices.
    """
    nz = data.shape[2]
    if nz >= nz_out:
        start = (nz - nz_out) // 2
        return data[:, :, start:start + nz_out], np.ones(nz_out, dtype=bool)
    before = (nz_out - nz) // 2
    out = np.zeros(data.shape[:2] + (nz_out,))
    out[:, :, before:before + nz] = data
    mask = np.zeros(nz_out, dtype=bool)
    mask[before:before + nz] = True
    return out, mask


def normalize_channel(data, slice_mask):
    """Z-score the real slices so the *whole* cube has mean 0 and std 1.

    Padded slices stay exactly zero. The scale is taken over the full cube
    voxel count, so with no padding this is the ordinary (population)
    z-score. A channel whose std is below ``CONSTANT_STD`` becomes all-zero.
    """
    real = data[:, :, slice_mask]
    n_total = data.size
    mean = float(real.mean())
    centred = real - mean
    std = float(np.sqrt(np.sum(centred * centred) / n_total))
    out = np.zeros_like(data)
    if std < CONSTANT_STD:
        return out, (mean, 0.0)
    out[:, :, slice_mask] = centred / std
    return out, (mean, std)


def standardize_cube(volume: Volume3D | np.ndarray, shape=CUBE_SHAPE, backend=None) -> DataCube:
    """Resample in-plane (bilinear), crop/pad slices, then z-score.

    ``shape`` defaults to the network's 224 x 224 x 25 input.
    """
    data = volume.data if isinstance(volume, Volume3D) else np.asarray(volume, dtype=np.float64)
    if data.ndim != 3 or not np.isfinite(data).all():
        raise ValueError("standardize_cube needs a finite 3D volume")
    nx, ny, nz = shape
    if data.shape[:2] != (nx, ny):
        data = kernels.resize_inplane(data, nx, ny, backend=backend)
    data, mask = fit_slices(data, nz)
    normed, stats = normalize_channel(data, mask)
    return DataCube(normed[None], (stats,))


def stack_channels(cubes) -> DataCube:
    """Concatenate single-channel cubes along the channel axis, in order."""
    cubes = list(cubes)
    if not cubes:
        raise ValueError("stack_channels needs at least one cube")
    for i, c in enumerate(cubes):
        if c.channels != 1:
            raise ValueError(f"cube {i} has {c.channels} channels; expected 1")
        if c.spatial != cubes[0].spatial:
            raise ValueError(f"cube {i} spatial dims {c.spatial} differ from {cubes[0].spatial}")
    return DataCube(
        np.concatenate([c.data for c in cubes]),
        tuple(c.normalization[0] for c in cubes),
    )


def save_cube(path, cube: DataCube, meta=None):
    write_array(path, cube.data, meta={**(meta or {}), "normalization": [list(p) for p in cube.normalization]})


def load_cube(path) -> DataCube:
    arr, _, meta = read_array(path)
    norm = meta.get("normalization") or [(0.0, 1.0)] * arr.shape[0]
    return DataCube(arr, tuple(tuple(p) for p in norm))
