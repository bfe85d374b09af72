import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from cdisrad.standardize import (
    CUBE_SHAPE,
    DataCube,
    fit_slices,
    load_cube,
    save_cube,
    stack_channels,
    standardize_cube,
)
from cdisrad.volume import Volume3D


@settings(max_examples=15, deadline=None)
@given(
    nx=st.integers(1, 60), ny=st.integers(1, 60), nz=st.integers(1, 40), seed=st.integers(0, 999)
)
def test_output_shape_always_fixed(nx, ny, nz, seed):
    data = np.random.default_rng(seed).normal(size=(nx, ny, nz))
    cube = standardize_cube(Volume3D(data))
    assert cube.data.shape == (1, *CUBE_SHAPE)
    assert np.isfinite(cube.data).all()


def test_normalised_input_unchanged():
    rng = np.random.default_rng(0)
    data = rng.normal(size=CUBE_SHAPE)
    data = (data - data.mean()) / data.std()
    cube = standardize_cube(Volume3D(data))
    np.testing.assert_allclose(cube.data[0], data, atol=1e-6)


def test_ramp_matches_reference_interpolator():
    i, j, k = np.meshgrid(np.arange(112), np.arange(112), np.arange(25), indexing="ij")
    ramp = 3.0 * i - 2.0 * j + 0.5 * k + 10.0
    cube = standardize_cube(Volume3D(ramp))
    coords = np.clip((np.arange(224) + 0.5) * 0.5 - 0.5, 0, 111)
    gx, gy = np.meshgrid(coords, coords, indexing="ij")
    ref = np.stack(
        [ndimage.map_coordinates(ramp[:, :, s], [gx, gy], order=1, mode="nearest") for s in range(25)],
        axis=-1,
    )
    ref = (ref - ref.mean()) / ref.std()
    np.testing.assert_allclose(cube.data[0], ref, atol=1e-6)


def _stats(cube):
    x = cube.data[0]
    return abs(x.mean()), abs(x.std() - 1.0)


@pytest.mark.parametrize("dims", [(30, 40, 10), (224, 224, 25), (50, 20, 40), (8, 8, 1)])
def test_normalisation_over_whole_cube(dims):
    data = np.random.default_rng(1).gamma(2.0, 50.0, size=dims)
    mean_err, std_err = _stats(standardize_cube(Volume3D(data)))
    assert mean_err <= 1e-5 and std_err <= 1e-5


def test_padding_slices_are_zero():
    data = np.random.default_rng(2).uniform(10, 20, size=(16, 16, 9))
    cube = standardize_cube(Volume3D(data))
    pad_before = (25 - 9) // 2
    assert np.all(cube.data[0, :, :, :pad_before] == 0.0)
    assert np.all(cube.data[0, :, :, pad_before + 9:] == 0.0)
    assert np.all(cube.data[0, :, :, pad_before:pad_before + 9] != 0.0)


def test_center_crop():
    data = np.broadcast_to(np.arange(31, dtype=float), (2, 2, 31))
    out, mask = fit_slices(data, 25)
    np.testing.assert_array_equal(out[0, 0], np.arange(3, 28))
    assert mask.all()


def test_constant_volume_gives_zero_cube():
    cube = standardize_cube(Volume3D(np.full((20, 30, 12), 7.25)))
    assert np.all(cube.data == 0.0)
    assert cube.normalization[0][1] == 0.0


def test_deterministic():
    data = np.random.default_rng(3).normal(size=(37, 41, 19))
    a = standardize_cube(Volume3D(data)).data
    b = standardize_cube(Volume3D(data.copy())).data
    assert a.tobytes() == b.tobytes()


def test_backends_agree(backend):
    data = np.random.default_rng(4).normal(size=(37, 41, 19))
    ref = standardize_cube(Volume3D(data), backend="numpy").data
    np.testing.assert_allclose(standardize_cube(Volume3D(data), backend=backend).data, ref, atol=1e-12)


# --------------------------------------------------------------------------
# channel stacking


def _cubes(n, shape=(6, 6, 5)):
    rng = np.random.default_rng(9)
    return [standardize_cube(Volume3D(rng.normal(size=shape)), shape=shape) for _ in range(n)]


def test_stack_four_dwi_cubes():
    cubes = _cubes(4)
    stacked = stack_channels(cubes)
    assert stacked.channels == 4
    for i, c in enumerate(cubes):
        np.testing.assert_array_equal(stacked.data[i], c.data[0])
        assert stacked.normalization[i] == c.normalization[0]


def test_stack_single_is_identity():
    (cube,) = _cubes(1)
    out = stack_channels([cube])
    np.testing.assert_array_equal(out.data, cube.data)


def test_stack_permutation_consistent():
    cubes = _cubes(4)
    perm = [2, 0, 3, 1]
    a = stack_channels(cubes)
    b = stack_channels([cubes[i] for i in perm])
    np.testing.assert_array_equal(b.data, a.data[perm])


def test_stack_errors():
    with pytest.raises(ValueError, match="at least one"):
        stack_channels([])
    with pytest.raises(ValueError, match="spatial"):
        stack_channels(_cubes(1, (6, 6, 5)) + _cubes(1, (6, 7, 5)))
    with pytest.raises(ValueError, match="channels"):
        stack_channels([stack_channels(_cubes(2))])


def test_cube_cache_round_trip(tmp_path):
    cube = stack_channels(_cubes(3))
    save_cube(tmp_path / "c.cdv", cube)
    back = load_cube(tmp_path / "c.cdv")
    np.testing.assert_array_equal(back.data, cube.data)
    assert back.normalization == cube.normalization
    assert isinstance(back, DataCube)
