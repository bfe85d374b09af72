import numpy as np
import pytest

from cdisrad._accel import HAVE_NUMBA
from cdisrad.cohort import DwiStudy
from cdisrad.volume import Volume3D

BVALUES = (0.0, 100.0, 600.0, 800.0)

BACKENDS = ["numpy"] + (["numba"] if HAVE_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


def make_study(s0, adc, bvalues=BVALUES, noise=0.0, rng=None):
    """Monoexponential study from S0 / ADC maps (optionally noisy, clamped at 0)."""
    s0 = np.asarray(s0, dtype=float)
    adc = np.asarray(adc, dtype=float)
    vols = []
    for b in bvalues:
        data = s0 * np.exp(-b * adc)
        if noise:
            data = np.maximum(data + rng.normal(0.0, noise, data.shape), 0.0)
        vols.append(Volume3D(data))
    return DwiStudy(tuple(bvalues), tuple(vols))
