"""Synthetic correlated diffusion (CDI^s) signal construction.

Native DWI signals are fitted per voxel with the monoexponential model
``S(b) = S0 * exp(-b * ADC)``, signals are synthesised at extrapolated
b-values and native + synthetic signals are mixed with a coefficient-weighted
geometric mean::

    CDIs = prod_b max(S_b, eps) ** rho_b

The geometric form is a stand-in for a calibrated CDI^s mixing functional;
its outputs are not clinically calibrated CDI^s values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from cdisrad import kernels
from cdisrad.cohort import CohortError, DwiStudy
from cdisrad.volume import Volume3D

log = logging.getLogger(__name__)

DEFAULT_NATIVE_BVALUES = (0.0, 100.0, 600.0, 800.0)
DEFAULT_SYNTHETIC_BVALUES = (1000.0, 1500.0, 2000.0)
EPS_FRACTION = 1e-6
EPS_PERCENTILE = 99.0


@dataclass(frozen=True, eq=False)
class AdcFit:
    s0: Volume3D
    adc: Volume3D
    residual: Volume3D
    epsilon: float
    n_clamped: int = 0


@dataclass(frozen=True)
class MixingConfig:
    """Which signals enter the mix and with what weight.

    ``coefficients=None`` means uniform weights ``1/|B|`` over
    ``B = native ∪ synthetic``. ``epsilon=None`` derives the log-domain floor
    from the data (``1e-6`` times the 99th-percentile native intensity).
    """

    native_bvalues: tuple[float, ...] = DEFAULT_NATIVE_BVALUES
    synthetic_bvalues: tuple[float, ...] = DEFAULT_SYNTHETIC_BVALUES
    coefficients: dict[float, float] | None = None
    epsilon: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "native_bvalues", tuple(float(b) for b in self.native_bvalues))
        object.__setattr__(self, "synthetic_bvalues", tuple(float(b) for b in self.synthetic_bvalues))
        if self.coefficients is not None:
            object.__setattr__(
                self, "coefficients", {float(b): float(w) for b, w in self.coefficients.items()}
            )
        if not self.native_bvalues:
            raise ValueError("at least one native b-value is required")
        if any(b < 0 for b in self.all_bvalues):
            raise ValueError("b-values must be non-negative")
        if len(set(self.all_bvalues)) != len(self.all_bvalues):
            raise ValueError(f"b-values repeat across native/synthetic sets: {self.all_bvalues}")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def all_bvalues(self) -> tuple[float, ...]:
        return self.native_bvalues + self.synthetic_bvalues

    def weights(self) -> np.ndarray:
        """Coefficient per b-value, ordered like :attr:`all_bvalues`."""
        bset = self.all_bvalues
        if self.coefficients is None:
            return np.full(len(bset), 1.0 / len(bset))
        missing = [b for b in bset if b not in self.coefficients]
        if missing:
            raise CohortError(f"no mixing coefficient for b-values {missing}")
        extra = sorted(set(self.coefficients) - set(bset))
        if extra:
            raise CohortError(f"mixing coefficients given for unused b-values {extra}")
        return np.array([self.coefficients[b] for b in bset])

    def to_dict(self) -> dict:
        return {
            "native_bvalues": list(self.native_bvalues),
            "synthetic_bvalues": list(self.synthetic_bvalues),
            "coefficients": None
            if self.coefficients is None
            else {f"{b:g}": w for b, w in sorted(self.coefficients.items())},
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MixingConfig:
        d = dict(d or {})
        coeffs = d.get("coefficients")
        return cls(
            native_bvalues=tuple(d.get("native_bvalues", DEFAULT_NATIVE_BVALUES)),
            synthetic_bvalues=tuple(d.get("synthetic_bvalues", DEFAULT_SYNTHETIC_BVALUES)),
            coefficients=None if coeffs is None else {float(b): w for b, w in coeffs.items()},
            epsilon=d.get("epsilon"),
        )


def _clamp_negative(signals):
    neg = signals < 0
    n = int(neg.sum())
    if n:
        signals = np.where(neg, 0.0, signals)
    return signals, n


def log_floor(signals) -> float:
    """Default log-domain floor: a millionth of the 99th-percentile intensity."""
    p99 = float(np.percentile(signals, EPS_PERCENTILE)) if signals.size else 0.0
    return EPS_FRACTION * p99 if p99 > 0 else EPS_FRACTION


def fit_adc(study: DwiStudy, epsilon: float | None = None, backend=None) -> AdcFit:
    """Per-voxel log-linear least-squares fit of ``ln S = ln S0 - b ADC``.

    Negative intensities are clamped to zero (the count is kept on the
    result). All-zero voxels fit through the ``epsilon`` floor and come out
    as ``S0 = epsilon, ADC = 0``; voxels only partly on the floor get a
    large residual.
    """
    if len(study.bvalues) < 2:
        raise CohortError(f"ADC fit needs at least 2 b-values, study has {len(study.bvalues)}")
    signals, n_clamped = _clamp_negative(study.signals())
    if n_clamped:
        log.warning("clamped %d negative voxel intensities to 0", n_clamped)
    eps = log_floor(signals) if epsilon is None else float(epsilon)
    if not eps > 0:
        raise ValueError(f"epsilon must be positive, got {eps}")
    grid = study.grid
    flat = signals.reshape(len(study.bvalues), -1)
    s0, adc, resid = kernels.loglinear_fit(np.array(study.bvalues), flat, eps, backend=backend)
    return AdcFit(
        s0=grid.with_data(s0.reshape(grid.dims)),
        adc=grid.with_data(adc.reshape(grid.dims)),
        residual=grid.with_data(resid.reshape(grid.dims)),
        epsilon=eps,
        n_clamped=n_clamped,
    )


def _synth(s0, adc, b):
    return s0 * np.exp(-b * adc)


def synthesize_signal(fit: AdcFit, b: float) -> Volume3D:
    """Model signal ``S0 * exp(-b * ADC)`` at b-value ``b``."""
    b = float(b)
    if not b >= 0:
        raise ValueError(f"b-value must be non-negative, got {b}")
    return fit.s0.with_data(_synth(fit.s0.data, fit.adc.data, b))


def compute_cdis(study: DwiStudy, config: MixingConfig | None = None, backend=None) -> Volume3D:
    """Fit native signals, synthesise extra b-values and mix them into one volume."""
    config = config or MixingConfig()
    weights = config.weights()
    missing = [b for b in config.native_bvalues if b not in study.bvalues]
    if missing:
        raise CohortError(f"native b-values {missing} absent from study {study.bvalues}")

    native, n_clamped = _clamp_negative(study.signals(config.native_bvalues))
    if n_clamped:
        log.warning("clamped %d negative voxel intensities to 0", n_clamped)
    eps = log_floor(native) if config.epsilon is None else config.epsilon
    grid = study.grid
    stack = [native.reshape(len(config.native_bvalues), -1)]
    if config.synthetic_bvalues:
        sub = DwiStudy(config.native_bvalues, tuple(grid.with_data(s) for s in native))
        fit = fit_adc(sub, epsilon=eps, backend=backend)
        s0, adc = fit.s0.data.ravel(), fit.adc.data.ravel()
        stack.append(np.stack([_synth(s0, adc, b) for b in config.synthetic_bvalues]))
    mixed = kernels.log_mix(np.concatenate(stack), weights, eps, backend=backend)
    return grid.with_data(mixed.reshape(grid.dims), modality="CDIs")
