"""Synthetic correlated diffusion imaging and volumetric deep radiomics for breast MRI."""

__version__ = "0.1.0"

from cdisrad.volume import Volume3D, read_volume, write_volume
from cdisrad.cohort import (
    CohortManifest,
    DwiStudy,
    PatientRecord,
    binarize_grade,
    load_dwi_study,
    load_manifest,
    validate_cohort,
    write_manifest,
)
from cdisrad.cdis import AdcFit, MixingConfig, compute_cdis, fit_adc, synthesize_signal
from cdisrad.standardize import CUBE_SHAPE, DataCube, stack_channels, standardize_cube

__all__ = [
    "__version__",
    "Volume3D",
    "read_volume",
    "write_volume",
    "CohortManifest",
    "DwiStudy",
    "PatientRecord",
    "binarize_grade",
    "load_dwi_study",
    "load_manifest",
    "validate_cohort",
    "write_manifest",
    "AdcFit",
    "MixingConfig",
    "compute_cdis",
    "fit_adc",
    "synthesize_signal",
    "CUBE_SHAPE",
    "DataCube",
    "stack_channels",
    "standardize_cube",
]
