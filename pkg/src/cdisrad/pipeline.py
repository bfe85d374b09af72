"""Modality selection and per-patient cube construction."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

from cdisrad.cdis import MixingConfig, compute_cdis, fit_adc
from cdisrad.cohort import CohortError, CohortManifest, PatientRecord, record_study
from cdisrad.standardize import DataCube, load_cube, save_cube, stack_channels, standardize_cube
from cdisrad.volume import read_volume, write_volume

log = logging.getLogger(__name__)

_KINDS = ("CDIs", "ADC", "T2w", "DWI-stacked", "DWI")
_DWI_B = re.compile(r"^DWI-b(\d+(?:\.\d+)?)$")


@dataclass(frozen=True, order=True)
class Modality:
    """``CDIs``, ``ADC``, ``T2w``, ``DWI-stacked`` or ``DWI-b<value>``.

    Table rows are ordered CDIs, ADC, T2w, the stacked DWI, then single-b
    DWI by ascending b.
    """

    rank: int
    bvalue: float = -1.0

    @property
    def kind(self) -> str:
        return _KINDS[self.rank]

    @property
    def name(self) -> str:
        return f"DWI-b{self.bvalue:g}" if self.kind == "DWI" else self.kind

    def label(self, stacked_bvalues=(0, 100, 600, 800)) -> str:
        if self.kind == "DWI":
            return f"DWI (b={self.bvalue:g})"
        if self.kind == "DWI-stacked":
            return "DWI (b=" + ", ".join(f"{b:g}" for b in stacked_bvalues) + ")"
        return self.kind

    def __str__(self):
        return self.name


def parse_modality(text: str) -> Modality:
    text = str(text).strip()
    if text in _KINDS[:4]:
        return Modality(_KINDS.index(text))
    m = _DWI_B.match(text)
    if m:
        return Modality(4, float(m.group(1)))
    raise ValueError(
        f"unknown modality {text!r}; expected CDIs, ADC, T2w, DWI-stacked or DWI-b<value>"
    )


def cdis_path(cache_dir, patient_id) -> Path:
    return Path(cache_dir) / "cdis" / f"{patient_id}.cdv"


def cube_path(cache_dir, modality: Modality, patient_id) -> Path:
    return Path(cache_dir) / "cubes" / modality.name / f"{patient_id}.cdv"


def synth_patient(manifest, record, mixing: MixingConfig, out_path, force=False, meta=None) -> bool:
    """Write the patient's CDI^s volume; returns False on a cache hit."""
    out_path = Path(out_path)
    if out_path.is_file() and not force:
        return False
    try:
        vol = compute_cdis(record_study(manifest, record), mixing)
    except (CohortError, OSError) as exc:
        raise CohortError(f"patient {record.patient_id}: {exc}") from exc
    write_volume(out_path, vol, meta)
    return True


def modality_cube(
    manifest: CohortManifest,
    record: PatientRecord,
    modality: Modality,
    mixing: MixingConfig | None = None,
    cache_dir=None,
) -> DataCube:
    """Standardised cube of one modality for one patient.

    CDI^s is read from ``cache_dir`` when ``synth`` has been run, otherwise
    computed on the fly. ADC falls back to a fit of the DWI study when the
    manifest has no ADC map.
    """
    mixing = mixing or MixingConfig()
    try:
        if modality.kind == "CDIs":
            cached = cdis_path(cache_dir, record.patient_id) if cache_dir else None
            vol = read_volume(cached) if cached and cached.is_file() else compute_cdis(
                record_study(manifest, record), mixing
            )
            return standardize_cube(vol)
        if modality.kind == "ADC":
            if record.modality_paths.get("ADC"):
                return standardize_cube(read_volume(manifest.resolve(record.single_path("ADC"))))
            return standardize_cube(fit_adc(record_study(manifest, record)).adc)
        if modality.kind == "T2w":
            return standardize_cube(read_volume(manifest.resolve(record.single_path("T2w"))))
        study = record_study(manifest, record)
        if modality.kind == "DWI-stacked":
            return stack_channels([standardize_cube(v) for v in study.volumes])
        if modality.bvalue not in study.bvalues:
            raise CohortError(f"no DWI volume at b={modality.bvalue:g}")
        return standardize_cube(study.volume(modality.bvalue))
    except (CohortError, OSError) as exc:
        raise CohortError(f"patient {record.patient_id}: {exc}") from exc


def cohort_cubes(manifest, modality, mixing=None, cache_dir=None, use_cache=True, meta=None):
    """Cubes for every record, in manifest order, optionally cached on disk."""
    cubes = []
    for rec in manifest.records:
        path = cube_path(cache_dir, modality, rec.patient_id) if cache_dir else None
        if path is not None and use_cache and path.is_file():
            cubes.append(load_cube(path))
            continue
        log.info("cube %s %s", modality.name, rec.patient_id)
        cube = modality_cube(manifest, rec, modality, mixing, cache_dir)
        if path is not None:
            save_cube(path, cube, meta)
        cubes.append(cube)
    return cubes
