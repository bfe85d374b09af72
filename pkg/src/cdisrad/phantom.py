"""Synthetic DWI cohorts with known ground truth.

Each patient is an ellipsoidal "body" of tissue with one axis-aligned
ellipsoidal lesion. Lesion ADC depends on the class: positive patients
(grade III / pCR achieved) get a restricted lesion with mean ADC
``adc_center - class_separation / 2``, negatives ``adc_center +
class_separation / 2``. DWI volumes are ``S0 exp(-b ADC)`` plus Gaussian
noise, clamped at zero. ADC (planted map) and T2w (a copy of the S0 map)
are exported as direct maps.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from cdisrad import __version__
from cdisrad.cohort import CohortManifest, ModalityFile, PatientRecord, write_manifest
from cdisrad.volume import Volume3D, write_volume

TISSUE_S0 = 1000.0
LESION_S0 = 1150.0
TISSUE_ADC = 0.0015
MANIFEST_NAME = "manifest.csv"
GROUND_TRUTH_NAME = "ground_truth.json"


@dataclass(frozen=True)
class PhantomSpec:
    n_patients: int = 20
    grid: tuple[int, int, int] = (48, 48, 12)
    native_bvalues: tuple[float, ...] = (0.0, 100.0, 600.0, 800.0)
    class_separation: float = 0.0012
    noise_sigma: float = 0.02
    seed: int = 0
    adc_center: float = 0.0014
    adc_jitter: float = 0.0001
    spacing: tuple[float, float, float] = (1.5, 1.5, 4.0)
    lesion_radius: tuple[float, float] = (0.18, 0.28)

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(n) for n in self.grid))
        object.__setattr__(self, "native_bvalues", tuple(float(b) for b in self.native_bvalues))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "lesion_radius", tuple(float(r) for r in self.lesion_radius))
        if self.n_patients < 0:
            raise ValueError("n_patients must be >= 0")
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ValueError(f"grid must be 3 positive dims, got {self.grid}")
        for name in ("class_separation", "noise_sigma", "adc_jitter"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.adc_center - self.class_separation / 2 <= 0:
            raise ValueError("positive-class lesion ADC must stay above zero")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True, eq=False)
class PhantomPatient:
    patient_id: str
    label: int
    lesion_adc: float
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    s0: np.ndarray
    adc: np.ndarray
    lesion_mask: np.ndarray
    dwi: dict = field(default_factory=dict)


def balanced_labels(n, rng):
    """Shuffled labels with class counts differing by at most one."""
    labels = np.arange(n) % 2
    if n % 2:
        labels[-1] = rng.integers(2)
    return rng.permutation(labels)


def _ellipsoid(shape, center, radii):
    axes = np.ogrid[tuple(slice(0, n) for n in shape)]
    r2 = sum(((ax - c) / r) ** 2 for ax, c, r in zip(axes, center, radii))
    return r2 <= 1.0


def simulate_patient(spec: PhantomSpec, index: int, label: int, seed_seq) -> PhantomPatient:
    rng = np.random.default_rng(seed_seq)
    nx, ny, nz = spec.grid
    mid = np.array([(nx - 1) / 2, (ny - 1) / 2, (nz - 1) / 2])
    body = _ellipsoid(spec.grid, mid, (0.46 * nx, 0.46 * ny, max(0.6 * nz, 1.0)))

    lo, hi = spec.lesion_radius
    radii = (
        rng.uniform(lo, hi) * nx / 2,
        rng.uniform(lo, hi) * ny / 2,
        max(rng.uniform(0.25, 0.4) * nz, 1.0),
    )
    # keep the lesion inside the body
    center = tuple(
        float(m + rng.uniform(-1, 1) * max(0.0, 0.46 * n - r - 1) * 0.5)
        for m, n, r in zip(mid, (nx, ny), radii[:2])
    ) + (float(mid[2] + rng.uniform(-0.1, 0.1) * nz),)
    lesion = _ellipsoid(spec.grid, center, radii) & body

    mean_adc = spec.adc_center + (-0.5 if label else 0.5) * spec.class_separation
    lesion_adc = float(max(rng.normal(mean_adc, spec.adc_jitter), 1e-5))

    s0 = np.where(body, TISSUE_S0, 0.0)
    s0 = np.where(lesion, LESION_S0, s0)
    adc = np.where(body, TISSUE_ADC, 0.0)
    adc = np.where(lesion, lesion_adc, adc)

    sigma = spec.noise_sigma * TISSUE_S0
    dwi = {}
    for b in spec.native_bvalues:
        clean = s0 * np.exp(-b * adc)
        if sigma > 0:
            clean = np.maximum(clean + rng.normal(0.0, sigma, spec.grid), 0.0)
        dwi[b] = clean
    return PhantomPatient(
        f"P{index:04d}", int(label), lesion_adc, center, radii, s0, adc, lesion, dwi
    )


def simulate_cohort(spec: PhantomSpec) -> list[PhantomPatient]:
    """In-memory cohort; per-patient randomness comes from spawned sub-seeds."""
    root = np.random.SeedSequence(spec.seed)
    label_seq, patient_seq = root.spawn(2)
    labels = balanced_labels(spec.n_patients, np.random.default_rng(label_seq))
    subs = patient_seq.spawn(spec.n_patients)
    return [simulate_patient(spec, i, int(y), s) for i, (y, s) in enumerate(zip(labels, subs))]


def _grade_for(label, rng_value):
    return "III" if label else ("I" if rng_value < 0.1 else "II")


def generate_phantom_cohort(spec: PhantomSpec, out_dir, task="grading", fingerprint=None):
    """Write a phantom cohort (volumes, manifest, ground-truth sidecar).

    Returns ``(CohortManifest, ground_truth dict)``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    patients = simulate_cohort(spec)
    grade_rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(3)[2])
    meta = {"tool_version": __version__, "phantom_seed": spec.seed}
    if fingerprint:
        meta["config_fingerprint"] = fingerprint
    records, truth = [], []
    for p in patients:
        pdir = Path(p.patient_id)
        files = {"DWI": [], "ADC": [], "T2w": [], "truth": []}
        for b, data in p.dwi.items():
            rel = pdir / f"dwi_b{b:g}.cdv"
            write_volume(out_dir / rel, Volume3D(data, spec.spacing), {**meta, "bvalue": b})
            files["DWI"].append(ModalityFile(rel.as_posix(), b))
        for name, data, modality in (("adc", p.adc, "ADC"), ("t2w", p.s0, "T2w")):
            rel = pdir / f"{name}.cdv"
            write_volume(out_dir / rel, Volume3D(data, spec.spacing), meta)
            files[modality].append(ModalityFile(rel.as_posix()))
        s0_rel = pdir / "true_s0.cdv"
        write_volume(out_dir / s0_rel, Volume3D(p.s0, spec.spacing), meta)
        mask_rel = pdir / "lesion_mask.cdv"
        write_volume(out_dir / mask_rel, Volume3D(p.lesion_mask.astype(float), spec.spacing), meta)
        grade = _grade_for(p.label, grade_rng.random())
        records.append(
            PatientRecord(
                p.patient_id,
                {m: tuple(fs) for m, fs in files.items() if m in ("DWI", "ADC", "T2w")},
                sbr_grade=grade,
                pcr=bool(p.label),
            )
        )
        truth.append(
            {
                "patient_id": p.patient_id,
                "label": p.label,
                "sbr_grade": grade,
                "pcr": bool(p.label),
                "lesion_adc": p.lesion_adc,
                "lesion_center": list(p.center),
                "lesion_radii": list(p.radii),
                "s0_path": s0_rel.as_posix(),
                "adc_path": files["ADC"][0].path,
                "lesion_mask_path": mask_rel.as_posix(),
            }
        )
    manifest = CohortManifest(tuple(records), task, out_dir)
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    ground_truth = {**meta, "spec": spec.to_dict(), "patients": truth}
    with open(out_dir / GROUND_TRUTH_NAME, "w", encoding="utf-8") as fh:
        json.dump(ground_truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest, ground_truth
