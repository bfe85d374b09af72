"""Patient manifests, cohort validation and DWI study loading.

A manifest is a UTF-8 CSV with header
``patient_id,modality,bvalue,path,sbr_grade,pcr`` and one row per modality
file. A patient's rows must be contiguous. Unknown labels are written as the
sentinel ``NA``; ``bvalue`` is blank for non-DWI modalities. Paths are
relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cdisrad.volume import Volume3D, VolumeError, read_volume

log = logging.getLogger(__name__)

COLUMNS = ("patient_id", "modality", "bvalue", "path", "sbr_grade", "pcr")
NA = "NA"
GRADES = ("I", "II", "III")
TASKS = ("grading", "pcr")
TIMEPOINT = "T0"


class ManifestError(ValueError):
    """Malformed or inconsistent manifest."""


class CohortError(ValueError):
    """Cohort-level contract violation (grid mismatch, missing label, ...)."""


@dataclass(frozen=True)
class ModalityFile:
    path: str
    bvalue: float | None = None


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    modality_paths: dict[str, tuple[ModalityFile, ...]] = field(default_factory=dict)
    sbr_grade: str | None = None
    pcr: bool | None = None
    timepoint: str = TIMEPOINT

    def __post_init__(self):
        if self.sbr_grade is not None and self.sbr_grade not in GRADES:
            raise ValueError(f"invalid SBR grade {self.sbr_grade!r}")
        if self.timepoint != TIMEPOINT:
            raise ValueError(f"only timepoint {TIMEPOINT} is supported, got {self.timepoint!r}")

    def has_label(self, task: str) -> bool:
        return (self.sbr_grade if task == "grading" else self.pcr) is not None

    def label(self, task: str) -> int:
        """Binary target for ``task`` (1 = positive class)."""
        if task == "grading":
            return binarize_grade(self.sbr_grade)
        if task == "pcr":
            if self.pcr is None:
                raise CohortError(f"patient {self.patient_id}: pCR label absent")
            return int(self.pcr)
        raise ValueError(f"unknown task {task!r}")

    def dwi_files(self) -> tuple[ModalityFile, ...]:
        return tuple(sorted(self.modality_paths.get("DWI", ()), key=lambda f: f.bvalue))

    def single_path(self, modality: str) -> str:
        files = self.modality_paths.get(modality, ())
        if len(files) != 1:
            raise CohortError(
                f"patient {self.patient_id}: expected one {modality} file, found {len(files)}"
            )
        return files[0].path


@dataclass(frozen=True)
class CohortManifest:
    """Ordered patient records for one task.

    The one-label-per-task invariant is established by :func:`load_manifest`
    and :func:`validate_cohort`, not by construction.
    """

    records: tuple[PatientRecord, ...]
    task: str
    root: Path = Path(".")

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "root", Path(self.root))

    def __len__(self):
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    def resolve(self, path: str) -> Path:
        return self.root / path

    def labels(self) -> list[int]:
        return [r.label(self.task) for r in self.records]


@dataclass(frozen=True)
class Exclusion:
    patient_id: str
    reasons: tuple[str, ...]


def binarize_grade(grade) -> int:
    """Grade III -> 1; grades I and II are merged into the negative class."""
    if grade is None or grade == NA:
        raise CohortError("SBR grade absent")
    if grade not in GRADES:
        raise CohortError(f"invalid SBR grade {grade!r}")
    return int(grade == "III")


# --------------------------------------------------------------------------
# manifest IO


def _parse_grade(cell, row_no):
    cell = cell.strip()
    if cell == NA:
        return None
    if cell not in GRADES:
        raise ManifestError(f"row {row_no}: invalid sbr_grade {cell!r} (expected I, II, III or {NA})")
    return cell


def _parse_pcr(cell, row_no):
    cell = cell.strip()
    if cell == NA:
        return None
    if cell not in ("0", "1"):
        raise ManifestError(f"row {row_no}: invalid pcr {cell!r} (expected 0, 1 or {NA})")
    return cell == "1"


def _parse_bvalue(cell, modality, row_no):
    cell = cell.strip()
    if not cell:
        if modality == "DWI":
            raise ManifestError(f"row {row_no}: DWI row needs a b-value")
        return None
    try:
        b = float(cell)
    except ValueError:
        raise ManifestError(f"row {row_no}: invalid bvalue {cell!r}") from None
    if not np.isfinite(b) or b < 0:
        raise ManifestError(f"row {row_no}: b-value must be finite and >= 0, got {cell!r}")
    return b


def _read_rows(path: Path):
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise ManifestError(f"{path}: no records")
    reader = csv.reader(text.splitlines())
    header = [h.strip() for h in next(reader)]
    if tuple(header) != COLUMNS:
        raise ManifestError(f"{path}: header must be {','.join(COLUMNS)}, got {','.join(header)}")
    rows = []
    for row_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(COLUMNS):
            raise ManifestError(f"row {row_no}: expected {len(COLUMNS)} columns, got {len(row)}")
        rows.append((row_no, row))
    if not rows:
        raise ManifestError(f"{path}: no records")
    return rows


def _build_records(rows):
    records = []
    seen: dict[str, int] = {}
    current = None
    for row_no, row in rows:
        pid, modality, bcell, rel_path, grade_cell, pcr_cell = (c.strip() for c in row)
        if not pid:
            raise ManifestError(f"row {row_no}: empty patient_id")
        grade = _parse_grade(grade_cell, row_no)
        pcr = _parse_pcr(pcr_cell, row_no)
        if current is None or current["id"] != pid:
            if pid in seen:
                raise ManifestError(
                    f"row {row_no}: duplicate patient_id {pid!r} (first seen on row {seen[pid]})"
                )
            seen[pid] = row_no
            current = {"id": pid, "files": {}, "grade": grade, "pcr": pcr}
            records.append(current)
        elif (current["grade"], current["pcr"]) != (grade, pcr):
            raise ManifestError(f"row {row_no}: labels for {pid!r} disagree with earlier rows")
        if modality:
            if not rel_path:
                raise ManifestError(f"row {row_no}: modality {modality!r} without a path")
            bvalue = _parse_bvalue(bcell, modality, row_no)
            files = current["files"].setdefault(modality, [])
            if any(f.bvalue == bvalue for f in files):
                raise ManifestError(
                    f"row {row_no}: duplicate entry for patient_id {pid!r}, {modality} b={bcell or '-'}"
                )
            files.append(ModalityFile(rel_path, bvalue))
    return [
        PatientRecord(
            r["id"],
            {m: tuple(fs) for m, fs in r["files"].items()},
            r["grade"],
            r["pcr"],
        )
        for r in records
    ]


def load_manifest(path, task: str) -> CohortManifest:
    """Read a manifest, keeping only the records labelled for ``task``.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    ManifestError
        On an empty file, a malformed row (message carries the row number) or
        a duplicate patient_id.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = _build_records(_read_rows(path))
    kept = [r for r in records if r.has_label(task)]
    if len(kept) < len(records):
        log.info("%s: %d of %d records unlabelled for task %s", path, len(records) - len(kept), len(records), task)
    return CohortManifest(tuple(kept), task, path.parent)


def _fmt_b(b):
    return "" if b is None else f"{b:g}"


def write_manifest(manifest: CohortManifest | list[PatientRecord], path):
    """Write records as a manifest CSV (paths are written as stored)."""
    records = manifest.records if isinstance(manifest, CohortManifest) else manifest
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for rec in records:
            grade = rec.sbr_grade or NA
            pcr = NA if rec.pcr is None else str(int(rec.pcr))
            entries = [(m, f) for m, files in rec.modality_paths.items() for f in files]
            if not entries:
                writer.writerow([rec.patient_id, "", "", "", grade, pcr])
            for modality, f in entries:
                writer.writerow([rec.patient_id, modality, _fmt_b(f.bvalue), f.path, grade, pcr])


# --------------------------------------------------------------------------
# validation


def validate_cohort(manifest: CohortManifest, required=("DWI",)):
    """Drop records lacking a task label or a required modality file.

    Returns
    -------
    (CohortManifest, list[Exclusion])
        Retained records in input order, and one exclusion per dropped
        patient listing every reason found.
    """
    kept, excluded = [], []
    for rec in manifest.records:
        reasons = []
        if not rec.has_label(manifest.task):
            reasons.append("missing label: " + ("sbr_grade" if manifest.task == "grading" else "pcr"))
        for modality in required:
            files = rec.modality_paths.get(modality, ())
            if not files:
                reasons.append(f"missing modality: {modality}")
            for f in files:
                if not manifest.resolve(f.path).is_file():
                    tag = modality if f.bvalue is None else f"{modality} b={f.bvalue:g}"
                    reasons.append(f"file not found: {tag} ({f.path})")
        if reasons:
            excluded.append(Exclusion(rec.patient_id, tuple(reasons)))
        else:
            kept.append(rec)
    for exc in excluded:
        log.info("excluding %s: %s", exc.patient_id, "; ".join(exc.reasons))
    return CohortManifest(tuple(kept), manifest.task, manifest.root), excluded


# --------------------------------------------------------------------------
# DWI studies


@dataclass(frozen=True, eq=False)
class DwiStudy:
    """Co-registered volumes indexed by strictly increasing b-value."""

    bvalues: tuple[float, ...]
    volumes: tuple[Volume3D, ...]

    def __post_init__(self):
        bvalues = tuple(float(b) for b in self.bvalues)
        volumes = tuple(self.volumes)
        if not volumes:
            raise CohortError("DWI study needs at least one volume")
        if len(bvalues) != len(volumes):
            raise CohortError(f"{len(bvalues)} b-values for {len(volumes)} volumes")
        if any(not np.isfinite(b) or b < 0 for b in bvalues):
            raise CohortError(f"b-values must be finite and non-negative: {bvalues}")
        if len(set(bvalues)) != len(bvalues):
            raise CohortError(f"duplicate b-values: {bvalues}")
        if list(bvalues) != sorted(bvalues):
            raise CohortError(f"b-values must be strictly increasing: {bvalues}")
        for b, vol in zip(bvalues, volumes):
            if not vol.same_grid(volumes[0]):
                raise CohortError(
                    f"grid mismatch at b={b:g}: dims {vol.dims} spacing {vol.spacing} vs "
                    f"dims {volumes[0].dims} spacing {volumes[0].spacing}"
                )
        object.__setattr__(self, "bvalues", bvalues)
        object.__setattr__(self, "volumes", volumes)

    @classmethod
    def from_unsorted(cls, bvalues, volumes) -> DwiStudy:
        bvalues = [float(b) for b in bvalues]
        if len(set(bvalues)) != len(bvalues):
            raise CohortError(f"duplicate b-values: {bvalues}")
        order = np.argsort(bvalues, kind="stable")
        return cls(tuple(bvalues[i] for i in order), tuple(volumes[i] for i in order))

    @property
    def grid(self) -> Volume3D:
        return self.volumes[0]

    def signals(self, bvalues=None) -> np.ndarray:
        """Stack of volumes, shape ``(n_b, nx, ny, nz)``."""
        if bvalues is None:
            return np.stack([v.data for v in self.volumes])
        index = {b: i for i, b in enumerate(self.bvalues)}
        missing = [b for b in bvalues if float(b) not in index]
        if missing:
            raise CohortError(f"b-values {missing} not in study {self.bvalues}")
        return np.stack([self.volumes[index[float(b)]].data for b in bvalues])

    def volume(self, bvalue) -> Volume3D:
        return self.volumes[self.bvalues.index(float(bvalue))]


def load_dwi_study(paths, bvalues) -> DwiStudy:
    """Load one volume per b-value and return them sorted by b-value."""
    paths, bvalues = list(paths), list(bvalues)
    if len(paths) != len(bvalues):
        raise CohortError(f"{len(paths)} paths for {len(bvalues)} b-values")
    volumes = []
    for p in paths:
        try:
            volumes.append(read_volume(p))
        except VolumeError as exc:
            raise CohortError(f"{p}: {exc}") from exc
    return DwiStudy.from_unsorted(bvalues, volumes)


def record_study(manifest: CohortManifest, record: PatientRecord) -> DwiStudy:
    files = record.dwi_files()
    if not files:
        raise CohortError(f"patient {record.patient_id}: no DWI files")
    return load_dwi_study([manifest.resolve(f.path) for f in files], [f.bvalue for f in files])
