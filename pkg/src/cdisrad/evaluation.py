"""Leave-one-out cross-validation, metrics and modality comparison tables."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from cdisrad import __version__
from cdisrad.cohort import CohortError, CohortManifest
from cdisrad.net import (
    NetworkConfig,
    TrainConfig,
    build_extractor,
    build_predictor,
    extract_features,
    predict,
    state_checksum,
    train,
)
from cdisrad.pipeline import Modality, cohort_cubes, parse_modality

log = logging.getLogger(__name__)

NA_TEXT = "N/A"


@dataclass(frozen=True)
class FoldResult:
    patient_id: str
    true_label: int
    predicted_label: int
    probability: float


@dataclass(frozen=True)
class FoldOutcome:
    result: FoldResult
    train_ids: tuple[str, ...]
    checksum: str
    loss_history: tuple[float, ...]


@dataclass(frozen=True)
class MetricsReport:
    """Confusion counts plus rates in percent (``None`` when undefined)."""

    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    task: str = ""
    modality: str = ""
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def display(self) -> dict[str, str]:
        return {
            "accuracy": fmt_pct(self.accuracy),
            "sensitivity": fmt_pct(self.sensitivity),
            "specificity": fmt_pct(self.specificity),
        }

    def to_record(self) -> dict:
        return {**asdict(self), "tool_version": __version__, **{f"{k}_display": v for k, v in self.display().items()}}

    @classmethod
    def from_record(cls, rec: dict) -> MetricsReport:
        names = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in rec.items() if k in names})


def fmt_pct(value) -> str:
    return NA_TEXT if value is None else f"{value:.2f}%"


def _rate(num, den):
    return None if den == 0 else 100.0 * num / den


def compute_metrics(results, task="", modality="", fingerprint="", meta=None) -> MetricsReport:
    """Confusion matrix and accuracy / sensitivity / specificity in percent."""
    results = list(results)
    if not results:
        raise ValueError("compute_metrics needs at least one result")
    tp = sum(1 for r in results if r.true_label == 1 and r.predicted_label == 1)
    fp = sum(1 for r in results if r.true_label == 0 and r.predicted_label == 1)
    tn = sum(1 for r in results if r.true_label == 0 and r.predicted_label == 0)
    fn = sum(1 for r in results if r.true_label == 1 and r.predicted_label == 0)
    return MetricsReport(
        tp, fp, tn, fn,
        accuracy=100.0 * (tp + tn) / len(results),
        sensitivity=_rate(tp, tp + fn),
        specificity=_rate(tn, tn + fp),
        task=task,
        modality=modality,
        fingerprint=fingerprint,
        meta=dict(meta or {}),
    )


# --------------------------------------------------------------------------
# LOOCV


def fold_seed(global_seed: int, fold_index: int) -> int:
    return int(global_seed) ^ int(fold_index)


def run_fold(cubes, labels, ids, held_out, net_config, train_config, seed=0) -> FoldOutcome:
    """Train on every patient except ``held_out`` and predict it.

    Only the training subset (data and labels) reaches the models, so the
    held-out label cannot influence any trained weight.
    """
    train_idx = [i for i in range(len(ids)) if i != held_out]
    train_ids = tuple(ids[i] for i in train_idx)
    assert ids[held_out] not in train_ids
    s = fold_seed(seed, held_out)
    in_ch = int(np.asarray(getattr(cubes[0], "data", cubes[0])).shape[0])
    extractor = build_extractor(replace(net_config, in_channels=in_ch, seed=s))
    predictor = build_predictor(extractor.feature_dim, seed=s)
    result = train(
        extractor,
        predictor,
        [(cubes[i], labels[i]) for i in train_idx],
        replace(train_config, seed=s),
    )
    checksum = state_checksum(extractor, predictor)
    pred = predict(predictor, extract_features(extractor, cubes[held_out]))
    fold = FoldResult(ids[held_out], int(labels[held_out]), pred.label, pred.probability)
    log.info(
        "fold %d/%d %s: true=%d pred=%d p=%.4f",
        held_out + 1, len(ids), ids[held_out], fold.true_label, fold.predicted_label, fold.probability,
    )
    return FoldOutcome(fold, train_ids, checksum, tuple(result.loss_history))


@dataclass
class LoocvResult:
    folds: list[FoldResult]
    report: MetricsReport
    outcomes: list[FoldOutcome]


def _fold_job(args):
    return run_fold(*args)


def run_loocv(
    manifest: CohortManifest,
    modality,
    task=None,
    train_config: TrainConfig | None = None,
    net_config: NetworkConfig | None = None,
    *,
    cubes=None,
    mixing=None,
    cache_dir=None,
    seed=0,
    jobs=1,
    fingerprint="",
    meta=None,
) -> LoocvResult:
    """One fold per patient; models re-initialised per fold from ``seed ^ fold``."""
    modality = modality if isinstance(modality, Modality) else parse_modality(modality)
    task = task or manifest.task
    if task != manifest.task:
        raise CohortError(f"manifest is for task {manifest.task!r}, not {task!r}")
    train_config = train_config or TrainConfig()
    net_config = net_config or NetworkConfig()
    n = len(manifest)
    if n < 2:
        raise CohortError(f"LOOCV needs at least 2 patients, cohort has {n}")
    labels = manifest.labels()
    if len(set(labels)) < 2:
        raise CohortError("LOOCV needs both classes in the cohort")
    if cubes is None:
        cubes = cohort_cubes(manifest, modality, mixing, cache_dir)
    if len(cubes) != n:
        raise ValueError(f"{len(cubes)} cubes for {n} patients")
    ids = manifest.ids

    jobs_args = [(cubes, labels, ids, i, net_config, train_config, seed) for i in range(n)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_fold_job, jobs_args))
    else:
        outcomes = [_fold_job(a) for a in jobs_args]

    folds = [o.result for o in outcomes]
    assert sorted(f.patient_id for f in folds) == sorted(ids)
    run_meta = {
        "n_patients": n,
        "seed": seed,
        "training": "joint end-to-end (extractor + predictor)",
        "network": net_config.to_dict(),
        "train": train_config.to_dict(),
        "fold_seeding": "global_seed xor fold_index",
        **(meta or {}),
    }
    report = compute_metrics(folds, task, modality.name, fingerprint, run_meta)
    return LoocvResult(folds, report, outcomes)


# --------------------------------------------------------------------------
# comparison tables


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    report: MetricsReport
    best: bool


@dataclass(frozen=True)
class ComparisonTable:
    task: str
    rows: tuple[ComparisonRow, ...]

    @property
    def best(self) -> ComparisonRow:
        return next(r for r in self.rows if r.best)

    def to_text(self) -> str:
        """Plain-text comparison table, one row per modality, best row starred."""
        if self.task == "pcr":
            header = ["Imaging Modality", "Accuracy (%)"]
            body = [[r.label, f"{r.report.accuracy:.2f}"] for r in self.rows]
            title = "pCR prediction accuracy using LOOCV"
        else:
            header = ["Modality", "Accuracy", "Sensitivity", "Specificity"]
            body = [[r.label, *r.report.display().values()] for r in self.rows]
            title = "SBR grade prediction accuracy using LOOCV"
        for row, r in zip(body, self.rows):
            if r.best:
                row[0] = "*" + row[0]
        widths = [max(len(x) for x in col) for col in zip(header, *body)]
        fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
        rule = "-" * len(fmt(header))
        lines = [title, rule, fmt(header), rule, *map(fmt, body), rule, "* best accuracy"]
        return "\n".join(lines) + "\n"

    def to_records(self) -> list[dict]:
        return [
            {"row": i, "label": r.label, "best": r.best, **r.report.to_record()}
            for i, r in enumerate(self.rows)
        ]


def compare_modalities(reports, stacked_bvalues=(0, 100, 600, 800)) -> ComparisonTable:
    """One row per modality in table order, best accuracy flagged (first on ties)."""
    reports = list(reports)
    if not reports:
        raise ValueError("compare_modalities needs at least one report")
    tasks = {r.task for r in reports}
    if len(tasks) != 1:
        raise ValueError(f"reports mix tasks: {sorted(tasks)}")
    keyed = sorted(reports, key=lambda r: parse_modality(r.modality))
    best = max(range(len(keyed)), key=lambda i: (keyed[i].accuracy, -i))
    rows = tuple(
        ComparisonRow(parse_modality(r.modality).label(stacked_bvalues), r, i == best)
        for i, r in enumerate(keyed)
    )
    return ComparisonTable(tasks.pop(), rows)


def dumps_records(records) -> str:
    """One JSON object per line with sorted keys (byte-stable)."""
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
