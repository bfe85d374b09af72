"""``cdisrad`` command line: phantom, synth, cube, loocv, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
Progress goes to stderr; tables and JSON summaries go to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from cdisrad import __version__
from cdisrad.cohort import CohortError, ManifestError, load_manifest, validate_cohort
from cdisrad.config import ConfigError, PipelineConfig, load_config
from cdisrad.volume import VolumeError

log = logging.getLogger("cdisrad")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _non_negative_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _add_config_args(p, modalities=False):
    p.add_argument("--config", type=Path, help="YAML pipeline config")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--cache-dir", type=Path, help="overrides $CDISRAD_CACHE_DIR")
    p.add_argument("--output-dir", type=Path)
    p.add_argument("--task", choices=("grading", "pcr"))
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="maximum worker count")
    if modalities:
        p.add_argument(
            "--modality", action="extend", nargs="+", dest="modalities",
            help="CDIs, ADC, T2w, DWI-stacked or DWI-b<value>; repeatable, several per flag",
        )


def build_parser():
    parser = _Parser(prog="cdisrad", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cdisrad {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="write a synthetic cohort with ground truth")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=_non_negative_int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, nargs=3, metavar=("NX", "NY", "NZ"))
    p.add_argument("--separation", type=float, help="lesion ADC difference between classes (mm^2/s)")
    p.add_argument("--noise", type=float, help="noise sigma as a fraction of tissue S0")

    p = sub.add_parser("synth", help="compute a CDI^s volume per patient")
    _add_config_args(p)
    p.add_argument("--force", action="store_true", help="recompute cached volumes")

    p = sub.add_parser("cube", help="standardise modality volumes into data cubes")
    _add_config_args(p, modalities=True)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("loocv", help="leave-one-out evaluation per modality")
    _add_config_args(p, modalities=True)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("report", help="rebuild the comparison table from report files")
    _add_config_args(p)
    p.add_argument("reports", nargs="*", type=Path, help="*.report.jsonl files")
    return parser


def _config(args) -> PipelineConfig:
    overrides = {
        k: getattr(args, k, None)
        for k in ("manifest", "cache_dir", "output_dir", "task", "seed", "jobs", "modalities", "epochs")
    }
    try:
        return load_config(args.config, overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _required_modalities(config):
    needed = set()
    for m in config.modalities:
        if m in ("ADC", "T2w"):
            needed.add(m)
        else:
            needed.add("DWI")
    return tuple(sorted(needed))


def _cohort(config, required=None):
    if config.manifest is None:
        raise UsageError("no manifest given (--manifest or 'manifest:' in the config)")
    manifest = load_manifest(config.manifest, config.task)
    required = _required_modalities(config) if required is None else required
    manifest, excluded = validate_cohort(manifest, required)
    for exc in excluded:
        log.warning("excluded %s: %s", exc.patient_id, "; ".join(exc.reasons))
    return manifest, excluded


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def cmd_phantom(args):
    from cdisrad.phantom import MANIFEST_NAME, PhantomSpec, generate_phantom_cohort

    kwargs = {"n_patients": args.n, "seed": args.seed}
    if args.grid:
        kwargs["grid"] = tuple(args.grid)
    if args.separation is not None:
        kwargs["class_separation"] = args.separation
    if args.noise is not None:
        kwargs["noise_sigma"] = args.noise
    try:
        spec = PhantomSpec(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest, _ = generate_phantom_cohort(spec, args.out)
    log.info("wrote %d phantom patients to %s", len(manifest), args.out)
    _emit({"manifest": str(args.out / MANIFEST_NAME), "n_patients": len(manifest)})
    return EXIT_OK


def cmd_synth(args):
    from cdisrad.pipeline import cdis_path, synth_patient

    config = _config(args)
    # label check only: an unreadable DWI file is an error naming the patient
    manifest, excluded = _cohort(config, required=())
    meta = config.stamp()

    def one(rec):
        out = cdis_path(config.cache_dir, rec.patient_id)
        wrote = synth_patient(manifest, rec, config.mixing, out, force=args.force, meta=meta)
        log.info("%s %s -> %s", "synth" if wrote else "cache hit", rec.patient_id, out)
        return wrote

    with ThreadPoolExecutor(max_workers=config.jobs) as pool:
        written = list(pool.map(one, manifest.records))
    _emit({
        "computed": sum(written),
        "cached": len(written) - sum(written),
        "excluded": [e.patient_id for e in excluded],
        **meta,
    })
    return EXIT_OK


def cmd_cube(args):
    from cdisrad.pipeline import cohort_cubes, parse_modality

    config = _config(args)
    manifest, _ = _cohort(config)
    for name in config.modalities:
        cohort_cubes(
            manifest, parse_modality(name), config.mixing, config.cache_dir,
            use_cache=not args.force, meta=config.stamp(),
        )
        log.info("cubes ready for %s (%d patients)", name, len(manifest))
    _emit({"modalities": list(config.modalities), "n_patients": len(manifest), **config.stamp()})
    return EXIT_OK


def _report_dir(config):
    return Path(config.output_dir) / config.task


def _write_table(reports, out_dir, stacked_bvalues):
    from cdisrad.evaluation import compare_modalities, dumps_records

    table = compare_modalities(reports, stacked_bvalues)
    (out_dir / "comparison.txt").write_text(table.to_text(), encoding="utf-8")
    (out_dir / "comparison.jsonl").write_text(dumps_records(table.to_records()), encoding="utf-8")
    sys.stdout.write(table.to_text())
    return table


def cmd_loocv(args):
    from cdisrad.evaluation import dumps_records, run_loocv
    from cdisrad.pipeline import cohort_cubes, parse_modality

    config = _config(args)
    manifest, excluded = _cohort(config)
    out_dir = _report_dir(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for name in config.modalities:
        modality = parse_modality(name)
        cubes = cohort_cubes(manifest, modality, config.mixing, config.cache_dir, meta=config.stamp())
        result = run_loocv(
            manifest, modality, config.task, config.train, config.net,
            cubes=cubes, seed=config.seed, jobs=config.jobs, fingerprint=config.fingerprint,
            meta={"excluded": [e.patient_id for e in excluded], "tool_version": __version__},
        )
        reports.append(result.report)
        (out_dir / f"{modality.name}.report.jsonl").write_text(
            dumps_records([result.report.to_record()]), encoding="utf-8"
        )
        fold_records = [
            {
                "patient_id": o.result.patient_id,
                "true_label": o.result.true_label,
                "predicted_label": o.result.predicted_label,
                "probability": o.result.probability,
                "n_train": len(o.train_ids),
                "weights_sha256": o.checksum,
                "final_loss": o.loss_history[-1] if o.loss_history else None,
                **config.stamp(),
            }
            for o in result.outcomes
        ]
        (out_dir / f"{modality.name}.folds.jsonl").write_text(dumps_records(fold_records), encoding="utf-8")
        log.info("%s %s: %s", config.task, modality.name, result.report.display())
    _write_table(reports, out_dir, config.mixing.native_bvalues)
    return EXIT_OK


def cmd_report(args):
    from cdisrad.evaluation import MetricsReport

    config = _config(args)
    paths = args.reports or sorted(_report_dir(config).glob("*.report.jsonl"))
    if not paths:
        raise UsageError(f"no report files found in {_report_dir(config)}")
    reports = []
    for p in paths:
        for line in Path(p).read_text(encoding="utf-8").splitlines():
            if line.strip():
                reports.append(MetricsReport.from_record(json.loads(line)))
    out_dir = Path(paths[0]).parent
    try:
        _write_table(reports, out_dir, config.mixing.native_bvalues)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "synth": cmd_synth,
    "cube": cmd_cube,
    "loocv": cmd_loocv,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CohortError, ManifestError, VolumeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
